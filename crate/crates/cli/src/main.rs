use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use bridgeseg::bridge::translate;
use bridgeseg::checkpoint::{load_checkpoint, Checkpoint};
use bridgeseg::dataset::{load_dataset, save_dataset, write_image, Dataset, DatasetManifest, ManifestEntry, Split};
use bridgeseg::eval::{
    compare, evaluate_experiment, read_metrics, slice_seed, Comparison, EvalOptions, ModelPredictor, METRICS_FILE,
};
use bridgeseg::fusion::silver_reference;
use bridgeseg::image::Domain;
use bridgeseg::phantom::{generate_phantoms, PhantomSpec};
use bridgeseg::seg::{mc_predict, slice_uncertainty, DEFAULT_PASSES, DEFAULT_THRESHOLD};
use bridgeseg::train::{train, TrainConfig, TrainMode};

const WORKERS_ENV: &str = "BRIDGESEG_NUM_WORKERS";
const METRICS: [&str; 5] = ["dsc", "iou", "mse", "ssim", "uncertainty"];

/// Unpaired MRI-to-CT bridge translation with joint ventricle segmentation.
///
/// Config files hold a full or partial training config as JSON; command-line
/// flags override the file.
#[derive(Parser, Debug)]
#[command(name = "bridgeseg", version)]
struct Cli {
    /// Increase log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Train translation and segmentation end to end or in two stages.
    Train(TrainArgs),
    /// Translate every MRI slice of a dataset into a synthetic CT dataset.
    Translate(TranslateArgs),
    /// Segment every slice of a dataset with MC-dropout uncertainty.
    Segment(SegmentArgs),
    /// Score a checkpoint on a paired test dataset and write a report.
    Evaluate(EvaluateArgs),
    /// Compare evaluated runs with paired t-tests.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    E2e,
    TwoStage,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::E2e => TrainMode::E2E,
            ModeArg::TwoStage => TrainMode::TwoStage,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    /// Slices per subject.
    #[arg(long, default_value_t = 4)]
    slices: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Index of the first subject, to keep splits disjoint.
    #[arg(long, default_value_t = 0)]
    first_subject: usize,
    /// `train` keeps each subject in one modality and drops CT masks;
    /// `val` and `test` keep paired slices with masks.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Replace each mask by a majority vote over this many perturbed copies.
    #[arg(long)]
    silver_atlases: Option<usize>,
    /// Fraction of boundary pixels flipped per perturbed copy.
    #[arg(long, default_value_t = 0.3)]
    silver_magnitude: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, loss logs and the run record.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Segmentation epochs of the second stage (two-stage mode).
    #[arg(long)]
    seg_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose MRI slices are translated.
    #[arg(long)]
    data: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct McArgs {
    /// Monte-Carlo dropout passes.
    #[arg(long, default_value_t = DEFAULT_PASSES)]
    passes: usize,
    /// Dropout rate at inference; defaults to the trained rate.
    #[arg(long)]
    dropout_rate: Option<f64>,
    /// Probability threshold of the binary mask.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mc: McArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Paired test dataset with reference masks.
    #[arg(long)]
    data: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mc: McArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Evaluated run as NAME=DIR, where DIR holds metrics.csv. Repeat for
    /// every run to compare.
    #[arg(long = "run", value_parser = parse_run, required = true)]
    runs: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_run(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
        _ => Err(format!("expected NAME=DIR, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .with_context(|| format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> Result<String> {
    configure_workers()?;
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Segment(a) => segment_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<String> {
    let spec = PhantomSpec::new(a.seed, a.subjects, a.slices, a.size).with_first_subject(a.first_subject);
    let mut data = generate_phantoms(&spec)?;
    match a.split {
        SplitArg::Train => data = data.into_unpaired_train(),
        SplitArg::Val => data.manifest.split = Split::Val,
        SplitArg::Test => {}
    }
    if let Some(k) = a.silver_atlases {
        for (i, m) in data.masks.iter_mut().enumerate() {
            if let Some(mask) = m {
                *mask = silver_reference(mask, k, a.silver_magnitude, a.seed.wrapping_add(i as u64))?;
            }
        }
        let params = &mut data.manifest.generator_params;
        params.insert("silver_atlases".into(), k.into());
        params.insert("silver_magnitude".into(), a.silver_magnitude.into());
    }
    let manifest = save_dataset(&data, &a.out)?;
    let masks = data.masks.iter().flatten().count();
    Ok(format!(
        "wrote {} slices ({masks} masks) to {}",
        data.len(),
        manifest.display()
    ))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        c.mode = m.into();
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.seg_epochs {
        c.seg_epochs = Some(v);
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        c.checkpoint_every = v;
    }
    c.validate()?;
    Ok(c)
}

fn train_cmd(a: TrainArgs) -> Result<String> {
    let config = train_config(&a)?;
    let data = load_dataset(&a.data)?;
    let rec = train(&data, &config, &a.out)?;
    Ok(format!(
        "trained {:?} for {} epochs in {:.1}s; final checkpoint {}",
        config.mode,
        config.epochs,
        rec.wall_clock_s,
        rec.final_checkpoint().display()
    ))
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn translate_cmd(a: TranslateArgs) -> Result<String> {
    let ckpt = load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let mut entries = Vec::new();
    let mut slices = Vec::new();
    let mut masks = Vec::new();
    for (i, (s, m)) in data.slices.iter().zip(&data.masks).enumerate() {
        if s.domain != Domain::Mri {
            continue;
        }
        let synth = translate(s, &ckpt.generator, &ckpt.config.schedule, slice_seed(a.seed, i, 1))?;
        entries.push(ManifestEntry::new(
            &s.subject_id,
            s.slice_index,
            Domain::SynthCt,
            m.is_some(),
        ));
        slices.push(synth);
        masks.push(m.clone());
    }
    if slices.is_empty() {
        bail!("{} holds no MRI slices to translate", a.data.display());
    }
    let manifest = DatasetManifest {
        entries,
        ..data.manifest.clone()
    };
    let out = Dataset::new(manifest, slices, masks)?;
    let path = save_dataset(&out, &a.out)?;
    Ok(format!("translated {} MRI slices into {}", out.len(), path.display()))
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    subject_id: &'a str,
    slice_index: usize,
    domain: Domain,
    area: usize,
    uncertainty: f64,
    mask: String,
    mean_prob: String,
    variance: String,
}

fn segment_cmd(a: SegmentArgs) -> Result<String> {
    let ckpt = load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let rate = a.mc.dropout_rate.unwrap_or(ckpt.segmenter.config.dropout_rate);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let table = a.out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&table).with_context(|| format!("creating {}", table.display()))?;
    for (i, s) in data.slices.iter().enumerate() {
        let b = mc_predict(
            &s.pixels,
            &ckpt.segmenter,
            a.mc.passes,
            rate,
            a.mc.threshold,
            slice_seed(a.mc.seed, i, 0),
        )?;
        let stem = format!("{}_{}_{}", s.subject_id, s.slice_index, s.domain.tag());
        let (mask, mean_prob, variance) = (
            format!("{stem}_pred_mask.u8"),
            format!("{stem}_mean_prob.f32"),
            format!("{stem}_variance.f32"),
        );
        let mask_path = a.out.join(&mask);
        fs::write(&mask_path, b.mask.pixels.iter().copied().collect::<Vec<u8>>())
            .with_context(|| format!("writing {}", mask_path.display()))?;
        write_image(&a.out.join(&mean_prob), &b.mean_prob)?;
        write_image(&a.out.join(&variance), &b.variance)?;
        w.serialize(PredictionRow {
            subject_id: &s.subject_id,
            slice_index: s.slice_index,
            domain: s.domain,
            area: b.mask.area(),
            uncertainty: slice_uncertainty(&b, None).value,
            mask,
            mean_prob,
            variance,
        })?;
    }
    w.flush()?;
    Ok(format!(
        "segmented {} slices with {} passes; table {}",
        data.len(),
        a.mc.passes,
        table.display()
    ))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<String> {
    let ckpt = load(&a.checkpoint)?;
    let test = load_dataset(&a.data)?;
    let mut predictor = ModelPredictor::new(&ckpt, a.mc.passes);
    if let Some(r) = a.mc.dropout_rate {
        predictor.dropout_rate = r;
    }
    predictor.threshold = a.mc.threshold;
    let options = EvalOptions {
        seed: a.mc.seed,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (ev, paths) = evaluate_experiment(&predictor, &test, &options, &a.out)?;
    let s = &ev.summary;
    Ok(format!(
        "DSC {:.3}±{:.3} over {} slices ({} subjects), 3D DSC {:.3}, SSIM {:.3}, {:.1}s; report {}",
        s.dsc.mean,
        s.dsc.std,
        s.slices,
        s.subjects,
        s.dsc3d.mean,
        s.ssim.mean,
        t0.elapsed().as_secs_f64(),
        paths.summary.display()
    ))
}

fn report_cmd(a: ReportArgs) -> Result<String> {
    let mut runs = Vec::new();
    for (name, dir) in &a.runs {
        if runs.iter().any(|(n, _)| n == name) {
            bail!("run name `{name}` given twice");
        }
        runs.push((name.clone(), read_metrics(&dir.join(METRICS_FILE))?));
    }
    let mut comparisons: Vec<Comparison> = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            for metric in METRICS {
                comparisons.push(compare((&runs[i].0, &runs[i].1), (&runs[j].0, &runs[j].1), metric)?);
            }
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let path = a.out.join("comparisons.json");
    fs::write(&path, serde_json::to_string_pretty(&comparisons)?)
        .with_context(|| format!("writing {}", path.display()))?;
    let dsc: Vec<String> = comparisons
        .iter()
        .filter(|c| c.metric == "dsc")
        .map(|c| match &c.test {
            Some(t) => format!(
                "{} vs {}: DSC {:.3} vs {:.3}, p = {:.3e}",
                c.a, c.b, c.mean_a, c.mean_b, t.p
            ),
            None => format!("{} vs {}: DSC {:.3} vs {:.3}, no test", c.a, c.b, c.mean_a, c.mean_b),
        })
        .collect();
    Ok(format!(
        "compared {} runs{}{}; wrote {}",
        runs.len(),
        if dsc.is_empty() { "" } else { ": " },
        dsc.join("; "),
        path.display()
    ))
}

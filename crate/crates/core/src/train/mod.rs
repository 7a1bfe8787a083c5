//! End-to-end and two-stage training loops.

mod config;
mod log;

use std::path::{Path, PathBuf};
use std::time::Instant;

use bridgeseg_tensor::{Adam, Graph, ParamGrads, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{discriminator_loss, translate, unsb_loss, BridgeContext, Discriminator, Generator};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::dataset::{Dataset, Split};
use crate::error::{ensure_arg, Error, Result};
use crate::image::ImageSlice;
use crate::seg::{dropout_mask, seg_graph, SegModel, EPS};

pub use config::{TrainConfig, TrainMode};
pub use log::read_loss_log;
use log::LossLog;

pub const E2E_LOG: &str = "e2e_loss.csv";
pub const TRANSLATION_LOG: &str = "translation_loss.csv";
pub const SEGMENTATION_LOG: &str = "segmentation_loss.csv";
pub const RECORD_FILE: &str = "experiment.json";

/// Mean losses of one epoch. Fields a stage does not train are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub stage: String,
    pub epoch: usize,
    pub adv: Option<f64>,
    pub sb: Option<f64>,
    pub reg: Option<f64>,
    pub unsb: Option<f64>,
    pub seg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: TrainConfig,
    pub version: String,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
    pub loss_logs: Vec<PathBuf>,
    /// Synthetic CT slices fed to the second stage.
    pub synthetic_slices: Option<usize>,
    pub wall_clock_s: f64,
}

impl ExperimentRecord {
    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints
            .last()
            .expect("training writes at least one checkpoint")
    }
}

struct Source {
    slice: ImageSlice,
    image: Tensor<f32>,
    target: Vec<f32>,
}

/// Labeled MRI sources and unlabeled CT targets of a training split.
struct TrainingSet {
    sources: Vec<Source>,
    targets: Vec<Tensor<f32>>,
}

impl TrainingSet {
    fn new(dataset: &Dataset) -> Result<Self> {
        let manifest = &dataset.manifest;
        if manifest.split != Split::Train {
            return Err(Error::Contract(format!(
                "training needs a TRAIN split, got {:?}",
                manifest.split
            )));
        }
        manifest.check_label_hygiene()?;
        manifest.check_unpaired()?;
        let sources: Vec<Source> = dataset
            .labeled_sources()
            .into_iter()
            .map(|(slice, mask)| Source {
                slice: slice.clone(),
                image: slice.to_tensor(),
                target: mask.to_target(),
            })
            .collect();
        let targets: Vec<Tensor<f32>> = dataset.targets().into_iter().map(|s| s.to_tensor()).collect();
        ensure_arg!(!sources.is_empty(), "training split has no labeled MRI slices");
        ensure_arg!(!targets.is_empty(), "training split has no CT slices");
        Ok(Self { sources, targets })
    }
}

struct Models {
    generator: Generator<f32>,
    discriminator: Discriminator<f32>,
    segmenter: SegModel<f32>,
}

impl Models {
    fn init(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            generator: Generator::new(config.generator.clone(), config.seed.wrapping_add(1))?,
            discriminator: Discriminator::new(config.discriminator.clone(), config.seed.wrapping_add(2))?,
            segmenter: SegModel::new(config.seg.clone(), config.seed.wrapping_add(3))?,
        })
    }

    fn checkpoint(&self, config: &TrainConfig, epoch: usize) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            epoch,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            segmenter: self.segmenter.clone(),
        }
    }
}

fn accumulate(acc: &mut Option<ParamGrads<f32>>, grads: ParamGrads<f32>) {
    match acc {
        Some(a) => a.accumulate(grads),
        None => *acc = Some(grads),
    }
}

fn apply(opt: &mut Adam<f32>, params: &mut bridgeseg_tensor::ParamSet<f32>, acc: Option<ParamGrads<f32>>, n: usize) {
    if let Some(mut grads) = acc {
        if n > 1 {
            grads.scale(1.0 / n as f64);
        }
        opt.step(params, &grads);
    }
}

#[derive(Default)]
struct Means {
    sums: [f64; 5],
    n: usize,
}

impl Means {
    fn add(&mut self, values: [f64; 5]) {
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v;
        }
        self.n += 1;
    }

    fn get(&self, i: usize) -> Option<f64> {
        (self.n > 0).then(|| self.sums[i] / self.n as f64)
    }
}

/// Translation update shared by both modes: one generator loss term set
/// (optionally joined with the segmentation loss) and one discriminator
/// loss per sample.
struct StepOutput {
    t_index: usize,
    adv: f32,
    sb: f32,
    reg: f32,
    unsb: f32,
    seg: Option<f32>,
    total: f32,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    data: TrainingSet,
    models: Models,
    rng: ChaCha8Rng,
    out_dir: &'a Path,
    record: ExperimentRecord,
}

impl<'a> Trainer<'a> {
    fn new(dataset: &Dataset, config: &'a TrainConfig, out_dir: &'a Path) -> Result<Self> {
        config.validate()?;
        let data = TrainingSet::new(dataset)?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Self {
            config,
            data,
            models: Models::init(config)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            out_dir,
            record: ExperimentRecord {
                config: config.clone(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                epochs: Vec::new(),
                checkpoints: Vec::new(),
                loss_logs: Vec::new(),
                synthetic_slices: None,
                wall_clock_s: 0.0,
            },
        })
    }

    fn save(&mut self, name: String, epoch: usize) -> Result<()> {
        let path = self.out_dir.join("checkpoints").join(name);
        save_checkpoint(&self.models.checkpoint(self.config, epoch), &path)?;
        self.record.checkpoints.push(path);
        Ok(())
    }

    fn due(&self, epoch: usize, last: usize) -> bool {
        epoch.is_multiple_of(self.config.checkpoint_every) || epoch == last
    }

    /// Translation step on source `i`; with `joint` the segmentation loss on
    /// the predicted endpoint is added and back-propagated into both networks.
    fn translation_step(
        &mut self,
        i: usize,
        joint: bool,
        acc: &mut [Option<ParamGrads<f32>>; 3],
    ) -> Result<StepOutput> {
        let cfg = self.config;
        let schedule = &cfg.schedule;
        let real_index = self.rng.gen_range(0..self.data.targets.len());
        let t_index = self.rng.gen_range(0..schedule.steps());
        let source = &self.data.sources[i];
        let ctx = BridgeContext::prepare(&self.models.generator, schedule, &source.image, t_index, &mut self.rng)?;
        let dropout_seed: u64 = self.rng.gen();

        let m = &self.models;
        let g = Graph::new();
        let gen = m.generator.params.bind(&g, true);
        let disc = m.discriminator.params.bind(&g, false);
        let seg = m.segmenter.params.bind(&g, joint);
        let terms = unsb_loss(
            &m.generator.config,
            &gen,
            &m.discriminator.config,
            &disc,
            &ctx,
            schedule,
            cfg.weights,
        )?;
        let (total, seg_loss) = if joint {
            let (_, h, w) = source.image.chw()?;
            let mask = dropout_mask(&[cfg.seg.base_channels, h, w], cfg.seg.dropout_rate, dropout_seed);
            let prob = seg_graph(&m.segmenter.config, &seg, terms.endpoint, Some(&mask));
            let loss = prob.weighted_bce(&source.target, cfg.seg.fg_weight, EPS);
            if !loss.item().is_finite() {
                return Err(Error::numeric("seg"));
            }
            (terms.total.add(loss), Some(loss.item()))
        } else {
            (terms.total, None)
        };
        let mut grads = g.backward(total);
        accumulate(&mut acc[0], gen.grads(&mut grads));
        if joint {
            accumulate(&mut acc[2], seg.grads(&mut grads));
        }
        let out = StepOutput {
            t_index,
            adv: terms.adv.item(),
            sb: terms.sb.item(),
            reg: terms.reg.item(),
            unsb: terms.total.item(),
            seg: seg_loss,
            total: total.item(),
        };
        let fake = terms.endpoint.value();
        drop((gen, disc, seg));

        let gd = Graph::new();
        let disc = m.discriminator.params.bind(&gd, true);
        let d_loss = discriminator_loss(
            &m.discriminator.config,
            &disc,
            &self.data.targets[real_index],
            &fake,
            schedule.time(t_index),
        )?;
        let mut grads = gd.backward(d_loss);
        accumulate(&mut acc[1], disc.grads(&mut grads));
        Ok(out)
    }

    /// Epochs of translation training; `joint` selects end-to-end training.
    fn run_translation(&mut self, joint: bool, optimizers: &mut [Adam<f32>; 3]) -> Result<()> {
        let cfg = self.config;
        let (log_name, stage) = if joint {
            (E2E_LOG, "e2e")
        } else {
            (TRANSLATION_LOG, "translation")
        };
        let log_path = self.out_dir.join(log_name);
        let header: &[&str] = if joint {
            &["step", "epoch", "t_index", "adv", "sb", "reg", "unsb", "seg", "total"]
        } else {
            &["step", "epoch", "t_index", "adv", "sb", "reg", "total"]
        };
        let mut log = LossLog::create(&log_path, header)?;
        let mut step = 0usize;
        for epoch in 1..=cfg.epochs {
            for opt in optimizers.iter_mut() {
                opt.set_lr(cfg.lr_at(epoch, cfg.epochs));
            }
            let mut order: Vec<usize> = (0..self.data.sources.len()).collect();
            order.shuffle(&mut self.rng);
            let mut means = Means::default();
            for batch in order.chunks(cfg.batch_size) {
                let mut acc: [Option<ParamGrads<f32>>; 3] = [None, None, None];
                for &i in batch {
                    let s = self.translation_step(i, joint, &mut acc)?;
                    step += 1;
                    let mut row = vec![step.to_string(), epoch.to_string(), s.t_index.to_string()];
                    row.extend([s.adv, s.sb, s.reg].map(|v| v.to_string()));
                    if let Some(seg) = s.seg {
                        row.extend([s.unsb.to_string(), seg.to_string()]);
                    }
                    row.push(s.total.to_string());
                    log.row(&row)?;
                    means.add([
                        s.adv as f64,
                        s.sb as f64,
                        s.reg as f64,
                        s.unsb as f64,
                        s.seg.unwrap_or(0.0) as f64,
                    ]);
                }
                let [g, d, s] = acc;
                let m = &mut self.models;
                apply(&mut optimizers[0], &mut m.generator.params, g, batch.len());
                apply(&mut optimizers[1], &mut m.discriminator.params, d, batch.len());
                if joint {
                    apply(&mut optimizers[2], &mut m.segmenter.params, s, batch.len());
                }
            }
            self.record.epochs.push(EpochSummary {
                stage: stage.to_string(),
                epoch,
                adv: means.get(0),
                sb: means.get(1),
                reg: means.get(2),
                unsb: means.get(3),
                seg: if joint { means.get(4) } else { None },
            });
            ::log::info!(
                "{stage} epoch {epoch}/{}: unsb {:.4}",
                cfg.epochs,
                means.get(3).unwrap_or(f64::NAN)
            );
            if self.due(epoch, cfg.epochs) {
                let prefix = if joint { "" } else { "stage1_" };
                self.save(format!("{prefix}epoch_{epoch:03}.ckpt"), epoch)?;
            }
        }
        log.finish()?;
        self.record.loss_logs.push(log_path);
        Ok(())
    }

    /// Second stage: translate every training MRI slice with the frozen
    /// generator, then fit the segmenter on the synthetic CTs.
    fn run_segmentation(&mut self) -> Result<()> {
        let cfg = self.config;
        let mut synthetic = Vec::with_capacity(self.data.sources.len());
        for (k, source) in self.data.sources.iter().enumerate() {
            let seed = cfg.seed.wrapping_mul(31).wrapping_add(k as u64);
            let synth = translate(&source.slice, &self.models.generator, &cfg.schedule, seed)?;
            synthetic.push(synth.to_tensor::<f32>());
        }
        self.record.synthetic_slices = Some(synthetic.len());

        let mut opt = Adam::new(cfg.adam(), &self.models.segmenter.params);
        let log_path = self.out_dir.join(SEGMENTATION_LOG);
        let mut log = LossLog::create(&log_path, &["step", "epoch", "seg"])?;
        let epochs = cfg.stage2_epochs();
        let mut step = 0usize;
        for epoch in 1..=epochs {
            opt.set_lr(cfg.lr_at(epoch, epochs));
            let mut order: Vec<usize> = (0..synthetic.len()).collect();
            order.shuffle(&mut self.rng);
            let mut means = Means::default();
            for batch in order.chunks(cfg.batch_size) {
                let mut acc = None;
                for &i in batch {
                    let dropout_seed: u64 = self.rng.gen();
                    let model = &self.models.segmenter;
                    let g = Graph::new();
                    let b = model.params.bind(&g, true);
                    let (_, h, w) = synthetic[i].chw()?;
                    let mask = dropout_mask(&[cfg.seg.base_channels, h, w], cfg.seg.dropout_rate, dropout_seed);
                    let prob = seg_graph(&model.config, &b, g.constant(synthetic[i].clone()), Some(&mask));
                    let loss = prob.weighted_bce(&self.data.sources[i].target, cfg.seg.fg_weight, EPS);
                    if !loss.item().is_finite() {
                        return Err(Error::numeric("seg"));
                    }
                    let mut grads = g.backward(loss);
                    accumulate(&mut acc, b.grads(&mut grads));
                    step += 1;
                    log.row(&[step.to_string(), epoch.to_string(), loss.item().to_string()])?;
                    means.add([0.0, 0.0, 0.0, 0.0, loss.item() as f64]);
                }
                apply(&mut opt, &mut self.models.segmenter.params, acc, batch.len());
            }
            self.record.epochs.push(EpochSummary {
                stage: "segmentation".to_string(),
                epoch,
                adv: None,
                sb: None,
                reg: None,
                unsb: None,
                seg: means.get(4),
            });
            ::log::info!(
                "segmentation epoch {epoch}/{epochs}: seg {:.4}",
                means.get(4).unwrap_or(f64::NAN)
            );
            if self.due(epoch, epochs) {
                self.save(format!("epoch_{epoch:03}.ckpt"), epoch)?;
            }
        }
        log.finish()?;
        self.record.loss_logs.push(log_path);
        Ok(())
    }

    fn optimizers(&self) -> [Adam<f32>; 3] {
        let adam = self.config.adam();
        [
            Adam::new(adam, &self.models.generator.params),
            Adam::new(adam, &self.models.discriminator.params),
            Adam::new(adam, &self.models.segmenter.params),
        ]
    }

    fn finish(mut self, started: Instant) -> Result<ExperimentRecord> {
        self.record.wall_clock_s = started.elapsed().as_secs_f64();
        let path = self.out_dir.join(RECORD_FILE);
        let json = serde_json::to_string_pretty(&self.record).map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(self.record)
    }
}

/// Joint training: the segmentation loss on each predicted endpoint is added
/// to the translation loss and back-propagated through both networks.
pub fn train_e2e(dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<ExperimentRecord> {
    let started = Instant::now();
    let mut trainer = Trainer::new(dataset, config, out_dir)?;
    let mut optimizers = trainer.optimizers();
    trainer.run_translation(true, &mut optimizers)?;
    trainer.finish(started)
}

/// Translation to completion, then segmentation on synthetic CTs from the
/// frozen generator, each stage with its own optimizers.
pub fn train_two_stage(dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<ExperimentRecord> {
    let started = Instant::now();
    let mut trainer = Trainer::new(dataset, config, out_dir)?;
    let mut optimizers = trainer.optimizers();
    trainer.run_translation(false, &mut optimizers)?;
    trainer.run_segmentation()?;
    trainer.finish(started)
}

/// Dispatches on `config.mode`.
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<ExperimentRecord> {
    match config.mode {
        TrainMode::E2E => train_e2e(dataset, config, out_dir),
        TrainMode::TwoStage => train_two_stage(dataset, config, out_dir),
    }
}

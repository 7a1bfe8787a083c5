use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge;
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{ensure_arg, Error, Result};
use crate::eval::metrics::{dice, dice3d, iou, mse, ssim, SsimConfig};
use crate::eval::stats::{mean_std, paired_ttest, pearson, spearman, MeanStd, TTest};
use crate::image::{Domain, ImageSlice, LabelMask};
use crate::seg::{mc_predict, slice_uncertainty, PredictionBundle, DEFAULT_THRESHOLD};

/// Source of segmentations and translations under evaluation.
pub trait Predictor: Sync {
    fn segment(&self, slice: &ImageSlice, seed: u64) -> Result<PredictionBundle>;
    fn translate(&self, slice: &ImageSlice, seed: u64) -> Result<ImageSlice>;

    fn threshold(&self) -> f32 {
        DEFAULT_THRESHOLD
    }

    /// Stochastic passes per segmentation.
    fn passes(&self) -> usize {
        1
    }
}

/// A trained checkpoint: MC-dropout segmentation and bridge translation.
pub struct ModelPredictor<'a> {
    pub checkpoint: &'a Checkpoint,
    pub passes: usize,
    pub dropout_rate: f64,
    pub threshold: f32,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(checkpoint: &'a Checkpoint, passes: usize) -> Self {
        Self {
            checkpoint,
            passes,
            dropout_rate: checkpoint.segmenter.config.dropout_rate,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn segment(&self, slice: &ImageSlice, seed: u64) -> Result<PredictionBundle> {
        let mut b = mc_predict(
            &slice.pixels,
            &self.checkpoint.segmenter,
            self.passes,
            self.dropout_rate,
            self.threshold,
            seed,
        )?;
        b.mask.subject_id = slice.subject_id.clone();
        b.mask.slice_index = slice.slice_index;
        Ok(b)
    }

    fn threshold(&self) -> f32 {
        self.threshold
    }

    fn passes(&self) -> usize {
        self.passes
    }

    fn translate(&self, slice: &ImageSlice, seed: u64) -> Result<ImageSlice> {
        bridge::translate(
            slice,
            &self.checkpoint.generator,
            &self.checkpoint.config.schedule,
            seed,
        )
    }
}

type Key = (String, usize);

/// Returns the reference masks as predictions and the paired real CT as the
/// translation.
pub struct OraclePredictor {
    masks: HashMap<Key, LabelMask>,
    ct: HashMap<Key, Array2<f32>>,
}

impl OraclePredictor {
    pub fn from_dataset(test: &Dataset) -> Self {
        let mut masks = HashMap::new();
        let mut ct = HashMap::new();
        for (s, m) in test.slices.iter().zip(&test.masks) {
            if s.domain == Domain::Ct {
                let key = (s.subject_id.clone(), s.slice_index);
                if let Some(m) = m {
                    masks.insert(key.clone(), m.clone());
                }
                ct.insert(key, s.pixels.clone());
            }
        }
        Self { masks, ct }
    }
}

fn key_of(s: &ImageSlice) -> Key {
    (s.subject_id.clone(), s.slice_index)
}

impl Predictor for OraclePredictor {
    fn segment(&self, slice: &ImageSlice, _seed: u64) -> Result<PredictionBundle> {
        let mask = self.masks.get(&key_of(slice)).ok_or_else(|| {
            Error::Argument(format!(
                "oracle has no mask for {} slice {}",
                slice.subject_id, slice.slice_index
            ))
        })?;
        let prob = mask.pixels.mapv(f32::from);
        Ok(PredictionBundle {
            variance: Array2::zeros(prob.dim()),
            mask: mask.clone(),
            passes: 1,
            pass_maps: vec![prob.clone()],
            mean_prob: prob,
        })
    }

    fn translate(&self, slice: &ImageSlice, _seed: u64) -> Result<ImageSlice> {
        let ct = self.ct.get(&key_of(slice)).ok_or_else(|| {
            Error::Argument(format!(
                "oracle has no CT for {} slice {}",
                slice.subject_id, slice.slice_index
            ))
        })?;
        let mut out = slice.with_pixels(ct.clone(), Domain::SynthCt);
        out.value_range = (-1.0, 1.0);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalOptions {
    pub seed: u64,
    pub ssim: SsimConfig,
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub subject_id: String,
    pub slice_index: usize,
    pub dsc: f64,
    pub iou: f64,
    pub mse: f64,
    pub ssim: f64,
    pub uncertainty: f64,
}

impl MetricsRecord {
    pub fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("dsc", self.dsc),
            ("iou", self.iou),
            ("mse", self.mse),
            ("ssim", self.ssim),
            ("uncertainty", self.uncertainty),
        ]
    }
}

/// Per-slice images kept for the heatmap report.
#[derive(Clone, Debug)]
pub struct SliceMaps {
    pub ct: Array2<f32>,
    pub synthetic_ct: Array2<f32>,
    pub mean_prob: Array2<f32>,
    pub variance: Array2<f32>,
    pub reference: LabelMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// Slices entering the correlation.
    pub slices: usize,
    /// Slices dropped because both reference and prediction were empty.
    pub excluded: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub empty_masks: String,
    pub std: String,
    pub ssim: SsimConfig,
    pub ssim_range: String,
    pub uncertainty: String,
    pub passes: usize,
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub slices: usize,
    pub subjects: usize,
    pub dsc: MeanStd,
    pub iou: MeanStd,
    pub mse: MeanStd,
    pub ssim: MeanStd,
    pub uncertainty: MeanStd,
    pub dsc3d: MeanStd,
    pub dsc3d_per_subject: BTreeMap<String, f64>,
    pub dsc_uncertainty: Correlation,
    pub conventions: Conventions,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub records: Vec<MetricsRecord>,
    /// Per record: uncertainty fell back to 0 over an empty union.
    pub degenerate: Vec<bool>,
    pub maps: Vec<SliceMaps>,
    pub summary: Summary,
}

impl Evaluation {
    /// Name of the first metric holding a NaN, if any.
    pub fn first_nan(&self) -> Option<String> {
        self.records.iter().find_map(|r| {
            r.values()
                .into_iter()
                .find(|(_, v)| v.is_nan())
                .map(|(name, _)| format!("metrics.{name}[{} slice {}]", r.subject_id, r.slice_index))
        })
    }
}

/// Seed for slice `i`; `stream` 0 drives segmentation, 1 translation.
pub fn slice_seed(seed: u64, i: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((i as u64) << 1) | stream)
}

/// Segments every real CT test slice, translates its paired MRI slice and
/// scores both against the references.
pub fn evaluate(predictor: &dyn Predictor, test: &Dataset, options: &EvalOptions) -> Result<Evaluation> {
    let mri: HashMap<Key, &ImageSlice> = test
        .slices
        .iter()
        .filter(|s| s.domain == Domain::Mri)
        .map(|s| (key_of(s), s))
        .collect();
    let mut cases = Vec::new();
    for (s, m) in test.slices.iter().zip(&test.masks) {
        if s.domain != Domain::Ct {
            continue;
        }
        let reference = m.as_ref().ok_or_else(|| {
            Error::Contract(format!(
                "reference mask missing for CT slice {} of {}",
                s.slice_index, s.subject_id
            ))
        })?;
        let source = mri.get(&key_of(s)).ok_or_else(|| {
            Error::Contract(format!(
                "no paired MRI slice for CT slice {} of {}",
                s.slice_index, s.subject_id
            ))
        })?;
        cases.push((s, reference, *source));
    }
    ensure_arg!(!cases.is_empty(), "test set holds no CT slices");

    let rows: Vec<(MetricsRecord, bool, SliceMaps, LabelMask)> = cases
        .par_iter()
        .enumerate()
        .map(|(i, &(ct, reference, source))| {
            let bundle = predictor.segment(ct, slice_seed(options.seed, i, 0))?;
            let synth = predictor.translate(source, slice_seed(options.seed, i, 1))?;
            let u = slice_uncertainty(&bundle, Some(reference));
            let record = MetricsRecord {
                subject_id: ct.subject_id.clone(),
                slice_index: ct.slice_index,
                dsc: dice(&bundle.mask, reference)?,
                iou: iou(&bundle.mask, reference)?,
                mse: mse(&synth.pixels, &ct.pixels)?,
                ssim: ssim(&synth.pixels, &ct.pixels, &options.ssim)?,
                uncertainty: u.value,
            };
            let maps = SliceMaps {
                ct: ct.pixels.clone(),
                synthetic_ct: synth.pixels,
                mean_prob: bundle.mean_prob,
                variance: bundle.variance,
                reference: reference.clone(),
            };
            Ok((record, u.degenerate, maps, bundle.mask))
        })
        .collect::<Result<_>>()?;

    let mut volumes: BTreeMap<String, (Vec<LabelMask>, Vec<LabelMask>)> = BTreeMap::new();
    for (r, _, m, pred) in &rows {
        let v = volumes.entry(r.subject_id.clone()).or_default();
        v.0.push(pred.clone());
        v.1.push(m.reference.clone());
    }
    let dsc3d_per_subject = volumes
        .iter()
        .map(|(s, (p, r))| Ok((s.clone(), dice3d(p, r)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let mut records = Vec::with_capacity(rows.len());
    let mut degenerate = Vec::with_capacity(rows.len());
    let mut maps = Vec::with_capacity(rows.len());
    for (r, d, m, _) in rows {
        records.push(r);
        degenerate.push(d);
        maps.push(m);
    }
    let summary = summarize(
        &records,
        &degenerate,
        dsc3d_per_subject,
        options,
        predictor.passes(),
        predictor.threshold(),
    )?;
    Ok(Evaluation {
        records,
        degenerate,
        maps,
        summary,
    })
}

fn column(records: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> f64) -> Vec<f64> {
    records.iter().map(f).collect()
}

pub fn summarize(
    records: &[MetricsRecord],
    degenerate: &[bool],
    dsc3d_per_subject: BTreeMap<String, f64>,
    options: &EvalOptions,
    passes: usize,
    threshold: f32,
) -> Result<Summary> {
    ensure_arg!(records.len() == degenerate.len(), "record and flag counts differ");
    let kept: Vec<&MetricsRecord> = records
        .iter()
        .zip(degenerate)
        .filter(|(_, &d)| !d)
        .map(|(r, _)| r)
        .collect();
    let dsc: Vec<f64> = kept.iter().map(|r| r.dsc).collect();
    let unc: Vec<f64> = kept.iter().map(|r| r.uncertainty).collect();
    let mut notes = Vec::new();
    let mut corr = |f: fn(&[f64], &[f64]) -> Result<f64>, name: &str| match f(&dsc, &unc) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("{name}: {e}"));
            None
        }
    };
    let pearson_r = corr(pearson, "pearson");
    let spearman_r = corr(spearman, "spearman");
    let per_subject: Vec<f64> = dsc3d_per_subject.values().copied().collect();
    Ok(Summary {
        slices: records.len(),
        subjects: dsc3d_per_subject.len(),
        dsc: mean_std(&column(records, |r| r.dsc))?,
        iou: mean_std(&column(records, |r| r.iou))?,
        mse: mean_std(&column(records, |r| r.mse))?,
        ssim: mean_std(&column(records, |r| r.ssim))?,
        uncertainty: mean_std(&column(records, |r| r.uncertainty))?,
        dsc3d: mean_std(&per_subject)?,
        dsc3d_per_subject,
        dsc_uncertainty: Correlation {
            slices: kept.len(),
            excluded: records.len() - kept.len(),
            pearson: pearson_r,
            spearman: spearman_r,
            note: (!notes.is_empty()).then(|| notes.join("; ")),
        },
        conventions: Conventions {
            empty_masks: "DSC = IoU = 1 when prediction and reference are both empty".into(),
            std: "sample standard deviation (n - 1)".into(),
            ssim: options.ssim,
            ssim_range: "images rescaled from [-1, 1] to [0, 1]; valid Gaussian windows only".into(),
            uncertainty: "mean MC-dropout variance over the union of predicted and reference foreground; slices with an empty union are excluded from correlations".into(),
            passes,
            threshold,
        },
    })
}

/// Paired comparison of one metric between two evaluations of the same
/// test slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub pairs: usize,
    pub test: Option<TTest>,
    pub note: Option<String>,
}

pub fn metric_value(r: &MetricsRecord, metric: &str) -> Result<f64> {
    r.values()
        .into_iter()
        .find(|(n, _)| *n == metric)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Argument(format!("unknown metric `{metric}`")))
}

pub fn compare(
    (name_a, a): (&str, &[MetricsRecord]),
    (name_b, b): (&str, &[MetricsRecord]),
    metric: &str,
) -> Result<Comparison> {
    let lookup: HashMap<Key, &MetricsRecord> = b.iter().map(|r| ((r.subject_id.clone(), r.slice_index), r)).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for r in a {
        let other = lookup.get(&(r.subject_id.clone(), r.slice_index)).ok_or_else(|| {
            Error::Argument(format!(
                "{name_b} has no record for {} slice {}",
                r.subject_id, r.slice_index
            ))
        })?;
        xs.push(metric_value(r, metric)?);
        ys.push(metric_value(other, metric)?);
    }
    ensure_arg!(xs.len() == b.len(), "{name_a} and {name_b} cover different slices");
    let (test, note) = match paired_ttest(&xs, &ys) {
        Ok(t) => (Some(t), None),
        Err(e @ Error::Degenerate(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(Comparison {
        a: name_a.into(),
        b: name_b.into(),
        metric: metric.into(),
        mean_a: mean_std(&xs)?.mean,
        mean_b: mean_std(&ys)?.mean,
        pairs: xs.len(),
        test,
        note,
    })
}

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_image, Dataset};
use crate::error::{Error, Result};
use crate::eval::experiment::{evaluate, EvalOptions, Evaluation, MetricsRecord, Predictor};
use crate::fusion::boundary_pixels;
use crate::image::LabelMask;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HISTOGRAM_FILE: &str = "dsc_histogram.png";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const VARIANCE_DIR: &str = "uncertainty";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPaths {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub histogram: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub variance_maps: Vec<PathBuf>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Writes the table, summary, DSC histogram and per-slice uncertainty maps.
pub fn write_report(ev: &Evaluation, out_dir: &Path) -> Result<ReportPaths> {
    create_dir(out_dir)?;
    let metrics = out_dir.join(METRICS_FILE);
    write_metrics(&ev.records, &metrics)?;
    let summary = out_dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&ev.summary).map_err(|e| Error::format(&summary, e.to_string()))?;
    fs::write(&summary, json).map_err(|e| Error::io(&summary, e))?;

    let histogram = out_dir.join(HISTOGRAM_FILE);
    let dsc: Vec<f64> = ev.records.iter().map(|r| r.dsc).collect();
    save_png(&histogram_image(&dsc, 10), &histogram)?;

    let heat_dir = out_dir.join(HEATMAP_DIR);
    let var_dir = out_dir.join(VARIANCE_DIR);
    create_dir(&heat_dir)?;
    create_dir(&var_dir)?;
    // shared colour scale so heatmaps are comparable across slices
    let vmax = ev
        .maps
        .iter()
        .flat_map(|m| m.variance.iter())
        .fold(0.0f32, |a, &v| a.max(v));
    let mut heatmaps = Vec::new();
    let mut variance_maps = Vec::new();
    for (r, m) in ev.records.iter().zip(&ev.maps) {
        let stem = format!("{}_{}", r.subject_id, r.slice_index);
        let raster = var_dir.join(format!("{stem}_variance.f32"));
        write_image(&raster, &m.variance)?;
        variance_maps.push(raster);
        let panels = [
            grey_panel(&m.ct),
            grey_panel(&m.synthetic_ct),
            outlined(grey_panel(&m.mean_prob.mapv(|p| 2.0 * p - 1.0)), &m.reference),
            outlined(heat_panel(&m.variance, vmax), &m.reference),
        ];
        let png = heat_dir.join(format!("{stem}.png"));
        save_png(&side_by_side(&panels), &png)?;
        heatmaps.push(png);
    }
    Ok(ReportPaths {
        metrics,
        summary,
        histogram,
        heatmaps,
        variance_maps,
    })
}

/// Evaluates and writes the report; any NaN metric is a numeric error after
/// the report is on disk.
pub fn evaluate_experiment(
    predictor: &dyn Predictor,
    test: &Dataset,
    options: &EvalOptions,
    out_dir: &Path,
) -> Result<(Evaluation, ReportPaths)> {
    let ev = evaluate(predictor, test, options)?;
    let paths = write_report(&ev, out_dir)?;
    if let Some(component) = ev.first_nan() {
        return Err(Error::Numeric { component });
    }
    Ok((ev, paths))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn grey_panel(x: &Array2<f32>) -> RgbImage {
    let (h, w) = x.dim();
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let g = to_u8((x[[r as usize, c as usize]] + 1.0) / 2.0);
        Rgb([g, g, g])
    })
}

/// Black → red → yellow → white.
fn heat(v: f32) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0) * 3.0;
    Rgb([to_u8(v), to_u8(v - 1.0), to_u8(v - 2.0)])
}

fn heat_panel(x: &Array2<f32>, vmax: f32) -> RgbImage {
    let (h, w) = x.dim();
    let scale = if vmax > 0.0 { 1.0 / vmax } else { 0.0 };
    RgbImage::from_fn(w as u32, h as u32, |c, r| heat(x[[r as usize, c as usize]] * scale))
}

fn outlined(mut img: RgbImage, mask: &LabelMask) -> RgbImage {
    for (r, c) in boundary_pixels(mask) {
        if mask.pixels[[r, c]] == 1 {
            img.put_pixel(c as u32, r as u32, Rgb([0, 200, 255]));
        }
    }
    img
}

fn side_by_side(panels: &[RgbImage]) -> RgbImage {
    let gap = 2;
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width()).sum::<u32>() + gap * (panels.len() as u32).saturating_sub(1);
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + gap;
    }
    out
}

/// Bar chart of values in `[0, 1]`.
fn histogram_image(values: &[f64], bins: usize) -> RgbImage {
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v.is_finite() {
            let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let (bar, height, pad) = (24u32, 160u32, 8u32);
    let width = bins as u32 * bar + 2 * pad;
    let mut img = RgbImage::from_pixel(width, height + 2 * pad, Rgb([255, 255, 255]));
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    for (i, &n) in counts.iter().enumerate() {
        let bh = (n as f64 / peak as f64 * height as f64).round() as u32;
        let x0 = pad + i as u32 * bar;
        for x in x0 + 1..x0 + bar - 1 {
            for y in (pad + height - bh)..(pad + height) {
                img.put_pixel(x, y, Rgb([40, 80, 160]));
            }
        }
    }
    for x in pad..width - pad {
        img.put_pixel(x, pad + height, Rgb([0, 0, 0]));
    }
    img
}

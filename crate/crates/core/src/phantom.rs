//! Deterministic two-domain head phantoms with exact ventricle masks.
//!
//! Every subject gets one anatomy (head ellipse, skull and scalp rings,
//! cortex band and two tilted lateral-ventricle ellipses) that is rendered
//! twice: as a T1-like MRI with strong soft-tissue contrast and as a CT in
//! Hounsfield units with a bright skull, weak soft-tissue contrast and
//! heavier noise. CT renders go through the same HU window and
//! normalization as clinical scans.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::dataset::{Dataset, DatasetManifest, ManifestEntry, Split};
use crate::error::{ensure_arg, Result};
use crate::image::{Domain, ImageSlice, LabelMask};

/// CT window used for all CT-domain slices, in HU.
pub const HU_WINDOW: (f32, f32) = (-10.0, 500.0);
/// Raw MRI intensities live in `[0, MRI_RAW_MAX]` before normalization.
pub const MRI_RAW_MAX: f32 = 1000.0;

/// Clamps raw HU values to `[lo, hi]`.
pub fn hu_window(raw: &Array2<f32>, lo: f32, hi: f32) -> Result<Array2<f32>> {
    ensure_arg!(lo < hi, "window lower bound {lo} must be below upper bound {hi}");
    Ok(raw.mapv(|v| v.clamp(lo, hi)))
}

/// Affine map of `[lo, hi]` onto `[-1, 1]`. Input must already lie in the
/// window (see [`hu_window`]).
pub fn normalize(raw: &Array2<f32>, lo: f32, hi: f32) -> Result<Array2<f32>> {
    ensure_arg!(lo < hi, "normalization bounds must satisfy lo < hi, got ({lo}, {hi})");
    let (lo, hi) = (lo as f64, hi as f64);
    Ok(raw.mapv(|v| (2.0 * (v as f64 - lo) / (hi - lo) - 1.0) as f32))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tissue {
    Air,
    Scalp,
    Skull,
    Gray,
    White,
    Csf,
}

impl Tissue {
    /// T1-like intensity in normalized units.
    fn mri(self) -> f64 {
        match self {
            Tissue::Air => -1.0,
            Tissue::Scalp => 0.5,
            Tissue::Skull => -0.75,
            Tissue::Gray => 0.05,
            Tissue::White => 0.35,
            Tissue::Csf => -0.55,
        }
    }

    fn hu(self) -> f64 {
        match self {
            Tissue::Air => -1000.0,
            Tissue::Scalp => 40.0,
            Tissue::Skull => 1000.0,
            Tissue::Gray => 55.0,
            Tissue::White => 45.0,
            Tissue::Csf => -12.0,
        }
    }
}

/// Generator arguments. `first_subject` offsets subject numbering so that
/// train and test cohorts drawn with one seed never share an anatomy.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    pub size: usize,
    pub first_subject: usize,
    pub mri_noise: f64,
    pub ct_noise_hu: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, n_subjects: usize, slices_per_subject: usize, size: usize) -> Self {
        Self {
            seed,
            n_subjects,
            slices_per_subject,
            size,
            first_subject: 0,
            mri_noise: 0.03,
            ct_noise_hu: 10.0,
        }
    }

    pub fn with_first_subject(mut self, first: usize) -> Self {
        self.first_subject = first;
        self
    }

    fn validate(&self) -> Result<()> {
        ensure_arg!(self.n_subjects >= 1, "n_subjects must be >= 1");
        ensure_arg!(self.slices_per_subject >= 1, "slices_per_subject must be >= 1");
        ensure_arg!(self.size >= 32, "slice size must be >= 32, got {}", self.size);
        ensure_arg!(
            self.mri_noise >= 0.0 && self.ct_noise_hu >= 0.0,
            "noise levels must be non-negative"
        );
        Ok(())
    }

    pub fn params(&self) -> BTreeMap<String, serde_json::Value> {
        BTreeMap::from([
            ("size".to_string(), json!(self.size)),
            ("n_subjects".to_string(), json!(self.n_subjects)),
            ("slices_per_subject".to_string(), json!(self.slices_per_subject)),
            ("first_subject".to_string(), json!(self.first_subject)),
            ("mri_noise".to_string(), json!(self.mri_noise)),
            ("ct_noise_hu".to_string(), json!(self.ct_noise_hu)),
            ("hu_window".to_string(), json!([HU_WINDOW.0, HU_WINDOW.1])),
        ])
    }

    pub fn subject_id(&self, i: usize) -> String {
        format!("sub{:03}", self.first_subject + i)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    tilt: f64,
}

impl Ellipse {
    /// Normalized elliptical radius; `<= 1` inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.tilt.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.ax).powi(2) + (v / self.ay).powi(2)).sqrt()
    }

    fn area(&self) -> f64 {
        PI * self.ax * self.ay
    }
}

/// Per-subject anatomy drawn once from the subject's random stream.
#[derive(Clone, Debug)]
pub struct SubjectAnatomy {
    size: f64,
    center: (f64, f64),
    head_axes: (f64, f64),
    tilt: f64,
    enlargement: f64,
    vent_offset: f64,
    vent_dy: f64,
    vent_tilt: f64,
    bias: (f64, f64, f64),
}

const SCALP_FRAC: f64 = 0.05;
const SKULL_FRAC: f64 = 0.09;
const CORTEX_START: f64 = 0.85;

impl SubjectAnatomy {
    fn sample(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        Self {
            size: s,
            center: (
                s / 2.0 + rng.gen_range(-1.0..1.0) * 0.02 * s,
                s / 2.0 + rng.gen_range(-1.0..1.0) * 0.02 * s,
            ),
            head_axes: (
                0.40 * s * rng.gen_range(0.95..1.05),
                0.46 * s * rng.gen_range(0.95..1.05),
            ),
            tilt: rng.gen_range(-0.08..0.08),
            enlargement: rng.gen_range(0.85..1.3),
            vent_offset: 0.11 * s * rng.gen_range(0.9..1.1),
            vent_dy: rng.gen_range(-0.03..0.03) * s,
            vent_tilt: rng.gen_range(0.1..0.3),
            bias: (
                rng.gen_range(-1.0..1.0) * 2.0 * PI / s,
                rng.gen_range(-1.0..1.0) * 2.0 * PI / s,
                rng.gen_range(0.0..2.0 * PI),
            ),
        }
    }

    /// Geometry of the slice at relative height `z ∈ [-0.5, 0.5]`.
    pub fn slice(&self, z: f64) -> SliceGeometry {
        let s = self.size;
        let head_scale = (1.0 - 0.5 * z * z).sqrt();
        let head = Ellipse {
            cx: self.center.0,
            cy: self.center.1,
            ax: self.head_axes.0 * head_scale,
            ay: self.head_axes.1 * head_scale,
            tilt: self.tilt,
        };
        let (vx, vy) = (
            0.07 * s * self.enlargement * (1.0 - 0.5 * z * z),
            0.17 * s * self.enlargement * (1.0 - 0.9 * z * z),
        );
        let (st, ct) = self.tilt.sin_cos();
        let dy = self.vent_dy + 0.04 * s * z;
        let place = |side: f64| {
            let (lx, ly) = (side * self.vent_offset, dy);
            Ellipse {
                cx: self.center.0 + ct * lx - st * ly,
                cy: self.center.1 + st * lx + ct * ly,
                ax: vx,
                ay: vy,
                tilt: self.tilt - side * self.vent_tilt,
            }
        };
        SliceGeometry {
            head,
            ventricles: [place(-1.0), place(1.0)],
        }
    }

    fn bias_at(&self, x: f64, y: f64) -> f64 {
        1.0 + 0.05 * (self.bias.0 * x + self.bias.1 * y + self.bias.2).cos()
    }
}

/// Shapes of one rendered slice.
#[derive(Clone, Copy, Debug)]
pub struct SliceGeometry {
    head: Ellipse,
    ventricles: [Ellipse; 2],
}

impl SliceGeometry {
    pub fn tissue(&self, x: f64, y: f64) -> Tissue {
        let r = self.head.radius(x, y);
        if r > 1.0 {
            return Tissue::Air;
        }
        if r > 1.0 - SCALP_FRAC {
            return Tissue::Scalp;
        }
        if r > 1.0 - SCALP_FRAC - SKULL_FRAC {
            return Tissue::Skull;
        }
        if self.ventricles.iter().any(|v| v.radius(x, y) <= 1.0) {
            return Tissue::Csf;
        }
        if r / (1.0 - SCALP_FRAC - SKULL_FRAC) > CORTEX_START {
            Tissue::Gray
        } else {
            Tissue::White
        }
    }

    /// Continuous area of the two ventricle ellipses, ignoring overlap.
    pub fn ventricle_area(&self) -> f64 {
        self.ventricles.iter().map(Ellipse::area).sum()
    }
}

fn slice_height(k: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        k as f64 / (n - 1) as f64 - 0.5
    }
}

/// Anatomy of subject `i` under `spec`, for inspecting generator geometry.
pub fn subject_anatomy(spec: &PhantomSpec, i: usize) -> SubjectAnatomy {
    SubjectAnatomy::sample(spec.size, &mut subject_rng(spec, i))
}

fn subject_rng(spec: &PhantomSpec, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((spec.first_subject + i) as u64);
    rng
}

/// Renders every subject in both domains with a shared exact mask. The
/// result is a paired (TEST-style) dataset; use
/// [`Dataset::into_unpaired_train`] for a training cohort.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.size;
    let mut manifest = DatasetManifest {
        seed: spec.seed,
        split: Split::Test,
        generator_params: spec.params(),
        entries: Vec::new(),
    };
    let mut slices = Vec::new();
    let mut masks = Vec::new();
    for i in 0..spec.n_subjects {
        let mut rng = subject_rng(spec, i);
        let anatomy = SubjectAnatomy::sample(n, &mut rng);
        let subject = spec.subject_id(i);
        for k in 0..spec.slices_per_subject {
            let geom = anatomy.slice(slice_height(k, spec.slices_per_subject));
            let mut mask = Array2::<u8>::zeros((n, n));
            let mut mri_raw = Array2::<f32>::zeros((n, n));
            let mut ct_raw = Array2::<f32>::zeros((n, n));
            for y in 0..n {
                for x in 0..n {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let tissue = geom.tissue(px, py);
                    mask[[y, x]] = u8::from(tissue == Tissue::Csf);
                    let e_mri: f64 = rng.sample(StandardNormal);
                    let e_ct: f64 = rng.sample(StandardNormal);
                    let half = MRI_RAW_MAX as f64 / 2.0;
                    let mri = half * (1.0 + tissue.mri()) * anatomy.bias_at(px, py) + half * spec.mri_noise * e_mri;
                    mri_raw[[y, x]] = mri.clamp(0.0, MRI_RAW_MAX as f64) as f32;
                    ct_raw[[y, x]] = (tissue.hu() + spec.ct_noise_hu * e_ct) as f32;
                }
            }
            let mri = normalize(&mri_raw, 0.0, MRI_RAW_MAX)?;
            let ct = normalize(&hu_window(&ct_raw, HU_WINDOW.0, HU_WINDOW.1)?, HU_WINDOW.0, HU_WINDOW.1)?;
            let mask = LabelMask::new(mask, subject.clone(), k)?;
            for (domain, pixels) in [(Domain::Mri, mri), (Domain::Ct, ct)] {
                manifest.entries.push(ManifestEntry::new(&subject, k, domain, true));
                slices.push(ImageSlice {
                    pixels,
                    domain,
                    subject_id: subject.clone(),
                    slice_index: k,
                    value_range: (-1.0, 1.0),
                });
                masks.push(Some(mask.clone()));
            }
        }
    }
    Dataset::new(manifest, slices, masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_bounds() {
        let raw = Array2::from_shape_vec((1, 3), vec![600.0, -50.0, 100.0]).unwrap();
        let w = hu_window(&raw, -10.0, 500.0).unwrap();
        assert_eq!(w.as_slice().unwrap(), &[500.0, -10.0, 100.0]);
        assert!(hu_window(&raw, 5.0, 5.0).is_err());
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let (lo, hi) = HU_WINDOW;
        let raw = Array2::from_shape_vec((1, 3), vec![lo, hi, (lo + hi) / 2.0]).unwrap();
        let n = normalize(&raw, lo, hi).unwrap();
        assert_eq!(n.as_slice().unwrap(), &[-1.0, 1.0, 0.0]);
        assert!(normalize(&raw, hi, lo).is_err());
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_phantoms(&PhantomSpec::new(1, 0, 1, 64)).is_err());
        assert!(generate_phantoms(&PhantomSpec::new(1, 1, 0, 64)).is_err());
        assert!(generate_phantoms(&PhantomSpec::new(1, 1, 1, 16)).is_err());
    }

    #[test]
    fn single_subject_layout_and_mask_area() {
        let spec = PhantomSpec::new(1, 1, 1, 64);
        let ds = generate_phantoms(&spec).unwrap();
        let domains: Vec<Domain> = ds.slices.iter().map(|s| s.domain).collect();
        assert_eq!(domains, vec![Domain::Mri, Domain::Ct]);
        let mask = ds.masks[0].as_ref().unwrap();
        assert_eq!(ds.masks[1].as_ref(), Some(mask));
        let area = mask.area() as f64;
        assert!(area > 0.0 && area < 0.25 * 64.0 * 64.0);
        // pixel-centre rasterization stays close to the continuous ellipse area
        let expected = subject_anatomy(&spec, 0).slice(0.0).ventricle_area();
        assert!((area - expected).abs() / expected < 0.1, "{area} vs {expected}");
    }

    #[test]
    fn deterministic_and_in_range() {
        let spec = PhantomSpec::new(7, 2, 3, 64);
        let a = generate_phantoms(&spec).unwrap();
        let b = generate_phantoms(&spec).unwrap();
        assert_eq!(a.slices, b.slices);
        assert_eq!(a.masks, b.masks);
        for s in &a.slices {
            assert!(s.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for m in a.masks.iter().flatten() {
            assert!(m.pixels.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn ct_soft_tissue_contrast_is_compressed() {
        let ds = generate_phantoms(&PhantomSpec::new(3, 1, 1, 64)).unwrap();
        let mask = ds.masks[0].as_ref().unwrap();
        let contrast = |s: &ImageSlice| {
            let (mut fg, mut nf) = (0.0, 0.0);
            for (v, &m) in s.pixels.iter().zip(mask.pixels.iter()) {
                if m == 1 {
                    fg += *v as f64;
                    nf += 1.0;
                }
            }
            fg / nf
        };
        let white = |t: Tissue| (t.mri(), 2.0 * (t.hu() + 10.0) / 510.0 - 1.0);
        let (wm_mri, wm_ct) = white(Tissue::White);
        let ratio = (wm_ct - contrast(&ds.slices[1])) / (wm_mri - contrast(&ds.slices[0]));
        assert!((0.15..0.35).contains(&ratio), "contrast ratio {ratio}");
    }
}

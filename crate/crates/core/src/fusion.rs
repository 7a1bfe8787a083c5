//! Silver reference masks by majority voting over perturbed atlas masks.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_arg, Result};
use crate::image::LabelMask;

/// Default number of perturbed atlases per subject.
pub const DEFAULT_ATLASES: usize = 5;
/// Default boundary perturbation magnitude.
pub const DEFAULT_MAGNITUDE: f64 = 0.3;

/// Pixels whose value differs from at least one 4-neighbour, row-major.
pub fn boundary_pixels(mask: &LabelMask) -> Vec<(usize, usize)> {
    let p = &mask.pixels;
    let (h, w) = p.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = p[[y, x]];
            let differs = (y > 0 && p[[y - 1, x]] != v)
                || (y + 1 < h && p[[y + 1, x]] != v)
                || (x > 0 && p[[y, x - 1]] != v)
                || (x + 1 < w && p[[y, x + 1]] != v);
            if differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// Flips `floor(magnitude * boundary length)` boundary pixels chosen by `seed`.
/// Stands in for imperfect atlas registration.
pub fn perturb_mask(mask: &LabelMask, seed: u64, magnitude: f64) -> Result<LabelMask> {
    ensure_arg!(
        (0.0..=1.0).contains(&magnitude),
        "perturbation magnitude must lie in [0, 1], got {magnitude}"
    );
    let boundary = boundary_pixels(mask);
    let n_flips = (magnitude * boundary.len() as f64).floor() as usize;
    let mut out = mask.clone();
    if n_flips == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, boundary.len(), n_flips) {
        let (y, x) = boundary[i];
        out.pixels[[y, x]] ^= 1;
    }
    Ok(out)
}

/// K masks of one slice, one per atlas.
#[derive(Clone, Debug)]
pub struct AtlasVoteSet {
    masks: Vec<LabelMask>,
    source_ids: Vec<String>,
}

impl AtlasVoteSet {
    pub fn new(masks: Vec<LabelMask>, source_ids: Vec<String>) -> Result<Self> {
        ensure_arg!(!masks.is_empty(), "a vote set needs at least one mask");
        ensure_arg!(
            masks.len() == source_ids.len(),
            "{} masks but {} source ids",
            masks.len(),
            source_ids.len()
        );
        let shape = masks[0].shape();
        for (m, id) in masks.iter().zip(&source_ids) {
            ensure_arg!(
                m.shape() == shape,
                "mask from `{id}` has shape {:?}, expected {shape:?}",
                m.shape()
            );
        }
        Ok(Self { masks, source_ids })
    }

    pub fn masks(&self) -> &[LabelMask] {
        &self.masks
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    fn counts(&self) -> Array2<usize> {
        let mut counts = Array2::<usize>::zeros(self.masks[0].shape());
        for m in &self.masks {
            counts.zip_mut_with(&m.pixels, |c, &v| *c += v as usize);
        }
        counts
    }

    /// Fraction of atlases voting foreground at each pixel.
    pub fn vote_fraction(&self) -> Array2<f32> {
        let k = self.len() as f32;
        self.counts().mapv(|c| c as f32 / k)
    }
}

/// Foreground iff strictly more than half the votes are foreground.
pub fn majority_vote(votes: &AtlasVoteSet) -> LabelMask {
    let k = votes.len();
    let first = &votes.masks[0];
    LabelMask {
        pixels: votes.counts().mapv(|c| u8::from(2 * c > k)),
        subject_id: first.subject_id.clone(),
        slice_index: first.slice_index,
    }
}

/// Fuses `atlases` perturbations of `mask` into a silver reference.
pub fn silver_reference(mask: &LabelMask, atlases: usize, magnitude: f64, seed: u64) -> Result<LabelMask> {
    ensure_arg!(atlases >= 1, "need at least one atlas");
    let mut masks = Vec::with_capacity(atlases);
    let mut ids = Vec::with_capacity(atlases);
    for k in 0..atlases {
        let atlas_seed = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
        masks.push(perturb_mask(mask, atlas_seed, magnitude)?);
        ids.push(format!("atlas{k}"));
    }
    Ok(majority_vote(&AtlasVoteSet::new(masks, ids)?))
}

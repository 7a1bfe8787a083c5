//! Slice and mask types shared by every stage of the pipeline.

use std::fmt;

use bridgeseg_tensor::{Element, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "MRI")]
    Mri,
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "SYNTH_CT")]
    SynthCt,
    #[serde(rename = "SYNTH_MRI")]
    SynthMri,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Mri => "MRI",
            Domain::Ct => "CT",
            Domain::SynthCt => "SYNTH_CT",
            Domain::SynthMri => "SYNTH_MRI",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One 2D grayscale slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    pub pixels: Array2<f32>,
    pub domain: Domain,
    pub subject_id: String,
    pub slice_index: usize,
    pub value_range: (f32, f32),
}

impl ImageSlice {
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// `[1, H, W]` tensor of the pixels.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        pixels_to_tensor(&self.pixels)
    }

    pub fn with_pixels(&self, pixels: Array2<f32>, domain: Domain) -> Self {
        Self {
            pixels,
            domain,
            subject_id: self.subject_id.clone(),
            slice_index: self.slice_index,
            value_range: self.value_range,
        }
    }
}

pub fn pixels_to_tensor<T: Element>(pixels: &Array2<f32>) -> Tensor<T> {
    let (h, w) = pixels.dim();
    let data = pixels.iter().map(|&v| T::lit(v as f64)).collect();
    Tensor::new(&[1, h, w], data).expect("[1, H, W] matches pixel count")
}

/// `[1, H, W]` (or `[H, W]`) tensor back to a pixel array.
pub fn tensor_to_pixels<T: Element>(t: &Tensor<T>) -> Array2<f32> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let data = t.data().iter().map(|v| v.f64() as f32).collect();
    Array2::from_shape_vec((h, w), data).expect("tensor holds one plane")
}

/// Binary ventricle mask; 1 = ventricle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub pixels: Array2<u8>,
    pub subject_id: String,
    pub slice_index: usize,
}

impl LabelMask {
    pub fn new(pixels: Array2<u8>, subject_id: impl Into<String>, slice_index: usize) -> Result<Self> {
        ensure_arg!(pixels.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(Self {
            pixels,
            subject_id: subject_id.into(),
            slice_index,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn to_target<T: Element>(&self) -> Vec<T> {
        self.pixels.iter().map(|&v| T::lit(v as f64)).collect()
    }

    /// Pixels `> threshold` of a probability map.
    pub fn from_probabilities(
        prob: &Array2<f32>,
        threshold: f32,
        subject_id: impl Into<String>,
        slice_index: usize,
    ) -> Self {
        Self {
            pixels: prob.mapv(|p| u8::from(p > threshold)),
            subject_id: subject_id.into(),
            slice_index,
        }
    }
}

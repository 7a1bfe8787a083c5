//! Dataset manifests and the on-disk raster format.
//!
//! A dataset directory holds `manifest.json` plus one little-endian `f32`
//! raster per slice (`<subject>_<slice>_<domain>.f32`, row-major) and one
//! `u8` raster per mask (`<subject>_<slice>_mask.u8`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::image::{Domain, ImageSlice, LabelMask};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "TRAIN")]
    Train,
    #[serde(rename = "VAL")]
    Val,
    #[serde(rename = "TEST")]
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub slice_index: usize,
    pub domain: Domain,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

impl ManifestEntry {
    pub fn new(subject_id: &str, slice_index: usize, domain: Domain, with_mask: bool) -> Self {
        Self {
            subject_id: subject_id.to_string(),
            slice_index,
            domain,
            image: format!("{subject_id}_{slice_index}_{}.f32", domain.tag()),
            mask: with_mask.then(|| format!("{subject_id}_{slice_index}_mask.u8")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split: Split,
    pub generator_params: BTreeMap<String, serde_json::Value>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Unpaired-training contract: no subject contributes both an MRI and
    /// a CT slice to a TRAIN split.
    pub fn check_unpaired(&self) -> Result<()> {
        if self.split != Split::Train {
            return Ok(());
        }
        let mut seen: HashMap<&str, BTreeSet<Domain>> = HashMap::new();
        for e in &self.entries {
            seen.entry(&e.subject_id).or_default().insert(e.domain);
        }
        for e in &self.entries {
            let domains = &seen[e.subject_id.as_str()];
            if domains.contains(&Domain::Mri) && domains.contains(&Domain::Ct) {
                return Err(Error::Contract(format!(
                    "TRAIN split pairs MRI and CT slices of subject `{}`",
                    e.subject_id
                )));
            }
        }
        Ok(())
    }

    /// Target-domain labels are forbidden during training.
    pub fn check_label_hygiene(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.domain == Domain::Ct && e.mask.is_some()) {
            return Err(Error::Contract(format!(
                "CT slice {}/{} carries a mask; target-domain labels must not be used for training",
                e.subject_id, e.slice_index
            )));
        }
        Ok(())
    }
}

/// Slices and masks aligned one-to-one with manifest entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub slices: Vec<ImageSlice>,
    pub masks: Vec<Option<LabelMask>>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, slices: Vec<ImageSlice>, masks: Vec<Option<LabelMask>>) -> Result<Self> {
        ensure_arg!(
            manifest.entries.len() == slices.len() && slices.len() == masks.len(),
            "manifest, slices and masks must align ({} / {} / {})",
            manifest.entries.len(),
            slices.len(),
            masks.len()
        );
        for ((entry, slice), mask) in manifest.entries.iter().zip(&slices).zip(&masks) {
            ensure_arg!(
                entry.mask.is_some() == mask.is_some(),
                "entry {}/{} mask presence disagrees with its manifest entry",
                entry.subject_id,
                entry.slice_index
            );
            if let Some(m) = mask {
                ensure_arg!(
                    m.shape() == slice.shape(),
                    "mask shape {:?} differs from slice shape {:?}",
                    m.shape(),
                    slice.shape()
                );
            }
        }
        Ok(Self {
            manifest,
            slices,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Keeps MRI slices of even-numbered subjects and CT slices of odd ones,
    /// dropping CT masks, so that no subject appears in both domains.
    pub fn into_unpaired_train(self) -> Dataset {
        let mut order: Vec<String> = Vec::new();
        for e in &self.manifest.entries {
            if !order.contains(&e.subject_id) {
                order.push(e.subject_id.clone());
            }
        }
        let rank: HashMap<String, usize> = order.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        let mut manifest = DatasetManifest {
            split: Split::Train,
            entries: Vec::new(),
            ..self.manifest.clone()
        };
        let mut slices = Vec::new();
        let mut masks = Vec::new();
        for ((entry, slice), mask) in self.manifest.entries.into_iter().zip(self.slices).zip(self.masks) {
            let wanted = if rank[&entry.subject_id].is_multiple_of(2) {
                Domain::Mri
            } else {
                Domain::Ct
            };
            if entry.domain != wanted {
                continue;
            }
            let keep_mask = entry.domain == Domain::Mri;
            manifest.entries.push(ManifestEntry {
                mask: if keep_mask { entry.mask } else { None },
                ..entry
            });
            slices.push(slice);
            masks.push(if keep_mask { mask } else { None });
        }
        Dataset {
            manifest,
            slices,
            masks,
        }
    }

    /// Source-domain training pairs: MRI slices with their masks.
    pub fn labeled_sources(&self) -> Vec<(&ImageSlice, &LabelMask)> {
        self.slices
            .iter()
            .zip(&self.masks)
            .filter(|(s, _)| s.domain == Domain::Mri)
            .filter_map(|(s, m)| m.as_ref().map(|m| (s, m)))
            .collect()
    }

    /// Target-domain slices. Never exposes their masks.
    pub fn targets(&self) -> Vec<&ImageSlice> {
        self.slices.iter().filter(|s| s.domain == Domain::Ct).collect()
    }

    pub fn slice_size(&self) -> Option<(usize, usize)> {
        self.slices.first().map(ImageSlice::shape)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes rasters and `manifest.json` into `out_dir`; returns the manifest path.
pub fn save_dataset(dataset: &Dataset, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written_masks = BTreeSet::new();
    for ((entry, slice), mask) in dataset.manifest.entries.iter().zip(&dataset.slices).zip(&dataset.masks) {
        let mut bytes = Vec::with_capacity(slice.pixels.len() * 4);
        for v in slice.pixels.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_file(&out_dir.join(&entry.image), &bytes)?;
        if let (Some(name), Some(mask)) = (&entry.mask, mask) {
            if written_masks.insert(name.clone()) {
                let bytes: Vec<u8> = mask.pixels.iter().copied().collect();
                write_file(&out_dir.join(name), &bytes)?;
            }
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    write_file(&path, json.as_bytes())?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, format!("cannot read manifest: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("corrupt manifest: {e}")))
}

fn slice_dims(manifest: &DatasetManifest, path: &Path) -> Result<(usize, usize)> {
    let size = manifest
        .generator_params
        .get("size")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::format(path, "generator_params.size missing"))? as usize;
    Ok((size, size))
}

fn read_raster(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, format!("cannot read raster: {e}")))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("raster has {} bytes, expected {expected}", bytes.len()),
        ));
    }
    Ok(bytes)
}

pub fn read_image(path: &Path, dims: (usize, usize)) -> Result<Array2<f32>> {
    let bytes = read_raster(path, dims.0 * dims.1 * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec(dims, data).expect("length checked"))
}

pub fn write_image(path: &Path, pixels: &Array2<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(pixels.len() * 4);
    for v in pixels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let dims = slice_dims(&manifest, &manifest_path)?;
    let mut slices = Vec::with_capacity(manifest.entries.len());
    let mut masks = Vec::with_capacity(manifest.entries.len());
    let mut mask_cache: HashMap<String, LabelMask> = HashMap::new();
    for entry in &manifest.entries {
        let pixels = read_image(&dir.join(&entry.image), dims)?;
        slices.push(ImageSlice {
            pixels,
            domain: entry.domain,
            subject_id: entry.subject_id.clone(),
            slice_index: entry.slice_index,
            value_range: (-1.0, 1.0),
        });
        let mask = match &entry.mask {
            None => None,
            Some(name) => Some(match mask_cache.get(name) {
                Some(m) => m.clone(),
                None => {
                    let path = dir.join(name);
                    let bytes = read_raster(&path, dims.0 * dims.1)?;
                    let pixels = Array2::from_shape_vec(dims, bytes).expect("length checked");
                    let m = LabelMask::new(pixels, entry.subject_id.clone(), entry.slice_index)
                        .map_err(|_| Error::format(&path, "mask is not binary"))?;
                    mask_cache.insert(name.clone(), m.clone());
                    m
                }
            }),
        };
        masks.push(mask);
    }
    Dataset::new(manifest, slices, masks).map_err(|e| Error::format(&manifest_path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantoms, PhantomSpec};

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let ds = generate_phantoms(&PhantomSpec::new(5, 2, 2, 32)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for (a, b) in back.slices.iter().zip(&ds.slices) {
            let bits = |s: &ImageSlice| s.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.masks, ds.masks);
    }

    #[test]
    fn empty_directory_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn missing_raster_is_named() {
        let ds = generate_phantoms(&PhantomSpec::new(5, 1, 1, 32)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let victim = &ds.manifest.entries[1].image;
        fs::remove_file(dir.path().join(victim)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(victim.as_str()), "{err}");
    }

    #[test]
    fn unpaired_train_split_honours_contracts() {
        let ds = generate_phantoms(&PhantomSpec::new(2, 5, 2, 32)).unwrap();
        assert!(ds.manifest.check_label_hygiene().is_err());
        let train = ds.into_unpaired_train();
        assert_eq!(train.manifest.split, Split::Train);
        train.manifest.check_unpaired().unwrap();
        train.manifest.check_label_hygiene().unwrap();
        assert_eq!(train.labeled_sources().len(), 3 * 2);
        assert_eq!(train.targets().len(), 2 * 2);
    }

    #[test]
    fn paired_train_manifest_is_rejected() {
        let mut ds = generate_phantoms(&PhantomSpec::new(2, 1, 1, 32)).unwrap();
        ds.manifest.split = Split::Train;
        assert!(matches!(ds.manifest.check_unpaired(), Err(Error::Contract(_))));
    }
}

//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header
//! (format version, training config, tensor directory), then the raw
//! little-endian `f32` tensor data the directory points into.

use std::fs;
use std::io::Write;
use std::path::Path;

use bridgeseg_tensor::{Element, ParamSet, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::bridge::{Discriminator, Generator};
use crate::error::{Error, Result};
use crate::seg::SegModel;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"BRSGCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Trained networks and the config that built them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub segmenter: SegModel<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    epoch: usize,
    config: TrainConfig,
    generator: Vec<TensorEntry>,
    discriminator: Vec<TensorEntry>,
    segmenter: Vec<TensorEntry>,
}

fn directory(params: &ParamSet<f32>, data: &mut Vec<u8>) -> Vec<TensorEntry> {
    params
        .iter()
        .map(|(name, t)| {
            let offset = data.len();
            for v in t.data() {
                v.write_le(data);
            }
            TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            }
        })
        .collect()
}

/// Writes atomically: a sibling temp file renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut data = Vec::new();
    let header = Header {
        version: FORMAT_VERSION,
        dtype: f32::DTYPE.to_string(),
        epoch: ckpt.epoch,
        config: ckpt.config.clone(),
        generator: directory(&ckpt.generator.params, &mut data),
        discriminator: directory(&ckpt.discriminator.params, &mut data),
        segmenter: directory(&ckpt.segmenter.params, &mut data),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(MAGIC)
        .and_then(|_| file.write_all(&(header.len() as u64).to_le_bytes()))
        .and_then(|_| file.write_all(&header))
        .and_then(|_| file.write_all(&data))
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_group(entries: &[TensorEntry], data: &[u8], path: &Path) -> Result<ParamSet<f32>> {
    let mut set = ParamSet::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * f32::BYTES;
        let bytes = data
            .get(e.offset..end)
            .ok_or_else(|| Error::format(path, format!("tensor `{}` runs past the end of the archive", e.name)))?;
        let values = bytes.chunks_exact(f32::BYTES).map(f32::read_le).collect();
        set.insert(e.name.clone(), Tensor::new(&e.shape, values)?);
    }
    Ok(set)
}

fn architecture_error(group: &str, err: TensorError) -> Error {
    match err {
        TensorError::UnknownParam(name) => Error::Architecture {
            layer: format!("{group}.{name}"),
            detail: "parameter present in only one of archive and architecture".into(),
        },
        TensorError::ParamShape { name, expected, found } => Error::Architecture {
            layer: format!("{group}.{name}"),
            detail: format!("architecture expects shape {expected:?}, archive holds {found:?}"),
        },
        other => Error::Tensor(other),
    }
}

/// Loads a checkpoint whose tensors must fit the architecture described by
/// its own stored config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    load(path, None)
}

/// Loads a checkpoint into the architecture of `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &TrainConfig) -> Result<Checkpoint> {
    load(path, Some(expected))
}

fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint archive (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| Error::format(path, "truncated checkpoint header"))?;
    let raw: serde_json::Value =
        serde_json::from_slice(header_bytes).map_err(|e| Error::format(path, format!("corrupt header: {e}")))?;
    let version = raw.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| Error::format(path, format!("corrupt header: {e}")))?;
    if header.dtype != f32::DTYPE {
        return Err(Error::format(path, format!("unsupported dtype `{}`", header.dtype)));
    }
    let data = &bytes[16 + header_len..];
    let config = expected.cloned().unwrap_or(header.config);

    let mut generator = Generator::<f32>::new(config.generator.clone(), 0)?;
    let mut discriminator = Discriminator::<f32>::new(config.discriminator.clone(), 0)?;
    let mut segmenter = SegModel::<f32>::new(config.seg.clone(), 0)?;
    for (group, entries, target) in [
        ("generator", &header.generator, &mut generator.params),
        ("discriminator", &header.discriminator, &mut discriminator.params),
        ("segmenter", &header.segmenter, &mut segmenter.params),
    ] {
        let loaded = read_group(entries, data, path)?;
        loaded.check_schema(target).map_err(|e| architecture_error(group, e))?;
        *target = loaded;
    }
    Ok(Checkpoint {
        config,
        epoch: header.epoch,
        generator,
        discriminator,
        segmenter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg::SegConfig;

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.generator.base_channels = 4;
        c.generator.n_res_blocks = 1;
        c.discriminator.base_channels = 4;
        c.seg = SegConfig {
            depth: 2,
            base_channels: 4,
            ..SegConfig::default()
        };
        c
    }

    fn checkpoint(config: TrainConfig) -> Checkpoint {
        Checkpoint {
            generator: Generator::new(config.generator.clone(), 1).unwrap(),
            discriminator: Discriminator::new(config.discriminator.clone(), 2).unwrap(),
            segmenter: SegModel::new(config.seg.clone(), 3).unwrap(),
            epoch: 4,
            config,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = checkpoint(tiny_config());
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.generator.params.bitwise_eq(&c.generator.params));
        assert!(back.discriminator.params.bitwise_eq(&c.discriminator.params));
        assert!(back.segmenter.params.bitwise_eq(&c.segmenter.params));
        assert_eq!(back.config, c.config);
        assert_eq!(back.epoch, 4);
        assert!(!path.with_extension("ckpt.tmp").exists());
    }

    #[test]
    fn wrong_architecture_names_the_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&checkpoint(tiny_config()), &path).unwrap();
        let mut other = tiny_config();
        other.generator.base_channels = 8;
        match load_checkpoint_for(&path, &other).unwrap_err() {
            Error::Architecture { layer, .. } => assert_eq!(layer, "generator.stem.w"),
            e => panic!("unexpected {e}"),
        }
        let mut deeper = tiny_config();
        deeper.generator.n_res_blocks = 2;
        let err = load_checkpoint_for(&path, &deeper).unwrap_err().to_string();
        assert!(err.contains("generator.res1"), "{err}");
    }

    #[test]
    fn version_and_corruption_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&checkpoint(tiny_config()), &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
        let patched = text.replacen("\"version\":1", "\"version\":9", 1);
        let mut v = bytes[..16].to_vec();
        v.extend_from_slice(patched.as_bytes());
        let vpath = dir.path().join("v.ckpt");
        fs::write(&vpath, &v).unwrap();
        assert!(matches!(
            load_checkpoint(&vpath),
            Err(Error::Version { found: 9, expected: 1 })
        ));

        let tpath = dir.path().join("t.ckpt");
        fs::write(&tpath, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(&tpath), Err(Error::Format { .. })));

        let gpath = dir.path().join("g.ckpt");
        fs::write(&gpath, b"garbage!garbage!").unwrap();
        assert!(matches!(load_checkpoint(&gpath), Err(Error::Format { .. })));

        assert!(matches!(
            load_checkpoint(&dir.path().join("none.ckpt")),
            Err(Error::MissingFile(_))
        ));
    }
}

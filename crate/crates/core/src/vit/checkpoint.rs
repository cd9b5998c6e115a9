//! Binary checkpoint format.
//!
//! ```text
//! offset 0   4 bytes   magic "POCF"
//!        4   u32 LE    format version
//!        8   u64 LE    header length H
//!       16   H bytes   JSON header {config, class_names, metadata, tensors}
//!     16+H   ...       raw f32 LE tensor data
//! ```
//!
//! Each manifest entry gives a tensor's name, shape and byte offset relative
//! to the start of the data section. Tensors are stored contiguously in
//! registry order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Params;
use crate::tensor::Tensor;
use crate::vit::config::ViTConfig;
use crate::vit::model::ViTModel;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"POCF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ViTConfig,
    class_names: Vec<String>,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// A model plus the class labels it was trained on and free-form provenance
/// (resolved run configuration, seeds).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ViTModel<f32>,
    pub class_names: Vec<String>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: ViTModel<f32>, class_names: Vec<String>) -> Self {
        Checkpoint {
            model,
            class_names,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .model
            .params()
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.model.config().clone(),
            class_names: self.class_names.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.params().values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 {
            return Err(bad(format!("file too short ({} bytes)", bytes.len())));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing POCF magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let data_start = 16usize
            .checked_add(usize::try_from(hlen).map_err(|_| bad("header length overflow".into()))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];

        let mut params = Params::new();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(bad(format!("tensor {} at offset {} (expected {expected_offset})", e.name, e.offset)));
            }
            let start = e.offset as usize;
            let end = start + 4 * numel;
            if end > data.len() {
                return Err(bad(format!("tensor {} extends past end of file", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
            expected_offset = end as u64;
        }
        if expected_offset as usize != data.len() {
            return Err(bad(format!(
                "{} trailing bytes after tensor data",
                data.len() - expected_offset as usize
            )));
        }
        if header.class_names.len() != header.config.num_classes {
            return Err(bad(format!(
                "{} class names for {} classes",
                header.class_names.len(),
                header.config.num_classes
            )));
        }
        let model = ViTModel::from_params(header.config, params)?;
        Ok(Checkpoint {
            model,
            class_names: header.class_names,
            metadata: header.metadata,
        })
    }

    /// Writes through a temporary file in the destination directory and
    /// renames it into place, so a failed save leaves no partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Atomically replaces `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            layers: 1,
            hidden_size: 8,
            mlp_size: 8,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            proj_rank: 2,
            ..ViTConfig::binary()
        }
    }

    fn ckpt() -> Checkpoint {
        let model = ViTModel::init(&tiny(), 9).unwrap();
        let mut c = Checkpoint::new(model, vec!["covid".into(), "healthy".into()]);
        c.metadata = serde_json::json!({"seed": 9});
        c
    }

    #[test]
    fn layout_prefix() {
        let b = ckpt().to_bytes().unwrap();
        assert_eq!(&b[..4], b"POCF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&b[16..16 + hlen]).unwrap();
        assert_eq!(header["tensors"][0]["name"], "patch_embed.weight");
        assert_eq!(header["tensors"][0]["offset"], 0);
        assert_eq!(header["tensors"][1]["offset"], 4 * 48 * 8);
        let n = ckpt().model.num_params() as usize;
        assert_eq!(b.len(), 16 + hlen + 4 * n);
    }

    #[test]
    fn bitwise_round_trip() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for (a, b) in c.model.params().values().zip(back.model.params().values()) {
            assert!(a.bitwise_eq(b));
        }
        assert_eq!(back.metadata["seed"], 9);
    }

    #[test]
    fn rejects_damage() {
        let bytes = ckpt().to_bytes().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut ver = bytes;
        ver[4] = 2;
        assert!(Checkpoint::from_bytes(&ver).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pocf");
        let c = ckpt();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(Checkpoint::load(dir.path().join("missing.pocf")).is_err());
    }
}

//! Versioned model checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DEFFACKP"
//! version      u32
//! header_len   u64
//! header       header_len bytes of JSON (config, training manifest, tensor table)
//! payload      f32 values of every tensor in table order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DeffaNet, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Float, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"DEFFACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    manifest: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: the model plus the training manifest stored with it.
pub struct Checkpoint<T: Float> {
    pub model: DeffaNet<T>,
    pub manifest: serde_json::Value,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save<T: Float>(model: &DeffaNet<T>, manifest: &serde_json::Value, path: &Path) -> Result<()> {
    let tensors: Vec<TensorEntry> = model
        .params()
        .iter()
        .map(|(_, p)| TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().dims(),
            trainable: p.trainable,
        })
        .collect();
    let header = Header {
        format: "deffa-checkpoint".into(),
        version: FORMAT_VERSION,
        config: model.config().clone(),
        manifest: manifest.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut buf = Vec::with_capacity(
        header.len() + 4 * model.params().iter().map(|(_, p)| p.value.shape().len()).sum::<usize>() + 20,
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, p) in model.params().iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint. With `expected` set, a differing stored config is an error.
pub fn load<T: Float>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

fn decode<T: Float>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("not a deffa checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(ckpt_err("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| ckpt_err(format!("bad header: {e}")))?;
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(ckpt_err(format!(
                "checkpoint model config does not match the requested config (stored: {})",
                serde_json::to_string(&header.config).unwrap_or_default()
            )));
        }
    }
    let mut model = DeffaNet::<T>::new(header.config.clone(), 0)?;
    if model.params().len() != header.tensors.len() {
        return Err(ckpt_err(format!(
            "checkpoint holds {} tensors but the config builds {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    let mut payload = &body[hlen..];
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let p = model.params_mut().get_mut(id);
        let [b, c, h, w] = entry.shape;
        let shape = Shape::new(b, c, h, w);
        if p.name != entry.name || p.value.shape() != shape {
            return Err(ckpt_err(format!(
                "tensor layout mismatch at {} (stored {} {shape})",
                p.name, entry.name
            )));
        }
        let n = shape.len();
        if payload.len() < 4 * n {
            return Err(ckpt_err("truncated payload"));
        }
        let data: Vec<T> = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        p.value = Tensor::from_vec(shape, data)?;
        payload = &payload[4 * n..];
    }
    if !payload.is_empty() {
        return Err(ckpt_err("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        model,
        manifest: header.manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BottleneckFusion;

    #[test]
    fn save_load_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut net = DeffaNet::<f32>::new(ModelConfig::default(), 11).unwrap();
        let manifest = serde_json::json!({"epochs": 3});
        save(&net, &manifest, &path).unwrap();
        let mut back = load::<f32>(&path, Some(&ModelConfig::default())).unwrap();
        assert_eq!(back.manifest, manifest);
        let raw = Tensor::full(Shape::new(1, 3, 16, 16), 0.3);
        let inv = Tensor::full(Shape::new(1, 1, 16, 16), 0.6);
        assert_eq!(
            net.forward(&raw, &inv, false).unwrap(),
            back.model.forward(&raw, &inv, false).unwrap()
        );
    }

    #[test]
    fn mismatched_config_and_corruption_are_explicit_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let net = DeffaNet::<f32>::new(ModelConfig::default(), 0).unwrap();
        save(&net, &serde_json::Value::Null, &path).unwrap();
        let other = ModelConfig {
            bottleneck_fusion: BottleneckFusion::Concat,
            ..ModelConfig::default()
        };
        let err = load::<f32>(&path, Some(&other)).err().unwrap();
        assert!(err.to_string().contains("does not match"));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        assert!(decode::<f32>(&bytes, None).is_err());
        let bytes = std::fs::read(&path).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 4], None).is_err());
    }
}

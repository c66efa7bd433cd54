//! Single-file checkpoints: one line of JSON header, then the raw
//! little-endian payload of every tensor in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::params::{ParamEntry, ParamStore};
use crate::tensor::{Float, Init, Tensor};

pub const FORMAT: &str = "diffcore-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub frozen: bool,
    pub seed: u64,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub master_seed: u64,
    pub tensors: Vec<TensorHeader>,
    /// Free-form metadata (configs, step counts).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn to_bytes<T: Float>(store: &ParamStore<T>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        master_seed: store.master_seed(),
        tensors: store
            .entries()
            .iter()
            .map(|e| TensorHeader {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                frozen: e.frozen,
                seed: e.seed,
                init: e.init,
            })
            .collect(),
        meta,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for e in store.entries() {
        for &v in e.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<(ParamStore<T>, CheckpointHeader)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DiffError::Checkpoint("missing header terminator".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format != FORMAT {
        return Err(DiffError::Checkpoint(format!("unsupported format {}", header.format)));
    }
    let mut store = ParamStore::new(header.master_seed);
    let mut off = nl + 1;
    for th in &header.tensors {
        let n: usize = th.shape.iter().product();
        let width = match th.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(DiffError::Checkpoint(format!("unknown dtype {other}"))),
        };
        let end = off + n * width;
        if end > bytes.len() {
            return Err(DiffError::Checkpoint(format!("truncated payload for {}", th.name)));
        }
        let data: Vec<T> = bytes[off..end]
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::from_f64_lossy(f32::read_le(c) as f64)
                } else {
                    T::from_f64_lossy(f64::read_le(c))
                }
            })
            .collect();
        off = end;
        store.insert(ParamEntry {
            name: th.name.clone(),
            value: Tensor::new(th.shape.clone(), data)?,
            frozen: th.frozen,
            seed: th.seed,
            init: th.init,
        })?;
    }
    if off != bytes.len() {
        return Err(DiffError::Checkpoint("trailing bytes after payload".into()));
    }
    Ok((store, header))
}

pub fn save<T: Float>(path: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let bytes = to_bytes(store, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Float>(path: &Path) -> Result<(ParamStore<T>, CheckpointHeader)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_flags() {
        let mut s = ParamStore::<f32>::new(42);
        let a = s.add("enc.w", &[3, 2], Init::NormalScaled).unwrap();
        s.add("enc.b", &[2], Init::Zeros).unwrap();
        s.set_frozen(a, true);
        let bytes = to_bytes(&s, serde_json::json!({"step": 7})).unwrap();
        let (r, h) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(h.meta["step"], 7);
        assert_eq!(r.len(), 2);
        for (x, y) in s.entries().iter().zip(r.entries()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.frozen, y.frozen);
            assert_eq!(x.seed, y.seed);
            assert!(x.value.bit_eq(&y.value));
        }
    }

    #[test]
    fn header_is_first_line_then_le_payload() {
        let mut s = ParamStore::<f32>::new(0);
        let w = s.add("w", &[1], Init::Zeros).unwrap();
        s.get_mut(w).data_mut()[0] = 1.5;
        let bytes = to_bytes(&s, serde_json::Value::Null).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[nl + 1..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut s = ParamStore::<f64>::new(0);
        s.add("w", &[4], Init::Ones).unwrap();
        let bytes = to_bytes(&s, serde_json::Value::Null).unwrap();
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
    }
}

//! Deterministic binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "SPLTWRLD"
//! version u32      1
//! header  u64 length + UTF-8 JSON {kind, step, config, tensors: [{name, dtype, shape}]}
//! data    tensors in header order, raw little-endian elements
//! ```
//!
//! Tensors are sorted by name and the JSON maps have sorted keys, so the
//! same parameters always produce the same bytes.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"SPLTWRLD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named parameters plus the kind of model, training step and config echo.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn dtype_name(dt: DType) -> Result<&'static str> {
    match dt {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

impl Checkpoint {
    /// Snapshot of every variable in `store`.
    pub fn from_store(kind: &str, step: u64, config: serde_json::Value, store: &ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            step,
            config,
            tensors: store.named_vars().into_iter().map(|(n, v)| (n, v.as_tensor().detach())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<&(String, Tensor)> = self.tensors.iter().collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(n, t)| {
                    Ok(TensorEntry {
                        name: n.clone(),
                        dtype: dtype_name(t.dtype())?.to_string(),
                        shape: t.dims().to_vec(),
                    })
                })
                .collect::<Result<_>>()?,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            out.extend_from_slice(&tensor_bytes(t)?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        let len = u64::from_le_bytes(u64b) as usize;
        if r.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f32" => {
                    let need = 4 * n;
                    if r.len() < need {
                        return Err(Error::Checkpoint(format!("truncated data for {}", e.name)));
                    }
                    let v: Vec<f32> = r[..need].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    r = &r[need..];
                    Tensor::from_vec(v, e.shape.clone(), &Device::Cpu)?
                }
                "f64" => {
                    let need = 8 * n;
                    if r.len() < need {
                        return Err(Error::Checkpoint(format!("truncated data for {}", e.name)));
                    }
                    let v: Vec<f64> = r[..need].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    r = &r[need..];
                    Tensor::from_vec(v, e.shape.clone(), &Device::Cpu)?
                }
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
            };
            tensors.push((e.name, t));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Expects a checkpoint of the given kind.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Copies the stored values into the same-named variables of `store`,
    /// which must hold exactly the same names and shapes.
    pub fn restore(&self, store: &ParamStore) -> Result<()> {
        let vars = store.named_vars();
        if vars.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} tensors, model has {}", self.tensors.len(), vars.len())));
        }
        for (name, var) in vars {
            let t = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} vs model {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::linear;

    fn store(seed: u64) -> ParamStore {
        let s = ParamStore::new(seed);
        let vb = s.vb();
        linear(3, 4, vb.pp("a")).unwrap();
        linear(2, 2, vb.pp("b")).unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let s = store(1);
        let cfg = serde_json::json!({"lr": 6e-5, "name": "x", "nested": {"z": 0.1, "a": [1, 2]}});
        let c = Checkpoint::from_store("test", 42, cfg, &s);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        c.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn restore_copies_values() {
        let a = store(1);
        let b = store(2);
        Checkpoint::from_store("t", 0, serde_json::Value::Null, &a).restore(&b).unwrap();
        for ((_, x), (_, y)) in a.named_vars().iter().zip(b.named_vars().iter()) {
            let x: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let c = Checkpoint::from_store("t", 0, serde_json::Value::Null, &store(0));
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let other = ParamStore::new(0);
        linear(3, 4, other.vb().pp("a")).unwrap();
        assert!(c.restore(&other).is_err());
    }
}

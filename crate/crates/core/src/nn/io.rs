//! Binary tensor container used for checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PHMNTNSR"
//! version  u32      1
//! hlen     u64      length of the JSON header
//! header   hlen     {"fingerprint": str, "meta": any, "tensors": [{"name", "shape"}]}
//! payload           for each tensor in header order: product(shape) f64 values
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"PHMNTNSR";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Container {
    pub fingerprint: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(fingerprint: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    /// Append every parameter of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.tensors
                .push((format!("{prefix}/{}", p.name), p.value.clone()));
        }
    }

    /// Copy the tensors stored under `prefix/` into `store` by name.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<(), NnError> {
        let mut found = 0;
        for (name, t) in &self.tensors {
            let Some(pname) = name.strip_prefix(prefix).and_then(|s| s.strip_prefix('/')) else {
                continue;
            };
            let id = store
                .id(pname)
                .ok_or_else(|| NnError::Format(format!("unknown parameter {pname}")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(NnError::Format(format!(
                    "shape mismatch for {pname}: stored {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            found += 1;
        }
        if found != store.len() {
            return Err(NnError::Format(format!(
                "section {prefix} holds {found} of {} parameters",
                store.len()
            )));
        }
        Ok(())
    }

    pub fn has_section(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        let header = Header {
            fingerprint: self.fingerprint.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let hbytes = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(hbytes.len() as u64).to_le_bytes())?;
        w.write_all(&hbytes)?;
        let mut buf = Vec::new();
        for (_, t) in &self.tensors {
            buf.clear();
            buf.reserve(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("not a tensor container".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes)?;
        let header: Header =
            serde_json::from_slice(&hbytes).map_err(|e| NnError::Format(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            fingerprint: header.fingerprint,
            meta: header.meta,
            tensors,
        })
    }
}

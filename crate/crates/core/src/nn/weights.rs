//! Named parameter sets and the `ANW1` binary weight format.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "ANW1" version
//! meta_count  { key_len key value_len value }*
//! entry_count { name_len name rank dim* f32-payload }*
//! ```
//!
//! Entries and metadata are written in sorted key order, so identical
//! weights always produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ANW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights {
    pub params: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Weight(format!("missing parameter `{}`", name)))
    }

    /// Copies every entry of `other` into `self`, replacing duplicates.
    pub fn merge(&mut self, other: &ModelWeights) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
        for (k, v) in &other.meta {
            self.meta.insert(k.clone(), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ModelWeights {
        ModelWeights {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn num_parameters(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::Format("file shorter than magic".into()))? != MAGIC {
            return Err(Error::Format("bad magic, expected ANW1".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported weight format version {}", version)));
        }
        let mut w = ModelWeights::new();
        let n_meta = r.u32()?;
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            w.meta.insert(k, v);
        }
        let n_entries = r.u32()?;
        for _ in 0..n_entries {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Corruption(format!("`{}` has rank {}", name, rank)));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c.checked_mul(4).is_some())
                .ok_or_else(|| Error::Corruption(format!("`{}` dims overflow", name)))?;
            let payload = r
                .take(count * 4)
                .map_err(|_| Error::Corruption(format!("payload of `{}` truncated", name)))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if w.params.insert(name.clone(), Tensor::new(&dims, data)?).is_some() {
                return Err(Error::Corruption(format!("duplicate entry `{}`", name)));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(w)
    }

    /// Rounds every value to single precision, as a save/load cycle would.
    pub fn quantized(&self) -> ModelWeights {
        let mut out = self.clone();
        for t in out.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }
}

pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<()> {
    std::fs::write(path, w.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Corruption("name is not UTF-8".into()))
    }
}

/// Parameters bound to a tape: trainable ones as leaves, the rest as
/// constants.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &Tape, weights: &ModelWeights, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = weights
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    /// Wraps variables that already live on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Weight(format!("missing parameter `{}`", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

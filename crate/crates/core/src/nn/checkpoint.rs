// SPDX-License-Identifier: Apache-2.0

//! Weight checkpoint container.
//!
//! ```text
//! magic "VPCK" | version u8 | arch hash u64 | meta len u32 | meta (UTF-8 key=value lines)
//! | tensor count u32 | per tensor: name len u16, name, 5 × u32 dims, f32 values
//! ```
//! All integers and floats are little-endian. The architecture hash is
//! FNV-1a over the architecture string and every tensor's name and shape;
//! loading recomputes it and rejects a mismatch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::layers::ParamSet;
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VPCK";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical architecture description; `arch` entry of the metadata.
    pub arch: String,
    pub meta: BTreeMap<String, String>,
    pub params: ParamSet<f32>,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Checkpoint {
    pub fn new(arch: String, params: ParamSet<f32>) -> Self {
        Checkpoint {
            arch,
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn arch_hash(&self) -> u64 {
        let mut s = self.arch.clone();
        for (n, t) in self.params.names.iter().zip(&self.params.tensors) {
            s.push_str(&format!(";{n}:{:?}", t.shape));
        }
        fnv1a(s.as_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.arch_hash().to_le_bytes());
        let mut meta = format!("arch={}\n", self.arch);
        for (k, v) in &self.meta {
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (n, t) in self.params.names.iter().zip(&self.params.tensors) {
            out.extend_from_slice(&(n.len() as u16).to_le_bytes());
            out.extend_from_slice(n.as_bytes());
            for d in t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hash = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let mlen = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(mlen)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line '{line}'")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let arch = meta
            .remove("arch")
            .ok_or_else(|| Error::Checkpoint("missing architecture".into()))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::default();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut shape = [0usize; 5];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.add(name, Tensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let ck = Checkpoint { arch, meta, params };
        if ck.arch_hash() != hash {
            return Err(Error::Checkpoint("architecture hash mismatch".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

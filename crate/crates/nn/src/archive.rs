//! Named-parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "XGANARCH"
//! version    u32      1
//! manifest   u32 length + UTF-8 JSON
//! count      u32
//! tensor*    u32 name length, UTF-8 name, u32 rank, u32 dims[rank],
//!            f32 payload[prod(dims)]
//! digest     32 bytes SHA-256 of every preceding byte
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::param::Parameterized;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"XGANARCH";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub manifest: Value,
    pub tensors: Vec<ArchiveTensor>,
}

impl Archive {
    pub fn new(manifest: Value) -> Self {
        Self {
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest).expect("JSON values always serialize");
        put_u32(&mut out, manifest.len());
        out.extend_from_slice(&manifest);
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(NnError::Format("archive truncated".into()));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(NnError::Format("bad archive magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(NnError::Format("archive digest mismatch (corrupt or truncated)".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported archive version {version}")));
        }
        let mlen = r.u32()? as usize;
        let manifest: Value = serde_json::from_slice(r.take(mlen)?)
            .map_err(|e| NnError::Format(format!("manifest is not valid JSON: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        let mut names = BTreeSet::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| NnError::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            if !names.insert(name.clone()) {
                return Err(NnError::Format(format!("duplicate tensor {name}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| NnError::Format(format!("tensor {name} is too large")))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| NnError::Format("overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(ArchiveTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(NnError::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { manifest, tensors })
    }

    /// Writes atomically: the file only appears once fully written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Appends every parameter of `net` under `prefix.`.
    pub fn push_params<T: Scalar>(&mut self, prefix: &str, net: &impl Parameterized<T>) {
        for p in net.params() {
            self.tensors.push(ArchiveTensor {
                name: format!("{prefix}.{}", p.name()),
                shape: p.shape().to_vec(),
                data: p.value.iter().map(|v| v.to_f32_lossy()).collect(),
            });
        }
    }

    /// Overwrites every parameter of `net` from tensors stored under `prefix.`.
    /// Nothing is modified unless every tensor is present with the right shape.
    pub fn load_params<T: Scalar>(&self, prefix: &str, net: &mut impl Parameterized<T>) -> Result<()> {
        let mut staged = Vec::new();
        for p in net.params() {
            let name = format!("{prefix}.{}", p.name());
            let t = self
                .get(&name)
                .ok_or_else(|| NnError::Format(format!("archive lacks tensor {name}")))?;
            if t.shape != p.shape() {
                return Err(NnError::Format(format!(
                    "tensor {name} has shape {:?}, network expects {:?}",
                    t.shape,
                    p.shape()
                )));
            }
            staged.push(t);
        }
        for (p, t) in net.params_mut().into_iter().zip(staged) {
            for (v, &s) in p.value.iter_mut().zip(&t.data) {
                *v = T::from_f64_lossy(s as f64);
            }
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("archive field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| NnError::Format("archive truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

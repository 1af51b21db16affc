//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"DMHSACKP"
//! version  u32 = 1
//! n_meta   u32, then n_meta × (u32 len, utf-8 key, u32 len, utf-8 value)
//! n_entry  u32, then n_entry × (u8 kind, u32 len, utf-8 name,
//!                               u32 rank, rank × u64 dim, raw values)
//! ```
//!
//! `kind` is 0 for trainable parameters and 1 for buffers. Values use the
//! precision named by the `precision` metadata key.

use std::collections::BTreeMap;
use std::path::Path;

use super::param::ParamStore;
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"DMHSACKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: BTreeMap<String, String>,
    pub store: ParamStore<T>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Real>(store: &ParamStore<T>, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.num_scalars() * T::BYTES + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    let mut meta = metadata.clone();
    meta.insert("precision".into(), T::NAME.into());
    put_u32(&mut out, meta.len());
    for (k, v) in &meta {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    let entries = store
        .params()
        .iter()
        .map(|p| (0u8, &p.name, &p.tensor))
        .chain(store.buffers().iter().map(|(n, t)| (1u8, n, t)));
    put_u32(&mut out, store.params().len() + store.buffers().len());
    for (kind, name, tensor) in entries {
        out.push(kind);
        put_str(&mut out, name);
        put_u32(&mut out, tensor.rank());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut metadata = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        metadata.insert(k, v);
    }
    match metadata.get("precision") {
        Some(p) if p == T::NAME => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "precision mismatch: file has {other:?}, expected {}",
                T::NAME
            )))
        }
    }
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let kind = r.take(1)?[0];
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let tensor = Tensor::new(&shape, data)?;
        match kind {
            0 => store.add(name, tensor)?,
            1 => {
                store.add_buffer(name, tensor)?;
                continue;
            }
            k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
        };
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { metadata, store })
}

pub fn write_checkpoint<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    write_atomic(path, &encode(store, metadata))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}

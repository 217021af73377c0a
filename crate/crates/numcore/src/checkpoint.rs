//! Named parameter storage and the binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "BELLACKP"
//! version  u32
//! records  until EOF:
//!   name_len u32, name (UTF-8), rank u32, dims u32 × rank, payload f32 × Π dims
//! ```
//!
//! Records are written in lexicographic name order, so equal stores produce
//! equal bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BELLACKP";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered map of named `f32` parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Option<Tensor<f32>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Names starting with `prefix`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    /// Copy of the tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts every tensor of `other`, replacing existing names.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn set_requires_grad_prefix(&mut self, prefix: &str, on: bool) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                v.set_requires_grad(on);
            }
        }
    }

    pub fn set_requires_grad_all(&mut self, on: bool) {
        for v in self.tensors.values_mut() {
            v.set_requires_grad(on);
        }
    }

    /// SHA-256 over the serialized records whose names start with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        checksum_tensors(self.iter().filter(|(k, _)| k.starts_with(prefix)))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_record(&mut w, name, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut cur, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(NumError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut cur, "version")?;
        if version != FORMAT_VERSION {
            return Err(NumError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut store = ParamStore::new();
        while !cur.is_empty() {
            let name_len = read_u32(&mut cur, "name length")? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut cur, &mut name, "name")?;
            let name =
                String::from_utf8(name).map_err(|e| NumError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
            let rank = read_u32(&mut cur, "rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut cur, "dims")? as usize);
            }
            let n: usize = dims.iter().product();
            let mut payload = vec![0u8; n * 4];
            read_exact(&mut cur, &mut payload, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| NumError::Checkpoint(format!("record `{name}`: {e}")))?;
            if store.insert(name.clone(), t).is_some() {
                return Err(NumError::Checkpoint(format!("duplicate record `{name}`")));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// SHA-256 (hex) over records in the checkpoint encoding.
pub fn checksum_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor<f32>)>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in items {
        buf.clear();
        write_record(&mut buf, name, t).expect("writing to a Vec cannot fail");
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| NumError::Checkpoint(format!("truncated while reading {what}")))
}

fn read_u32(cur: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

//! Named parameter storage and the checkpoint container.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic      8 bytes  "MFRBPCKP"
//! version    u32      currently 1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_params   u32
//!   name     u32 length + UTF-8 bytes
//!   ndim     u32
//!   dims     ndim x u64
//!   values   prod(dims) x f64 (IEEE-754 bits)
//! ```
//!
//! Values are stored as raw bit patterns, so save/load is bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Trainable arrays by name, with a parallel gradient buffer per array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter {name:?} already defined")));
        }
        let idx = self.values.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.values[i])
            .ok_or_else(|| Error::MissingParameters(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let idx = self.index_of(name).ok_or_else(|| Error::MissingParameters(name.to_string()))?;
        Ok(&mut self.values[idx])
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.grads[i])
            .ok_or_else(|| Error::MissingParameters(name.to_string()))
    }

    pub fn grad_at(&self, idx: usize) -> &Tensor {
        &self.grads[idx]
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn set_grads(&mut self, grads: &Gradients) -> Result<()> {
        if grads.values.len() != self.values.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.values.len(), self.values.len())));
        }
        for (i, g) in grads.values.iter().enumerate() {
            if g.shape() != self.values[i].shape() {
                return Err(Error::Shape(format!("gradient shape {:?} for parameter {}", g.shape(), self.names[i])));
            }
        }
        self.grads.clone_from(&grads.values);
        Ok(())
    }

    /// Copies every array whose name is also present in `other`.
    pub fn copy_shared_from(&mut self, other: &ParameterStore) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in other.iter() {
            if let Some(idx) = self.index_of(name) {
                if self.values[idx].shape() != value.shape() {
                    return Err(Error::Shape(format!("parameter {name} has different shapes")));
                }
                self.values[idx] = value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// New store holding the arrays whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParameterStore {
        let mut out = ParameterStore::new();
        for (name, value) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, value.clone()).expect("names are unique");
            }
        }
        out
    }

    /// Adds every array of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParameterStore) -> Result<()> {
        for (name, value) in other.iter() {
            self.insert(format!("{prefix}{name}"), value.clone())?;
        }
        Ok(())
    }
}

/// Gradient arrays aligned index-for-index with a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    values: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self { values: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn by_name<'a>(&'a self, store: &ParameterStore, name: &str) -> Result<&'a Tensor> {
        store.index_of(name).map(|i| &self.values[i]).ok_or_else(|| Error::MissingParameters(name.to_string()))
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b.data());
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter()
    }
}

/// Uniform initialisation in `±1/sqrt(fan_in)`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::raw(shape.to_vec(), data)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFRBPCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus free-form string metadata, as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in self.params.iter() {
            write_str(&mut out, name);
            out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for d in value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut params = ParameterStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2])).is_err());
        assert!(matches!(s.get("missing"), Err(Error::MissingParameters(_))));
    }

    #[test]
    fn gradient_shapes_follow_weights() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(&[2, 3])).unwrap();
        s.insert("b", Tensor::zeros(&[4])).unwrap();
        for (name, v) in s.iter() {
            assert_eq!(s.grad(name).unwrap().shape(), v.shape());
        }
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let mut c = Checkpoint::default();
        c.params.insert("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            arrays in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 1..20), 1..5),
            meta in prop::collection::btree_map("[a-z]{1,8}", "[ -~]{0,16}", 0..4),
        ) {
            let mut c = Checkpoint { metadata: meta, ..Default::default() };
            for (i, a) in arrays.iter().enumerate() {
                c.params.insert(format!("p{i}"), Tensor::from_vec(a.clone())).unwrap();
            }
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back.to_bytes(), &bytes);
            for ((_, a), (_, b)) in c.params.iter().zip(back.params.iter()) {
                let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}

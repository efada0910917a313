//! Named parameter storage, seeded initialization and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `DMOE`, version `u32`, count `u32`,
//! then per tensor: name length `u32`, UTF-8 name bytes, rank `u32`,
//! dims `u32 x rank`, raw `f32 x numel`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMOE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which sub-network a parameter belongs to; drives freezing in phase 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Base,
    Embedding,
    Gate,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
    /// `false` for running statistics and other buffers.
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, group: ParamGroup, trainable: bool) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), tensor, group, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    /// Number of trainable scalars, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && group.is_none_or(|g| g == e.group))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Order-sensitive FNV-1a digest over names and raw bits of a group.
    pub fn checksum(&self, group: Option<ParamGroup>) -> u64 {
        let mut h = Fnv::default();
        for e in self.entries.iter().filter(|e| group.is_none_or(|g| g == e.group)) {
            h.write(e.name.as_bytes());
            for &v in e.tensor.data() {
                h.write(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h.0
    }

    pub fn cast<S: Scalar>(&self) -> ParamSet<S> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    group: e.group,
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.tensor.rank() as u32).to_le_bytes())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in e.tensor.data() {
                w.write_all(&v.to_f32_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    /// Overwrite tensors from a checkpoint; every stored name must exist here
    /// with the same shape.
    pub fn load_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        for (name, tensor) in read_checkpoint::<T, R>(r)? {
            let slot = self
                .get_mut(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint has unknown tensor {name}")))?;
            if slot.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_checkpoint(std::fs::File::open(path)?)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Parse a checkpoint into `(name, tensor)` pairs in file order.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a DMOE checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non-UTF-8 name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f32_bits(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

#[derive(Clone, Copy)]
struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Per-parameter RNG seed, so a tensor's initial value depends only on
/// `(seed, name)` and not on which other parameters exist.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h = Fnv::default();
    h.write(&seed.to_le_bytes());
    h.write(name.as_bytes());
    h.0
}

/// Zero-mean normal initialization with the given standard deviation.
pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
}

/// Kaiming (He) fan-in normal: `std = sqrt(2 / fan_in)`.
pub fn kaiming_init<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    normal_init(shape, (2.0 / fan_in as f64).sqrt(), seed, name)
}

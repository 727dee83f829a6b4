//! Named parameter storage, seeded initialization and the `MMP1` container.
//!
//! Layout of an `MMP1` file (all integers little-endian `u32`):
//!
//! ```text
//! "MMP1" count { name_len name_utf8 rank dims[rank] f64_le[prod(dims)] }*count
//! ```
//!
//! Entries are written in name order, so equal stores serialize to equal
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, fan-in being the product of all
    /// dimensions after the first.
    FanInUniform,
    Zeros,
    Ones,
}

/// Declared shape and initializer of one parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// SplitMix64 finalizer; used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3))
}

/// Trainable tensors keyed by a stable path such as `stem/pet/weight`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    /// Allocates and initializes every spec. Each parameter draws from its
    /// own stream derived from `(seed, name)`, so values do not depend on
    /// declaration order.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut store = Self::new(seed);
        for spec in specs {
            let n = spec.numel();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanInUniform => {
                    let fan_in: usize = spec.shape.iter().skip(1).product::<usize>().max(1);
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, name_hash(&spec.name)));
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            store.insert(&spec.name, Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), tensor.with_requires_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Adds the tape's gradients into every parameter of this store that was
    /// recorded on the tape.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, var) in tape.params() {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad(var)) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                expected: "MMP1",
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let count = r.u32("count")?;
        let mut store = Self::new(0);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| Error::Data(format!("{}: parameter name is not UTF-8: {e}", origin.display())))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8, "values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Copies values (not gradients) from `other` for every shared name.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (name, t) in self.params.iter_mut() {
            if let Some(src) = other.params.get(name) {
                if src.shape() == t.shape() {
                    t.data_mut().copy_from_slice(src.data());
                }
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: PathBuf::from(self.origin),
                detail: format!("{what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("b/weight", vec![4, 2, 3, 3, 3], Init::FanInUniform),
            ParamSpec::new("a/gamma", vec![4], Init::Ones),
            ParamSpec::new("a/beta", vec![4], Init::Zeros),
        ]
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ParamStore::from_specs(&specs(), 3).unwrap();
        let b = ParamStore::from_specs(&specs(), 3).unwrap();
        let c = ParamStore::from_specs(&specs(), 4).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
        let bound = (6.0f64 / 54.0).sqrt();
        assert!(a.get("b/weight").unwrap().data().iter().all(|v| v.abs() < bound));
        assert_eq!(a.get("a/gamma").unwrap().data(), &[1.0; 4]);
        assert_eq!(a.num_scalars(), 4 * 54 + 8);
    }

    #[test]
    fn iteration_is_sorted() {
        let a = ParamStore::from_specs(&specs(), 0).unwrap();
        let names: Vec<_> = a.names().collect();
        assert_eq!(names, vec!["a/beta", "a/gamma", "b/weight"]);
    }

    #[test]
    fn container_round_trip_and_errors() {
        let a = ParamStore::from_specs(&specs(), 9).unwrap();
        let bytes = a.to_bytes();
        let here = Path::new("mem");
        let b = ParamStore::from_bytes(&bytes, here).unwrap();
        assert_eq!(b.to_bytes(), bytes);
        assert!(matches!(
            ParamStore::from_bytes(&bytes[..bytes.len() - 3], here),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamStore::from_bytes(&bad, here), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn container_layout() {
        let mut s = ParamStore::new(0);
        s.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let b = s.to_bytes();
        assert_eq!(&b[..4], b"MMP1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b[12], b'w');
        assert_eq!(u32::from_le_bytes(b[13..17].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[21..29].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 4 + 4 + 4 + 1 + 4 + 4 + 16);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("w", Tensor::scalar(2.0)).is_err());
    }
}

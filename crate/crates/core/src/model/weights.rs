//! Named parameter arrays and their `FDWT` binary encoding.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FDWT"  u32 version=1  u32 count
//! count × { u16 name_len, name (UTF-8), u32 rank, rank × u32 dim, numel × f64 }
//! ```
//!
//! Entries are written in lexicographic name order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;

use super::ModelConfig;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"FDWT";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightFormatError {
    #[error("bad magic {0:?}, expected \"FDWT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated weight payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("entry name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate entry `{0}`")]
    DuplicateName(String),
    #[error("entry `{0}` name longer than 65535 bytes")]
    NameTooLong(String),
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
}

/// Ordered map from parameter name to array. Iteration is lexicographic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet(BTreeMap<String, Tensor>);

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Self(map)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.0
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.0
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }

    pub fn parameter_count(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Stable 64-bit digest of the (name, shape) schema.
    pub fn schema_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (name, t) in &self.0 {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Digest of schema and every value bit, as a hex string.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_bytes().unwrap_or_default());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Serialized size of an `FDWT` payload for this set.
    pub fn encoded_len(&self) -> usize {
        12 + self
            .0
            .iter()
            .map(|(n, t)| 2 + n.len() + 4 + 4 * t.rank() + 8 * t.numel())
            .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WeightFormatError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        for (name, t) in &self.0 {
            let len = u16::try_from(name.len()).map_err(|_| WeightFormatError::NameTooLong(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightFormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != WEIGHTS_MAGIC {
            return Err(WeightFormatError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(WeightFormatError::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| WeightFormatError::InvalidName)?
                .to_string();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or(WeightFormatError::Truncated {
                offset: r.pos,
                needed: usize::MAX,
                available: bytes.len() - r.pos,
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).expect("numel matches");
            if map.insert(name.clone(), t).is_some() {
                return Err(WeightFormatError::DuplicateName(name));
            }
        }
        if r.pos != bytes.len() {
            return Err(WeightFormatError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self(map))
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(WeightFormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16, WeightFormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32, WeightFormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, WeightFormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

// ── parameter schema ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Zeros,
    Ones,
    /// Uniform ±√(6 / (fan_in + fan_out)) for a `[fan_out, fan_in]` matrix.
    Glorot,
}

pub(crate) fn block_name(block: usize, field: &str) -> String {
    format!("block{block:02}.{field}")
}

fn schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let h = cfg.mlp_hidden();
    let mut s = vec![
        ("embed.E".to_string(), vec![d, cfg.patch_len()], Init::Glorot),
        ("embed.pos".to_string(), vec![cfg.tokens(), d], Init::Zeros),
        ("embed.cls".to_string(), vec![1, d], Init::Zeros),
    ];
    for b in 0..cfg.blocks {
        let n = |f: &str| block_name(b, f);
        s.extend([
            (n("ln1.gamma"), vec![d], Init::Ones),
            (n("ln1.beta"), vec![d], Init::Zeros),
            (n("w_q"), vec![d, d], Init::Glorot),
            (n("w_k"), vec![d, d], Init::Glorot),
            (n("w_v"), vec![d, d], Init::Glorot),
            (n("w_o"), vec![d, d], Init::Glorot),
            (n("ln2.gamma"), vec![d], Init::Ones),
            (n("ln2.beta"), vec![d], Init::Zeros),
            (n("mlp.w1"), vec![h, d], Init::Glorot),
            (n("mlp.b1"), vec![h], Init::Zeros),
            (n("mlp.w2"), vec![d, h], Init::Glorot),
            (n("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    let out = cfg.volume_side.pow(3);
    s.extend([
        ("head.ln.gamma".to_string(), vec![d], Init::Ones),
        ("head.ln.beta".to_string(), vec![d], Init::Zeros),
        ("head.w1".to_string(), vec![h, d], Init::Glorot),
        ("head.b1".to_string(), vec![h], Init::Zeros),
        ("head.w2".to_string(), vec![out, h], Init::Glorot),
        ("head.b2".to_string(), vec![out], Init::Zeros),
    ]);
    s
}

/// Expected (name, shape) pairs for a configuration.
pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    schema(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Total trainable scalars for a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    schema(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Seeded initial weights.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    // schema order is fixed, so the random stream is too
    for (name, shape, init) in schema(cfg) {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Glorot => {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
            }
        };
        map.insert(name, t);
    }
    WeightSet(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            volume_side: 8,
            patch_side: 4,
            gates: 2,
            d_model: 8,
            heads: 2,
            blocks: 2,
        }
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let mut w = init_weights(&small(), 3);
        w.insert("odd", Tensor::new([2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        let bytes = w.to_bytes().unwrap();
        assert_eq!(bytes.len(), w.encoded_len());
        let back = WeightSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.checksum(), w.checksum());
    }

    #[test]
    fn header_is_magic_version_count() {
        let mut w = WeightSet::new();
        w.insert("a", Tensor::scalar(1.5));
        let b = w.to_bytes().unwrap();
        assert_eq!(&b[..4], b"FDWT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 1);
        assert_eq!(b[14], b'a');
        assert_eq!(u32::from_le_bytes(b[15..19].try_into().unwrap()), 0);
        assert_eq!(f64::from_le_bytes(b[19..27].try_into().unwrap()), 1.5);
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        let w = init_weights(&small(), 1);
        let b = w.to_bytes().unwrap();
        assert!(matches!(
            WeightSet::from_bytes(&b[..b.len() - 3]),
            Err(WeightFormatError::Truncated { .. })
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            WeightSet::from_bytes(&bad),
            Err(WeightFormatError::BadMagic(_))
        ));
        let mut bad = b.clone();
        bad[4] = 2;
        assert_eq!(
            WeightSet::from_bytes(&bad),
            Err(WeightFormatError::UnsupportedVersion(2))
        );
        let mut long = b;
        long.push(0);
        assert_eq!(WeightSet::from_bytes(&long), Err(WeightFormatError::TrailingBytes(1)));
    }

    #[test]
    fn init_is_seeded_and_schema_complete() {
        let cfg = small();
        let a = init_weights(&cfg, 7);
        assert_eq!(a, init_weights(&cfg, 7));
        assert_ne!(a, init_weights(&cfg, 8));
        assert_eq!(a.parameter_count(), parameter_count(&cfg));
        let names: Vec<_> = a.names().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let e = a.get("embed.E").unwrap();
        let limit = (6.0f64 / (8 + 64) as f64).sqrt();
        assert!(e.data().iter().all(|v| v.abs() < limit));
        assert!(a.get("embed.pos").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schema_hash_ignores_values() {
        let cfg = small();
        assert_eq!(init_weights(&cfg, 1).schema_hash(), init_weights(&cfg, 2).schema_hash());
        let mut other = cfg;
        other.blocks = 1;
        assert_ne!(
            init_weights(&cfg, 1).schema_hash(),
            init_weights(&other, 1).schema_hash()
        );
    }
}

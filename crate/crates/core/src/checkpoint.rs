//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QWDG"  version:u32  step:u64  seed:u64
//! config_len:u32  config (UTF-8 TOML)
//! n_counters:u32  { name_len:u32 name value:u64 }*
//! n_tensors:u32   { name_len:u32 name rank:u32 dims:u64*rank data:f64*numel }*
//! crc32:u32 of every preceding byte
//! ```
//!
//! Counters and tensors are written in name order, so equal contents give
//! equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QWDG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub config: String,
    pub counters: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.values().map(|t| 8 * t.numel() + 8 * t.rank() + 64).sum();
        let mut out = Vec::with_capacity(payload + self.config.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_bytes(&mut out, self.config.as_bytes());
        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (name, v) in &self.counters {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parse a whole file image; nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes, not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let step = r.u64()?;
        let seed = r.u64()?;
        let config = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let mut counters = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let v = r.u64()?;
            if counters.insert(name.clone(), v).is_some() {
                return Err(Error::Checkpoint(format!("duplicate counter `{name}`")));
            }
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
                numel = numel
                    .checked_mul(d)
                    .filter(|n| n.saturating_mul(8) <= r.remaining())
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is larger than the file")))?;
                dims.push(d);
            }
            let raw = r.take(8 * numel)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(dims, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            step,
            seed,
            config,
            counters,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read(path)?)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing counter `{name}`")))
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn name(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Checkpoint {
            step: 17,
            seed: 42,
            config: "[train]\nsteps = 17\n".into(),
            ..Default::default()
        };
        c.counters.insert("adam.g.step".into(), 17);
        c.tensors.insert("g.head.w".into(), Tensor::randn(vec![4, 1, 3, 3], 1.0, &mut rng));
        c.tensors.insert("g.head.b".into(), Tensor::zeros(vec![4]));
        c.tensors.insert("scalar".into(), Tensor::scalar(-0.0));
        c.tensors.insert("odd".into(), Tensor::from_vec(vec![2], vec![f64::MIN_POSITIVE, 1e300]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (k, t) in &c.tensors {
            let b = &back.tensors[k];
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.qwdg");
        c.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        loaded.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(loaded.group("g.head.").len(), 2);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::UnsupportedVersion { found: 9, expected: 1 })
        ));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    proptest! {
        #[test]
        fn any_single_byte_flip_is_rejected(pos in 0usize..400, bit in 0u8..8) {
            let bytes = sample().to_bytes();
            let pos = pos % bytes.len();
            let mut bad = bytes.clone();
            bad[pos] ^= 1 << bit;
            prop_assert!(Checkpoint::from_bytes(&bad).is_err());
        }
    }
}

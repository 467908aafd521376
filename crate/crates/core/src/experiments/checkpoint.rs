//! Binary checkpoint format, little-endian throughout.
//!
//! ```text
//! magic      "SWMP"
//! version    u32
//! spec       [u8; 32]   SHA-256 of the canonical model spec
//! cycle      u32
//! sparsity   f64
//! tensors    u32 count, then per tensor:
//!              u32 name length, UTF-8 name, u32 ndim, u64 dims[ndim], f32 data
//! mask       u8 present; if 1: u64 prunable count, packed bits (LSB first)
//! config     [u8; 32]   config digest
//! seed       u64
//! checksum   [u8; 32]   SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, ParamVector};
use crate::pruning::Mask;

pub const MAGIC: [u8; 4] = *b"SWMP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec_digest: [u8; 32],
    pub cycle: u32,
    pub sparsity: f64,
    pub tensors: Vec<(String, Tensor)>,
    pub mask: Option<Mask>,
    pub config_digest: [u8; 32],
    pub seed: u64,
}

/// Tensor-name prefix for the saved final parameters of particle `n`.
pub fn particle_prefix(n: usize) -> String {
    format!("p{n}/")
}

impl Checkpoint {
    /// Main parameters plus, optionally, per-particle parameters.
    pub fn from_state(
        model: &Model,
        cycle: usize,
        params: &ParamVector,
        mask: Option<&Mask>,
        particles: &[ParamVector],
        config_digest: [u8; 32],
        seed: u64,
    ) -> Result<Self> {
        let mut tensors = params.unflatten();
        for (i, p) in particles.iter().enumerate() {
            let prefix = particle_prefix(i + 1);
            tensors.extend(p.unflatten().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        let sparsity = mask.map_or(0.0, crate::pruning::sparsity_of);
        if let Some(m) = mask {
            if m.len() != model.prunable().count() {
                return Err(Error::shape("checkpoint mask", &[model.prunable().count()], &[m.len()]));
            }
        }
        Ok(Checkpoint {
            spec_digest: model.spec().digest(),
            cycle: u32::try_from(cycle).map_err(|_| Error::invalid("cycle index too large"))?,
            sparsity,
            tensors,
            mask: mask.cloned(),
            config_digest,
            seed,
        })
    }

    /// Parameters stored under `prefix` (empty for the main solution).
    pub fn params_with_prefix(&self, model: &Model, prefix: &str) -> Result<ParamVector> {
        self.check_spec(model.spec())?;
        let picked: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| {
                let rest = n.strip_prefix(prefix)?;
                (!rest.contains('/')).then(|| (rest.to_string(), t.clone()))
            })
            .collect();
        ParamVector::flatten(model.layout().clone(), &picked)
    }

    pub fn params(&self, model: &Model) -> Result<ParamVector> {
        self.params_with_prefix(model, "")
    }

    pub fn particle_params(&self, model: &Model, n: usize) -> Result<ParamVector> {
        self.params_with_prefix(model, &particle_prefix(n))
    }

    /// Number of saved particles.
    pub fn particle_count(&self) -> usize {
        (1..).take_while(|&n| self.tensors.iter().any(|(name, _)| name.starts_with(&particle_prefix(n)))).count()
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.spec_digest != spec.digest() {
            return Err(Error::DigestMismatch);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.spec_digest);
        b.extend_from_slice(&self.cycle.to_le_bytes());
        b.extend_from_slice(&self.sparsity.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.mask {
            None => b.push(0),
            Some(m) => {
                b.push(1);
                b.extend_from_slice(&(m.len() as u64).to_le_bytes());
                b.extend_from_slice(&m.to_packed());
            }
        }
        b.extend_from_slice(&self.config_digest);
        b.extend_from_slice(&self.seed.to_le_bytes());
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: u32::from_be_bytes(MAGIC),
                found: u32::from_be_bytes(magic.try_into().unwrap()),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let spec_digest = r.array()?;
        let cycle = r.u32()?;
        let sparsity = f64::from_le_bytes(r.array()?);
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(Error::UnexpectedEof)?;
            let raw = r.take(n.checked_mul(4).ok_or(Error::UnexpectedEof)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mask = match r.take(1)?[0] {
            0 => None,
            1 => {
                let p = r.u64()? as usize;
                Some(Mask::from_packed(r.take(p.div_ceil(8))?, p)?)
            }
            other => return Err(Error::Format(format!("bad mask flag {other}"))),
        };
        let config_digest = r.array()?;
        let seed = r.u64()?;
        let body = r.at;
        let stored: [u8; 32] = r.array()?;
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
        }
        if Sha256::digest(&bytes[..body]).as_slice() != stored {
            return Err(Error::Checksum);
        }
        Ok(Checkpoint { spec_digest, cycle, sparsity, tensors, mask, config_digest, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads a checkpoint; with `spec`, refuses one written for another model.
    pub fn load(path: &Path, spec: Option<&ModelSpec>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let ck = Self::from_bytes(&bytes, path).map_err(|e| e.context(path.display().to_string()))?;
        if let Some(s) = spec {
            ck.check_spec(s).map_err(|e| e.context(path.display().to_string()))?;
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(Error::UnexpectedEof)?;
        let s = self.bytes.get(self.at..end).ok_or(Error::UnexpectedEof)?;
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PrunableKinds;
    use std::path::PathBuf;

    fn sample() -> (Model, Checkpoint) {
        let model = Model::new(ModelSpec::mlp(3, &[4], 2), PrunableKinds::Auto).unwrap();
        let w = model.init_params(9);
        let mut bits = vec![true; model.prunable().count()];
        bits[1] = false;
        bits[5] = false;
        let mask = Mask::from_bits(bits);
        let ck = Checkpoint::from_state(&model, 2, &w, Some(&mask), std::slice::from_ref(&w), [7; 32], 42).unwrap();
        (model, ck)
    }

    #[test]
    fn bytes_round_trip() {
        let (model, ck) = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, &PathBuf::from("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params(&model).unwrap(), model.init_params(9));
        assert_eq!(back.particle_count(), 1);
        assert_eq!(back.particle_params(&model, 1).unwrap(), model.init_params(9));
        assert!((back.sparsity - 2.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn refusals() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        let p = PathBuf::from("x");
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], &p), Err(Error::UnexpectedEof)), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, &p), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&ver, &p), Err(Error::Version { found: 2, expected: 1 })));
        let mut flip = bytes.clone();
        let mid = 100; // inside the first tensor payload
        flip[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flip, &p), Err(Error::Checksum)));
        let other = Model::new(ModelSpec::mlp(3, &[5], 2), PrunableKinds::Auto).unwrap();
        assert!(matches!(ck.params(&other), Err(Error::DigestMismatch)));
    }
}

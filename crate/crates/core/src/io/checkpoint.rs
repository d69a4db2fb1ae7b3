//! Model checkpoints: descriptor hash, parameter count, little-endian `f64`
//! parameters, then the packed mask.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic::write_atomic;
use crate::prune::Mask;
use crate::tensor::{Architecture, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub mask: Mask,
}

impl Checkpoint {
    pub fn to_bytes(&self, arch: &Architecture) -> Vec<u8> {
        let n = self.params.len();
        let mut out = Vec::with_capacity(40 + 8 * n + n.div_ceil(8));
        out.extend_from_slice(&arch.descriptor_hash());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for v in self.params.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.mask.pack());
        out
    }

    pub fn from_bytes(arch: &Architecture, bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected: usize| Error::Truncated {
            path: path.into(),
            offset: bytes.len() as u64,
            expected: expected as u64,
        };
        if bytes.len() < 40 {
            return Err(truncated(40));
        }
        if bytes[..32] != arch.descriptor_hash() {
            return Err(Error::Incompatible {
                path: path.into(),
                reason: "checkpoint was written for a different architecture".into(),
            });
        }
        let n = u64::from_le_bytes(bytes[32..40].try_into().unwrap()) as usize;
        if n != arch.num_params() {
            return Err(Error::Corrupt {
                path: path.into(),
                offset: 32,
                reason: format!("parameter count {n} does not match the architecture"),
            });
        }
        let expected = 40 + 8 * n + n.div_ceil(8);
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(Error::Corrupt {
                path: path.into(),
                offset: expected as u64,
                reason: "trailing bytes".into(),
            });
        }
        let values = bytes[40..40 + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = Mask::unpack(&bytes[40 + 8 * n..], n)?;
        Ok(Self {
            params: ModelParams::from_vec(arch, values)?,
            mask: Mask::from_bits(arch, mask.bits().to_vec())?,
        })
    }

    pub fn save(&self, arch: &Architecture, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes(arch))
    }

    pub fn load(arch: &Architecture, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(arch, &bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn sample() -> (Architecture, Checkpoint) {
        let arch = Architecture::mlp(&[5, 4, 3]).unwrap();
        let params = ModelParams::init(&arch, &SeededRng::new(3, 0));
        let bits = arch.prunable_flags().iter().enumerate().map(|(j, p)| !p || j % 3 != 0).collect();
        let mask = Mask::from_bits(&arch, bits).unwrap();
        (arch, Checkpoint { params, mask })
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (arch, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        ck.save(&arch, &a).unwrap();
        let back = Checkpoint::load(&arch, &a).unwrap();
        assert_eq!(back, ck);
        back.save(&arch, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn damaged_files_are_reported() {
        let (arch, ck) = sample();
        let bytes = ck.to_bytes(&arch);
        let p = Path::new("x.ckpt");
        assert!(matches!(
            Checkpoint::from_bytes(&arch, &bytes[..bytes.len() - 1], p),
            Err(Error::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::from_bytes(&arch, &longer, p), Err(Error::Corrupt { .. })));
        let other = Architecture::mlp(&[5, 4, 2]).unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&other, &bytes, p),
            Err(Error::Incompatible { .. })
        ));
    }
}

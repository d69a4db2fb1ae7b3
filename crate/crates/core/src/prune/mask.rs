//! Binary parameter masks and their on-disk form.
//!
//! File layout (all little-endian):
//!
//! | bytes          | content                                        |
//! |----------------|------------------------------------------------|
//! | 8              | `n`, the parameter count, as `u64`             |
//! | `ceil(n / 8)`  | mask bits, bit `j` at byte `j/8`, LSB first    |
//! | 32             | SHA-256 of the architecture descriptor         |

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic::write_atomic;
use crate::tensor::arch::Architecture;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
    ones: usize,
}

impl Mask {
    pub fn ones(n: usize) -> Self {
        Self {
            bits: vec![true; n],
            ones: n,
        }
    }

    /// Builds a mask, rejecting any that prunes a bias or an unprunable weight.
    pub fn from_bits(arch: &Architecture, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "mask has {} entries, architecture has {} parameters",
                bits.len(),
                arch.num_params()
            )));
        }
        let prunable = arch.prunable_flags();
        if let Some(j) = (0..bits.len()).find(|&j| !bits[j] && !prunable[j]) {
            return Err(Error::InvalidArgument(format!(
                "mask clears parameter {j}, which is not prunable"
            )));
        }
        Ok(Self::from_bits_unchecked(bits))
    }

    /// Mask over an arbitrary vector, without architecture checks.
    pub fn from_bits_unchecked(bits: Vec<bool>) -> Self {
        let ones = bits.iter().filter(|b| **b).count();
        Self { bits, ones }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// `||m||_0`.
    pub fn count_ones(&self) -> usize {
        self.ones
    }

    /// `||m||_0 / n`.
    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            1.0
        } else {
            self.ones as f64 / self.bits.len() as f64
        }
    }

    /// Indices of surviving entries, ascending.
    pub fn support(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| self.bits[j]).collect()
    }

    /// `values ⊙ m`.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(&self.bits)
            .map(|(v, &b)| if b { *v } else { 0.0 })
            .collect()
    }

    pub fn apply_in_place(&self, values: &mut [f64]) {
        for (v, &b) in values.iter_mut().zip(&self.bits) {
            if !b {
                *v = 0.0;
            }
        }
    }

    /// Surviving prunable entries.
    pub fn prunable_kept(&self, arch: &Architecture) -> usize {
        arch.prunable_flags()
            .iter()
            .zip(&self.bits)
            .filter(|(f, b)| **f && **b)
            .count()
    }

    /// Surviving fraction among the prunable entries.
    pub fn prunable_density(&self, arch: &Architecture) -> f64 {
        let total = arch.num_prunable();
        if total == 0 {
            return 1.0;
        }
        self.prunable_kept(arch) as f64 / total as f64
    }

    /// True when no entry of `self` is set where `earlier` is clear.
    pub fn is_subset_of(&self, earlier: &Mask) -> bool {
        self.bits.len() == earlier.bits.len()
            && self.bits.iter().zip(&earlier.bits).all(|(a, b)| !*a || *b)
    }

    /// |A ∩ B| / |A ∪ B| over the entries selected by `among`.
    pub fn jaccard(&self, other: &Mask, among: &[bool]) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for ((a, b), sel) in self.bits.iter().zip(&other.bits).zip(among) {
            if !*sel {
                continue;
            }
            inter += usize::from(*a && *b);
            union += usize::from(*a || *b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Bits packed LSB-first, `ceil(n/8)` bytes.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (j, &b) in self.bits.iter().enumerate() {
            if b {
                out[j / 8] |= 1 << (j % 8);
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8], n: usize) -> Result<Self> {
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Shape(format!(
                "{} packed bytes cannot hold exactly {n} mask bits",
                bytes.len()
            )));
        }
        let bits = (0..n).map(|j| bytes[j / 8] & (1 << (j % 8)) != 0).collect();
        Ok(Self::from_bits_unchecked(bits))
    }

    pub fn to_file_bytes(&self, arch: &Architecture) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.bits.len().div_ceil(8) + 32);
        out.extend_from_slice(&(self.bits.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.pack());
        out.extend_from_slice(&arch.descriptor_hash());
        out
    }

    pub fn from_file_bytes(arch: &Architecture, bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                path: path.into(),
                offset: bytes.len() as u64,
                expected: 8,
            });
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let expected = 8 + n.div_ceil(8) + 32;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                path: path.into(),
                offset: bytes.len() as u64,
                expected: expected as u64,
            });
        }
        if bytes.len() > expected {
            return Err(Error::Corrupt {
                path: path.into(),
                offset: expected as u64,
                reason: "trailing bytes after descriptor hash".into(),
            });
        }
        if n != arch.num_params() || bytes[expected - 32..] != arch.descriptor_hash() {
            return Err(Error::Incompatible {
                path: path.into(),
                reason: "mask was produced for a different architecture".into(),
            });
        }
        let mask = Mask::unpack(&bytes[8..8 + n.div_ceil(8)], n)?;
        Mask::from_bits(arch, mask.bits)
    }

    pub fn save(&self, arch: &Architecture, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_file_bytes(arch))
    }

    pub fn load(arch: &Architecture, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Mask::from_file_bytes(arch, &bytes, path)
    }
}

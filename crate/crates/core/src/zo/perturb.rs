use crate::error::{Error, Result};
use crate::prune::Mask;
use crate::tensor::SeededRng;

/// Everything needed to regenerate a device's Gaussian perturbations:
/// a seed, the standard deviation and the sample count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub rng: SeededRng,
    pub sigma: f64,
    pub k: usize,
}

impl PerturbationSpec {
    pub fn new(rng: SeededRng, sigma: f64, k: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "perturbation sigma must be positive, got {sigma}"
            )));
        }
        if k == 0 {
            return Err(Error::InvalidArgument(
                "at least one perturbation sample is required".into(),
            ));
        }
        Ok(Self { rng, sigma, k })
    }

    /// Spec keyed by a bare 64-bit seed, the form in which it travels.
    pub fn from_seed(seed: u64, sigma: f64, k: usize) -> Result<Self> {
        Self::new(SeededRng::new(seed, 0), sigma, k)
    }

    /// Stream of sample `k`.
    pub fn sample_rng(&self, k: usize) -> SeededRng {
        self.rng.derive(&[k as u64])
    }
}

/// Coordinates a perturbation lives on.
#[derive(Debug, Clone, Copy)]
pub enum Support<'a> {
    /// All `n` coordinates.
    Dense(usize),
    /// Only the surviving coordinates of a mask; others stay exactly zero.
    Masked(&'a Mask),
}

impl Support<'_> {
    pub fn len(&self) -> usize {
        match self {
            Support::Dense(n) => *n,
            Support::Masked(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of coordinates that receive noise.
    pub fn active(&self) -> usize {
        match self {
            Support::Dense(n) => *n,
            Support::Masked(m) => m.count_ones(),
        }
    }
}

/// Calls `f(j, z_j)` for every active coordinate `j` in ascending order, where
/// `z` is the standard-normal stream of `rng`. Each normal pair is
/// computed once.
pub(crate) fn for_each_standard_normal(
    rng: &SeededRng,
    support: Support<'_>,
    mut f: impl FnMut(usize, f64),
) {
    match support {
        Support::Dense(n) => {
            let mut z = vec![0.0; n];
            rng.fill_standard_normal(&mut z);
            for (j, v) in z.into_iter().enumerate() {
                f(j, v);
            }
        }
        Support::Masked(mask) => {
            let bits = mask.bits();
            let mut j = 0;
            while j < bits.len() {
                let even = j & !1;
                let odd = even + 1;
                let want_even = bits[even];
                let want_odd = odd < bits.len() && bits[odd];
                if want_even && want_odd {
                    let (a, b) = rng.normal_pair(even as u64 / 2);
                    f(even, a);
                    f(odd, b);
                } else if want_even {
                    f(even, rng.normal_at(even as u64));
                } else if want_odd {
                    f(odd, rng.normal_at(odd as u64));
                }
                j = even + 2;
            }
        }
    }
}

/// `δ_k`: N(0, σ²) on the support, exact zeros elsewhere. Identical to the
/// dense draw multiplied by the mask.
pub fn perturbation(pspec: &PerturbationSpec, k: usize, support: Support<'_>) -> Vec<f64> {
    let mut out = vec![0.0; support.len()];
    let sigma = pspec.sigma;
    for_each_standard_normal(&pspec.sample_rng(k), support, |j, z| out[j] = sigma * z);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_gaussian;

    #[test]
    fn masked_perturbation_equals_masked_dense_draw() {
        let pspec = PerturbationSpec::from_seed(17, 0.5, 3).unwrap();
        let bits: Vec<bool> = (0..101).map(|j| j % 3 != 1 && j % 7 != 0).collect();
        let mask = Mask::from_bits_unchecked(bits);
        for k in 0..3 {
            let dense = seeded_gaussian(&pspec.sample_rng(k), 101, 0.5);
            let expected = mask.apply(&dense);
            let got = perturbation(&pspec, k, Support::Masked(&mask));
            assert!(expected.iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits()));
            let full = perturbation(&pspec, k, Support::Dense(101));
            assert!(full.iter().zip(&dense).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(PerturbationSpec::from_seed(0, 0.0, 1).is_err());
        assert!(PerturbationSpec::from_seed(0, 1.0, 0).is_err());
        assert!(PerturbationSpec::from_seed(0, f64::NAN, 1).is_err());
    }
}

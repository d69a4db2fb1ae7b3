//! How far the sampled perturbations are from isotropic.
//!
//! The estimator's error is controlled by `‖Σ̂ − I‖₂` with
//! `Σ̂ = (1/(Kσ²)) Σ_k δ_k δ_kᵀ`, which concentrates like `√(n/K)`.

use crate::prune::Mask;
use crate::zo::perturb::{for_each_standard_normal, PerturbationSpec, Support};

const TOLERANCE: f64 = 1e-8;
const MAX_ITERS: usize = 200_000;

/// `Σ̂` over the active coordinates of `support`, row-major `m × m` where
/// `m = support.active()`.
pub fn empirical_covariance(pspec: &PerturbationSpec, support: Support<'_>) -> Vec<f64> {
    let m = support.active();
    let mut cov = vec![0.0; m * m];
    let mut delta = vec![0.0; m];
    let sigma = pspec.sigma;
    for k in 0..pspec.k {
        let mut pos = 0;
        for_each_standard_normal(&pspec.sample_rng(k), support, |_, z| {
            delta[pos] = sigma * z;
            pos += 1;
        });
        for a in 0..m {
            let da = delta[a];
            let row = &mut cov[a * m..a * m + a + 1];
            for (c, db) in row.iter_mut().zip(&delta[..=a]) {
                *c += da * db;
            }
        }
    }
    let scale = 1.0 / (pspec.k as f64 * sigma * sigma);
    for a in 0..m {
        for b in 0..=a {
            let v = cov[a * m + b] * scale;
            cov[a * m + b] = v;
            cov[b * m + a] = v;
        }
    }
    cov
}

/// `‖Σ̂ − I‖₂` for `n`-dimensional perturbations drawn from `pspec`.
pub fn covariance_deviation(pspec: &PerturbationSpec, n: usize) -> f64 {
    deviation(pspec, Support::Dense(n))
}

/// `‖Σ̂ − I‖₂` over the surviving coordinates of `mask` only.
pub fn covariance_deviation_masked(pspec: &PerturbationSpec, mask: &Mask) -> f64 {
    deviation(pspec, Support::Masked(mask))
}

fn deviation(pspec: &PerturbationSpec, support: Support<'_>) -> f64 {
    let m = support.active();
    if m == 0 {
        return 0.0;
    }
    let mut a = empirical_covariance(pspec, support);
    for i in 0..m {
        a[i * m + i] -= 1.0;
    }
    spectral_norm_symmetric(&a, m)
}

fn matvec(a: &[f64], m: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in a.chunks_exact(m).zip(out.iter_mut()) {
        *o = row.iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest singular value of a symmetric matrix by power iteration on `A²`,
/// which avoids the sign oscillation when `±λ` share the top magnitude.
pub(crate) fn spectral_norm_symmetric(a: &[f64], m: usize) -> f64 {
    debug_assert_eq!(a.len(), m * m);
    // Deterministic start with no special alignment to coordinate axes.
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + ((i as f64) * 0.618_033_988_75).fract()).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut av = vec![0.0; m];
    let mut aav = vec![0.0; m];
    let mut estimate = 0.0;
    for _ in 0..MAX_ITERS {
        matvec(a, m, &v, &mut av);
        let current = norm(&av);
        if current == 0.0 {
            return 0.0;
        }
        let converged = (current - estimate).abs() <= TOLERANCE * current;
        estimate = current;
        if converged {
            break;
        }
        matvec(a, m, &av, &mut aav);
        let s = norm(&aav);
        if s == 0.0 {
            break;
        }
        for (x, y) in v.iter_mut().zip(&aav) {
            *x = y / s;
        }
    }
    estimate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zo::perturbation;
    use nalgebra::{DMatrix, SymmetricEigen};

    fn oracle_norm(a: &[f64], m: usize) -> f64 {
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, a));
        eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    #[test]
    fn power_iteration_matches_eigendecomposition() {
        for (seed, n, k) in [(1u64, 12usize, 5usize), (2, 30, 300), (3, 8, 8), (4, 25, 2)] {
            let pspec = PerturbationSpec::from_seed(seed, 0.3, k).unwrap();
            let mut a = empirical_covariance(&pspec, Support::Dense(n));
            for i in 0..n {
                a[i * n + i] -= 1.0;
            }
            let got = covariance_deviation(&pspec, n);
            let want = oracle_norm(&a, n);
            assert!((got - want).abs() <= 1e-6 * want.max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn many_samples_approach_identity() {
        let pspec = PerturbationSpec::from_seed(50, 1e-3, 500_000).unwrap();
        let d = covariance_deviation(&pspec, 50);
        assert!(d < 0.05, "deviation {d}");
    }

    #[test]
    fn hundredfold_samples_shrink_deviation_about_tenfold() {
        let trials = 5;
        let small: Vec<f64> = (0..trials)
            .map(|t| covariance_deviation(&PerturbationSpec::from_seed(100 + t, 1e-3, 100).unwrap(), 100))
            .collect();
        let large: Vec<f64> = (0..trials)
            .map(|t| covariance_deviation(&PerturbationSpec::from_seed(200 + t, 1e-3, 10_000).unwrap(), 100))
            .collect();
        let ratio = median(small) / median(large);
        assert!((5.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn single_sample_rank_one_closed_form() {
        let sigma = 1e-3;
        for seed in 0..5 {
            let pspec = PerturbationSpec::from_seed(seed, sigma, 1).unwrap();
            let n = 40;
            let d = perturbation(&pspec, 0, Support::Dense(n));
            let energy = d.iter().map(|v| v * v).sum::<f64>() / (sigma * sigma);
            let dev = covariance_deviation(&pspec, n);
            assert!(dev >= energy - 1.0 - 1e-9);
            // Eigenvalues of uuᵀ − I are ‖u‖² − 1 and −1.
            let exact = (energy - 1.0).abs().max(1.0);
            assert!((dev - exact).abs() < 1e-7 * exact, "{dev} vs {exact}");
        }
    }

    #[test]
    fn deviation_grows_with_dimension() {
        let k = 400;
        let med = |n: usize| {
            median(
                (0..5)
                    .map(|t| covariance_deviation(&PerturbationSpec::from_seed(t, 1e-3, k).unwrap(), n))
                    .collect(),
            )
        };
        assert!(med(10) < med(40));
        assert!(med(40) < med(160));
    }

    #[test]
    fn masked_deviation_tracks_surviving_dimension() {
        let n = 200;
        let k = 2_000;
        let bits: Vec<bool> = (0..n).map(|j| j % 5 == 0).collect();
        let mask = Mask::from_bits_unchecked(bits);
        let live = mask.count_ones();
        let masked = median(
            (0..5)
                .map(|t| covariance_deviation_masked(&PerturbationSpec::from_seed(t, 1e-3, k).unwrap(), &mask))
                .collect(),
        );
        let full = median(
            (0..5)
                .map(|t| covariance_deviation(&PerturbationSpec::from_seed(t, 1e-3, k).unwrap(), n))
                .collect(),
        );
        let bound = |dim: usize| 2.0 * (dim as f64 / k as f64).sqrt() + dim as f64 / k as f64;
        assert!(masked < full);
        assert!(masked <= 1.5 * bound(live), "{masked} vs {}", bound(live));
    }
}

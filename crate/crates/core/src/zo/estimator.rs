//! Stein's-identity gradient estimation from loss differences.
//!
//! A device evaluates `ΔL_k = L(W + δ_k) − L(W)` for `K` Gaussian directions
//! and keeps only those scalars. Anyone holding the [`PerturbationSpec`] can
//! later rebuild every `δ_k` and form `(1/K) Σ_k (δ_k / σ²) ΔL_k`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::prune::Mask;
use crate::tensor::{Architecture, Tensor};
use crate::zo::objective::{ModelObjective, Objective};
use crate::zo::perturb::{for_each_standard_normal, perturbation, PerturbationSpec, Support};

/// How each loss difference is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DifferenceScheme {
    /// `L(W+δ) − L(W)`, one base evaluation shared by all samples.
    #[default]
    Forward,
    /// `(L(W+δ) − L(W−δ)) / 2`.
    Central,
}

/// The `K` loss differences a device uploads, in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaLossVector {
    pub values: Vec<f64>,
    /// `L(W)` on the same data. Kept for round metrics; not part of the upload.
    pub base_loss: f64,
}

impl DeltaLossVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Loss differences of `objective` around `params` for every sample of `pspec`.
///
/// `params` is never modified; each sample works on its own copy. Samples may
/// run in parallel and are returned in index order.
pub fn delta_losses_with<O: Objective>(
    objective: &O,
    params: &[f64],
    support: Support<'_>,
    pspec: &PerturbationSpec,
    scheme: DifferenceScheme,
) -> Result<DeltaLossVector> {
    if params.len() != objective.dim() || support.len() != params.len() {
        return Err(Error::Shape(format!(
            "params {}, objective {}, support {} must agree",
            params.len(),
            objective.dim(),
            support.len()
        )));
    }
    let base_loss = objective.loss(params)?;
    if !base_loss.is_finite() {
        return Err(Error::non_finite("base loss"));
    }
    let values = (0..pspec.k)
        .into_par_iter()
        .map(|k| {
            let delta = perturbation(pspec, k, support);
            let shifted = |sign: f64| -> Vec<f64> {
                params
                    .iter()
                    .zip(&delta)
                    .map(|(w, d)| w + sign * d)
                    .collect()
            };
            let value = match scheme {
                DifferenceScheme::Forward => objective.loss(&shifted(1.0))? - base_loss,
                DifferenceScheme::Central => {
                    0.5 * (objective.loss(&shifted(1.0))? - objective.loss(&shifted(-1.0))?)
                }
            };
            if value.is_finite() {
                Ok(value)
            } else {
                Err(Error::non_finite(format!("loss difference of sample {k}")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DeltaLossVector { values, base_loss })
}

/// Loss differences of a masked network's mean cross entropy on one batch.
/// Perturbations touch only the coordinates that survive `mask`.
pub fn delta_losses(
    arch: &Architecture,
    params: &[f64],
    mask: &Mask,
    batch: &Tensor,
    labels: &[usize],
    pspec: &PerturbationSpec,
    scheme: DifferenceScheme,
) -> Result<DeltaLossVector> {
    let objective = ModelObjective {
        arch,
        mask,
        batch,
        labels,
    };
    delta_losses_with(&objective, params, Support::Masked(mask), pspec, scheme)
}

/// `(1/K) Σ_k (δ_k / σ²) ΔL_k`, with every `δ_k` regenerated from `pspec`.
pub fn stein_estimate(
    dlv: &DeltaLossVector,
    pspec: &PerturbationSpec,
    support: Support<'_>,
) -> Result<Vec<f64>> {
    if dlv.len() != pspec.k {
        return Err(Error::Shape(format!(
            "{} loss differences for {} perturbation samples",
            dlv.len(),
            pspec.k
        )));
    }
    let mut grad = vec![0.0; support.len()];
    let inv_var = 1.0 / (pspec.sigma * pspec.sigma);
    let sigma = pspec.sigma;
    for (k, dl) in dlv.values.iter().enumerate() {
        let coeff = dl * inv_var;
        if coeff == 0.0 {
            continue;
        }
        for_each_standard_normal(&pspec.sample_rng(k), support, |j, z| {
            grad[j] += (sigma * z) * coeff;
        });
    }
    let k = pspec.k as f64;
    for g in &mut grad {
        *g /= k;
    }
    Ok(grad)
}

/// `L(W + step·dir) − L(W)`.
pub fn fd_directional<O: Objective>(
    objective: &O,
    params: &[f64],
    direction: &[f64],
    step: f64,
) -> Result<f64> {
    if step == 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be non-zero".into()));
    }
    if direction.len() != params.len() {
        return Err(Error::Shape(format!(
            "direction length {} differs from params {}",
            direction.len(),
            params.len()
        )));
    }
    let moved: Vec<f64> = params
        .iter()
        .zip(direction)
        .map(|(w, d)| w + step * d)
        .collect();
    Ok(objective.loss(&moved)? - objective.loss(params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use crate::zo::objective::{Linear, Quadratic};

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn weights(n: usize, seed: u64) -> Vec<f64> {
        crate::tensor::seeded_gaussian(&SeededRng::new(seed, 9), n, 1.0)
    }

    #[test]
    fn constant_loss_gives_zero_differences_and_zero_estimate() {
        struct Constant;
        impl Objective for Constant {
            fn dim(&self) -> usize {
                8
            }
            fn loss(&self, _: &[f64]) -> Result<f64> {
                Ok(3.25)
            }
        }
        let pspec = PerturbationSpec::from_seed(1, 1e-3, 5).unwrap();
        let dlv = delta_losses_with(&Constant, &[0.5; 8], Support::Dense(8), &pspec, Default::default())
            .unwrap();
        assert!(dlv.values.iter().all(|v| *v == 0.0));
        let g = stein_estimate(&dlv, &pspec, Support::Dense(8)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_sample_quadratic_matches_closed_form() {
        // ½‖W+δ‖² − ½‖W‖² = δᵀW + ½‖δ‖²
        let w = weights(12, 3);
        let pspec = PerturbationSpec::from_seed(4, 0.1, 1).unwrap();
        let dlv = delta_losses_with(&Quadratic { dim: 12 }, &w, Support::Dense(12), &pspec, Default::default())
            .unwrap();
        let d = perturbation(&pspec, 0, Support::Dense(12));
        let expected: f64 = d.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            + 0.5 * d.iter().map(|v| v * v).sum::<f64>();
        assert!((dlv.values[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn delta_losses_are_deterministic() {
        let w = weights(30, 1);
        let pspec = PerturbationSpec::from_seed(8, 1e-3, 16).unwrap();
        let q = Quadratic { dim: 30 };
        let a = delta_losses_with(&q, &w, Support::Dense(30), &pspec, Default::default()).unwrap();
        let b = delta_losses_with(&q, &w, Support::Dense(30), &pspec, Default::default()).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn quadratic_estimate_converges() {
        let w = weights(20, 5);
        let pspec = PerturbationSpec::from_seed(6, 1e-3, 50_000).unwrap();
        let dlv = delta_losses_with(&Quadratic { dim: 20 }, &w, Support::Dense(20), &pspec, Default::default())
            .unwrap();
        let g = stein_estimate(&dlv, &pspec, Support::Dense(20)).unwrap();
        let err = rel_l2(&g, &w);
        assert!(err < 0.05, "relative error {err}");
    }

    #[test]
    fn linear_estimate_is_unbiased() {
        // Per-sample estimates δ(δᵀg)/σ²; their mean must sit within three
        // standard errors of g in every coordinate.
        let g = vec![1.0, -2.0, 0.5, 0.0, 3.0];
        let lin = Linear { g: g.clone() };
        let samples = 100_000;
        let pspec = PerturbationSpec::from_seed(12, 1e-3, samples).unwrap();
        let dlv = delta_losses_with(&lin, &[0.1; 5], Support::Dense(5), &pspec, Default::default()).unwrap();
        let mut sum = [0.0; 5];
        let mut sumsq = [0.0; 5];
        for k in 0..samples {
            let d = perturbation(&pspec, k, Support::Dense(5));
            for j in 0..5 {
                let e = d[j] / (pspec.sigma * pspec.sigma) * dlv.values[k];
                sum[j] += e;
                sumsq[j] += e * e;
            }
        }
        let n = samples as f64;
        for j in 0..5 {
            let mean = sum[j] / n;
            let var = (sumsq[j] / n - mean * mean) * n / (n - 1.0);
            let se = (var / n).sqrt();
            assert!((mean - g[j]).abs() <= 3.0 * se, "coord {j}: {mean} vs {}", g[j]);
        }
        let est = stein_estimate(&dlv, &pspec, Support::Dense(5)).unwrap();
        for j in 0..5 {
            assert!((est[j] - sum[j] / n).abs() < 1e-9 * (1.0 + est[j].abs()));
        }
    }

    #[test]
    fn central_scheme_cancels_curvature() {
        let w = weights(6, 2);
        let pspec = PerturbationSpec::from_seed(3, 0.2, 4).unwrap();
        let dlv = delta_losses_with(&Quadratic { dim: 6 }, &w, Support::Dense(6), &pspec, DifferenceScheme::Central)
            .unwrap();
        for k in 0..4 {
            let d = perturbation(&pspec, k, Support::Dense(6));
            let lin: f64 = d.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((dlv.values[k] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let pspec = PerturbationSpec::from_seed(1, 1.0, 3).unwrap();
        let dlv = DeltaLossVector {
            values: vec![0.0; 2],
            base_loss: 0.0,
        };
        assert!(stein_estimate(&dlv, &pspec, Support::Dense(4)).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_sample() {
        struct Blowup;
        impl Objective for Blowup {
            fn dim(&self) -> usize {
                2
            }
            fn loss(&self, p: &[f64]) -> Result<f64> {
                Ok(if p[0] > 1.0 { f64::INFINITY } else { 0.0 })
            }
        }
        let pspec = PerturbationSpec::from_seed(1, 10.0, 50).unwrap();
        let err = delta_losses_with(&Blowup, &[0.0, 0.0], Support::Dense(2), &pspec, Default::default())
            .unwrap_err();
        assert!(err.to_string().contains("sample"), "{err}");
    }

    #[test]
    fn regenerated_estimate_equals_stored_perturbation_estimate() {
        use crate::tensor::ModelParams;
        let arch = Architecture::mlp(&[6, 5, 3]).unwrap();
        let params = ModelParams::init(&arch, &SeededRng::new(4, 0)).into_vec();
        let bits: Vec<bool> = arch
            .prunable_flags()
            .iter()
            .enumerate()
            .map(|(j, p)| !p || j % 3 != 0)
            .collect();
        let mask = Mask::from_bits(&arch, bits).unwrap();
        let batch = Tensor::new(vec![4, 6], seeded_gaussian_vec(24)).unwrap();
        let labels = [0, 2, 1, 1];
        let pspec = PerturbationSpec::from_seed(99, 1e-3, 25).unwrap();

        // Keep every δ_k, never regenerate.
        let objective = ModelObjective {
            arch: &arch,
            mask: &mask,
            batch: &batch,
            labels: &labels,
        };
        let base = objective.loss(&params).unwrap();
        let n = params.len();
        let mut stored = Vec::new();
        let mut diffs = Vec::new();
        for k in 0..pspec.k {
            let d = perturbation(&pspec, k, Support::Masked(&mask));
            let moved: Vec<f64> = params.iter().zip(&d).map(|(w, x)| w + x).collect();
            diffs.push(objective.loss(&moved).unwrap() - base);
            stored.push(d);
        }
        let inv_var = 1.0 / (pspec.sigma * pspec.sigma);
        let mut mono = vec![0.0; n];
        for (d, dl) in stored.iter().zip(&diffs) {
            let coeff = dl * inv_var;
            for j in 0..n {
                if mask.get(j) {
                    mono[j] += d[j] * coeff;
                }
            }
        }
        mono.iter_mut().for_each(|g| *g /= pspec.k as f64);

        let dlv = delta_losses(&arch, &params, &mask, &batch, &labels, &pspec, Default::default()).unwrap();
        assert!(dlv.values.iter().zip(&diffs).all(|(a, b)| a.to_bits() == b.to_bits()));
        let regen = stein_estimate(&dlv, &pspec, Support::Masked(&mask)).unwrap();
        assert!(regen.iter().zip(&mono).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(regen.iter().enumerate().all(|(j, g)| mask.get(j) || *g == 0.0));
    }

    fn seeded_gaussian_vec(n: usize) -> Vec<f64> {
        crate::tensor::seeded_gaussian(&SeededRng::new(77, 1), n, 1.0)
    }

    #[test]
    fn fd_directional_behaviour() {
        let lin = Linear {
            g: vec![2.0, -1.0, 0.5],
        };
        let w = [0.3, 0.2, -0.1];
        let dir = [1.0, 1.0, 2.0];
        let v = fd_directional(&lin, &w, &dir, 0.25).unwrap();
        assert!((v - 0.25 * (2.0 - 1.0 + 1.0)).abs() < 1e-15);
        assert_eq!(fd_directional(&lin, &w, &[0.0; 3], 0.1).unwrap(), 0.0);
        assert!(fd_directional(&lin, &w, &dir, 0.0).is_err());

        // Second-order Taylor coefficient of ½‖W‖² along dir is ½ dirᵀdir.
        let q = Quadratic { dim: 3 };
        let slope: f64 = dir.iter().zip(&w).map(|(a, b)| a * b).sum();
        let target = 0.5 * dir.iter().map(|d| d * d).sum::<f64>();
        let mut last = f64::INFINITY;
        for step in [1e-1, 1e-2, 1e-3] {
            let v = fd_directional(&q, &w, &dir, step).unwrap();
            let coeff = (v - step * slope) / (step * step);
            let err = (coeff - target).abs();
            assert!(err <= last + 1e-9);
            last = err;
        }
        assert!(last < 1e-6);
    }
}

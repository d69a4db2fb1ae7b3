//! The NTK trace-norm surrogate and its mask saliency.
//!
//! For a probe batch `x` and a small random `ΔW`,
//! `F = ‖f(x; W⊙m) − f(x; (W+ΔW)⊙m)‖²` tracks the trace norm of the network's
//! tangent kernel and needs two forward passes only. The server differentiates
//! the probe average `I = (1/N) Σ F` with respect to the mask.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::prune::Mask;
use crate::tensor::{
    backward_params, forward_effective, model_forward_traced, Architecture, ModelParams,
    SeededRng, Tensor,
};

/// Where a probe batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeOrigin {
    RealDevice(usize),
    SyntheticGaussian,
}

/// Unlabelled inputs that drive the pruning statistic.
#[derive(Debug, Clone)]
pub struct ProbeBatch {
    pub inputs: Tensor,
    pub origin: ProbeOrigin,
}

impl ProbeBatch {
    pub fn real(device: usize, inputs: Tensor) -> Self {
        Self {
            inputs,
            origin: ProbeOrigin::RealDevice(device),
        }
    }

    /// `batch` i.i.d. standard-normal inputs in the model's input shape.
    pub fn synthetic(arch: &Architecture, batch: usize, rng: &SeededRng) -> Self {
        let mut shape = vec![batch];
        shape.extend_from_slice(arch.input_shape());
        let data = crate::tensor::seeded_gaussian(rng, batch * arch.input_len(), 1.0);
        Self {
            inputs: Tensor::new(shape, data).expect("length matches shape"),
            origin: ProbeOrigin::SyntheticGaussian,
        }
    }

    pub fn samples(&self) -> usize {
        self.inputs.rows()
    }
}

/// Scores of one pruning round.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyReport {
    /// `|∂I/∂W₀ʲ · W₀ʲ|` for every parameter; only prunable entries are ranked.
    pub scores: Vec<f64>,
    /// The surrogate `I` itself at the current mask.
    pub objective: f64,
    /// Round that consumed this report, set by [`prune_round`](crate::prune::prune_round).
    pub round: usize,
    /// Smallest kept score, set by [`prune_round`](crate::prune::prune_round).
    pub threshold: f64,
}

/// `ΔW` for one draw: `eps` times each layer's weight standard deviation times
/// a standard normal. Biases use their layer's deviation.
pub fn pruning_noise(
    arch: &Architecture,
    params: &ModelParams,
    eps: f64,
    rng: &SeededRng,
) -> Result<Vec<f64>> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "pruning noise scale must be non-negative, got {eps}"
        )));
    }
    let scale = params.per_layer_weight_std(arch);
    let mut z = vec![0.0; params.len()];
    rng.fill_standard_normal(&mut z);
    Ok(z.iter().zip(&scale).map(|(z, s)| eps * s * z).collect())
}

fn shifted(params: &ModelParams, noise: &[f64]) -> Vec<f64> {
    params
        .as_slice()
        .iter()
        .zip(noise)
        .map(|(w, d)| w + d)
        .collect()
}

fn squared_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// `F = ‖f(x; W⊙m) − f(x; (W+ΔW)⊙m)‖²` with `ΔW` from [`pruning_noise`].
/// Two forward passes; this is what a device runs.
pub fn fd_squared_norm(
    arch: &Architecture,
    params: &ModelParams,
    mask: &Mask,
    probe: &ProbeBatch,
    eps: f64,
    rng: &SeededRng,
) -> Result<f64> {
    let noise = pruning_noise(arch, params, eps, rng)?;
    let base = crate::tensor::model_forward(arch, params, mask, &probe.inputs)?;
    let moved = ModelParams::from_vec(arch, shifted(params, &noise))?;
    let other = crate::tensor::model_forward(arch, &moved, mask, &probe.inputs)?;
    let f = squared_distance(&base, &other);
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::non_finite("probe squared norm"))
    }
}

/// `I` with a real-valued mask `relaxed`: the first network uses `W⊙relaxed`,
/// the second adds `ΔW⊙support` on top, so the noise does not move with the
/// relaxed mask. At `relaxed = support` this is the average of
/// [`fd_squared_norm`] over probes and draws.
#[allow(clippy::too_many_arguments)]
pub fn pruning_objective(
    arch: &Architecture,
    params: &ModelParams,
    relaxed: &[f64],
    support: &Mask,
    probes: &[ProbeBatch],
    eps: f64,
    mc_samples: usize,
    rng: &SeededRng,
) -> Result<f64> {
    check_probes(probes, mc_samples)?;
    if relaxed.len() != params.len() {
        return Err(Error::Shape("relaxed mask length differs from parameters".into()));
    }
    let total: usize = probes.iter().map(ProbeBatch::samples).sum();
    let mut acc = 0.0;
    for s in 0..mc_samples {
        let noise = pruning_noise(arch, params, eps, &rng.derive(&[s as u64]))?;
        let u: Vec<f64> = params
            .as_slice()
            .iter()
            .zip(relaxed)
            .map(|(w, m)| w * m)
            .collect();
        let v: Vec<f64> = u
            .iter()
            .zip(&noise)
            .zip(support.bits())
            .map(|((u, d), b)| if *b { u + d } else { *u })
            .collect();
        for probe in probes {
            let a = forward_effective(arch, &u, &probe.inputs)?;
            let b = forward_effective(arch, &v, &probe.inputs)?;
            acc += squared_distance(&a, &b);
        }
    }
    Ok(acc / (total * mc_samples) as f64)
}

fn check_probes(probes: &[ProbeBatch], mc_samples: usize) -> Result<()> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("saliency needs at least one probe batch".into()));
    }
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
    }
    Ok(())
}

/// Server-side saliency `|∂I/∂W₀ʲ · W₀ʲ|`, with `I` averaged over every probe
/// sample and `mc_samples` noise draws. Draw `s` uses `rng.derive(&[s])`, the
/// same stream a device passes to [`fd_squared_norm`].
pub fn saliency_scores(
    arch: &Architecture,
    params: &ModelParams,
    mask: &Mask,
    probes: &[ProbeBatch],
    eps: f64,
    mc_samples: usize,
    rng: &SeededRng,
) -> Result<SaliencyReport> {
    check_probes(probes, mc_samples)?;
    let total: usize = probes.iter().map(ProbeBatch::samples).sum();
    let jobs: Vec<(usize, usize)> = (0..mc_samples)
        .flat_map(|s| (0..probes.len()).map(move |p| (s, p)))
        .collect();
    let noises = (0..mc_samples)
        .map(|s| pruning_noise(arch, params, eps, &rng.derive(&[s as u64])))
        .collect::<Result<Vec<_>>>()?;
    let moved = noises
        .iter()
        .map(|noise| ModelParams::from_vec(arch, shifted(params, noise)))
        .collect::<Result<Vec<_>>>()?;

    let parts = jobs
        .par_iter()
        .map(|&(s, p)| {
            let inputs = &probes[p].inputs;
            let (fa, ta) = model_forward_traced(arch, params, mask, inputs)?;
            let (fb, tb) = model_forward_traced(arch, &moved[s], mask, inputs)?;
            let f = squared_distance(&fa, &fb);
            if !f.is_finite() {
                return Err(Error::non_finite("probe squared norm"));
            }
            let cot: Vec<f64> = fa
                .data()
                .iter()
                .zip(fb.data())
                .map(|(a, b)| 2.0 * (a - b))
                .collect();
            let cot = Tensor::new(fa.shape().to_vec(), cot)?;
            let ga = backward_params(arch, params, mask, &ta, &cot)?;
            let gb = backward_params(arch, &moved[s], mask, &tb, &cot)?;
            let g: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a - b).collect();
            Ok((f, g))
        })
        .collect::<Result<Vec<_>>>()?;

    let norm = 1.0 / (total * mc_samples) as f64;
    let mut grad = vec![0.0; params.len()];
    let mut objective = 0.0;
    for (f, g) in parts {
        objective += f;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let scores: Vec<f64> = grad
        .iter()
        .zip(params.as_slice())
        .map(|(g, w)| (g * norm * w).abs())
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::non_finite("saliency scores"));
    }
    Ok(SaliencyReport {
        scores,
        objective: objective * norm,
        round: 0,
        threshold: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LayerSpec;

    fn small() -> (Architecture, ModelParams) {
        let arch = Architecture::mlp(&[4, 8, 6, 3]).unwrap();
        let params = ModelParams::init(&arch, &SeededRng::new(21, 0));
        (arch, params)
    }

    fn probe(arch: &Architecture, rows: usize, seed: u64) -> ProbeBatch {
        let p = ProbeBatch::synthetic(arch, rows, &SeededRng::new(seed, 3));
        ProbeBatch::real(0, p.inputs)
    }

    #[test]
    fn zero_noise_gives_zero() {
        let (arch, params) = small();
        let mask = Mask::ones(arch.num_params());
        let f = fd_squared_norm(&arch, &params, &mask, &probe(&arch, 5, 1), 0.0, &SeededRng::new(1, 1))
            .unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn linear_network_closed_form() {
        let arch = Architecture::new(vec![5], vec![LayerSpec::dense(5, 3).without_bias()]).unwrap();
        let params = ModelParams::init(&arch, &SeededRng::new(2, 0));
        let mask = Mask::ones(arch.num_params());
        let p = probe(&arch, 4, 9);
        let rng = SeededRng::new(7, 7);
        let f = fd_squared_norm(&arch, &params, &mask, &p, 0.3, &rng).unwrap();
        let dw = pruning_noise(&arch, &params, 0.3, &rng).unwrap();
        let mut direct = 0.0;
        for s in 0..4 {
            let x = p.inputs.row(s);
            for o in 0..3 {
                let y: f64 = (0..5).map(|i| dw[o * 5 + i] * x[i]).sum();
                direct += y * y;
            }
        }
        assert!((f - direct).abs() <= 1e-12 * direct, "{f} vs {direct}");
    }

    #[test]
    fn empty_mask_gives_zero() {
        let (arch, params) = small();
        let mask = Mask::from_bits_unchecked(vec![false; arch.num_params()]);
        let f = fd_squared_norm(&arch, &params, &mask, &probe(&arch, 5, 1), 0.5, &SeededRng::new(1, 1))
            .unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn zero_weight_scores_zero() {
        let (arch, params) = small();
        let mut values = params.into_vec();
        values[3] = 0.0;
        values[17] = 0.0;
        let params = ModelParams::from_vec(&arch, values).unwrap();
        let mask = Mask::ones(arch.num_params());
        let r = saliency_scores(&arch, &params, &mask, &[probe(&arch, 6, 2)], 0.01, 1, &SeededRng::new(5, 0))
            .unwrap();
        assert_eq!(r.scores[3], 0.0);
        assert_eq!(r.scores[17], 0.0);
        assert!(r.scores.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn scores_match_mask_finite_differences() {
        let (arch, params) = small();
        assert!(arch.num_params() <= 200);
        let bits: Vec<bool> = arch
            .prunable_flags()
            .iter()
            .enumerate()
            .map(|(j, p)| !p || j % 4 != 1)
            .collect();
        let mask = Mask::from_bits(&arch, bits).unwrap();
        let probes = [probe(&arch, 6, 3), probe(&arch, 4, 4)];
        let rng = SeededRng::new(13, 0);
        let eps = 0.5;
        let r = saliency_scores(&arch, &params, &mask, &probes, eps, 2, &rng).unwrap();
        let base: Vec<f64> = mask.bits().iter().map(|b| f64::from(u8::from(*b))).collect();
        let i0 = pruning_objective(&arch, &params, &base, &mask, &probes, eps, 2, &rng).unwrap();
        assert!((r.objective - i0).abs() <= 1e-12 * i0);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for j in 0..arch.num_params() {
            if !mask.get(j) {
                continue;
            }
            let mut up = base.clone();
            up[j] += h;
            let mut down = base.clone();
            down[j] -= h;
            let fu = pruning_objective(&arch, &params, &up, &mask, &probes, eps, 2, &rng).unwrap();
            let fd = pruning_objective(&arch, &params, &down, &mask, &probes, eps, 2, &rng).unwrap();
            let oracle = ((fu - fd) / (2.0 * h)).abs();
            let rel = (r.scores[j] - oracle).abs() / oracle.max(1e-9);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn duplicated_probe_leaves_scores_unchanged() {
        let (arch, params) = small();
        let mask = Mask::ones(arch.num_params());
        let p = probe(&arch, 5, 8);
        let rng = SeededRng::new(3, 0);
        let one = saliency_scores(&arch, &params, &mask, std::slice::from_ref(&p), 0.01, 1, &rng).unwrap();
        let two = saliency_scores(&arch, &params, &mask, &[p.clone(), p.clone()], 0.01, 1, &rng).unwrap();
        let rows = ProbeBatch::real(0, p.inputs.repeat_rows(2));
        let stacked = saliency_scores(&arch, &params, &mask, &[rows], 0.01, 1, &rng).unwrap();
        for ((a, b), c) in one.scores.iter().zip(&two.scores).zip(&stacked.scores) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            assert!((a - c).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn empty_probe_list_is_rejected() {
        let (arch, params) = small();
        let mask = Mask::ones(arch.num_params());
        assert!(saliency_scores(&arch, &params, &mask, &[], 0.01, 1, &SeededRng::new(0, 0)).is_err());
        let p = [probe(&arch, 2, 1)];
        assert!(saliency_scores(&arch, &params, &mask, &p, 0.01, 0, &SeededRng::new(0, 0)).is_err());
    }
}

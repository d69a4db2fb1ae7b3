//! Self-checks against independent oracles. The `verify` subcommand runs a
//! quick selection; the acceptance suite runs the same checks at full size.

use rand::Rng;

use crate::accounting::{comm_training_round, peak_memory_model, MemoryMode, SEED_BITS, FLOAT_BITS};
use crate::error::Result;
use crate::fed::{
    dirichlet_partition, run_full_vector_round, run_training_round, RoundPlan, ServerState,
    TrainSettings,
};
use crate::io::{gen_synthetic, Checkpoint, ExperimentConfig};
use crate::prune::{
    flntk_oracle, local_ntk_trace, parameter_jacobian, pruning_objective, run_foresight_pruning,
    saliency_scores, check_collapse, prune_round, ForesightConfig, Mask, ProbeBatch, PruneMode,
};
use crate::tensor::{
    backward_params, cross_entropy_grad, cross_entropy_loss, model_forward,
    model_forward_traced, seeded_gaussian, Architecture, LayerSpec, ModelParams, SeededRng, Tensor,
};
use crate::zo::{covariance_deviation, delta_losses_with, stein_estimate, DifferenceScheme, PerturbationSpec, Quadratic, Support};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from(name: &'static str, outcome: Result<(bool, String)>) -> Self {
        match outcome {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty(), "median of nothing");
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// A random MLP or small conv net with at most `max_params` parameters.
pub fn random_small_net(rng: &SeededRng, max_params: usize) -> Architecture {
    let mut s = rng.stream();
    loop {
        let arch = if s.random_bool(0.5) {
            let depth = s.random_range(1..=3);
            let mut widths = vec![s.random_range(2..=6)];
            for _ in 1..depth {
                widths.push(s.random_range(2..=8));
            }
            widths.push(s.random_range(2..=4));
            Architecture::mlp(&widths).expect("positive widths")
        } else {
            let c = s.random_range(1..=2);
            let oc = s.random_range(2..=3);
            let classes = s.random_range(2..=3);
            Architecture::new(
                vec![c, 6, 6],
                vec![
                    LayerSpec::conv(c, oc, 3),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d { window: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::dense(oc * 4, classes),
                ],
            )
            .expect("geometry fits")
        };
        if arch.num_params() <= max_params {
            return arch;
        }
    }
}

fn random_batch(arch: &Architecture, rows: usize, rng: &SeededRng) -> Tensor {
    let mut shape = vec![rows];
    shape.extend_from_slice(arch.input_shape());
    Tensor::new(shape, seeded_gaussian(rng, rows * arch.input_len(), 1.0)).expect("shape")
}

/// Worst relative error between reverse-mode gradients and central finite
/// differences of the mean cross entropy, over `nets` random networks.
/// Relative error is `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn gradient_check(nets: usize, seed: u64) -> Result<f64> {
    let root = SeededRng::new(seed, 0x9d);
    let mut worst: f64 = 0.0;
    for i in 0..nets as u64 {
        let r = root.derive(&[i]);
        let arch = random_small_net(&r.derive(&[0]), 200);
        let params = ModelParams::init(&arch, &r.derive(&[1]));
        let mask = Mask::ones(arch.num_params());
        let x = random_batch(&arch, 3, &r.derive(&[2]));
        let mut labels_rng = r.derive(&[3]).stream();
        let labels: Vec<usize> = (0..3).map(|_| labels_rng.random_range(0..arch.classes())).collect();
        let (logits, trace) = model_forward_traced(&arch, &params, &mask, &x)?;
        let g = backward_params(&arch, &params, &mask, &trace, &cross_entropy_grad(&logits, &labels)?)?;
        let h = 1e-6;
        for j in 0..arch.num_params() {
            let at = |delta: f64| -> Result<f64> {
                let mut v = params.as_slice().to_vec();
                v[j] += delta;
                let p = ModelParams::from_vec(&arch, v)?;
                cross_entropy_loss(&model_forward(&arch, &p, &mask, &x)?, &labels)
            };
            let fd = (at(h)? - at(-h)?) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Runs `rounds` seed-trick rounds next to the full-vector reference and
/// returns the first round whose server states differ in any bit.
pub fn seed_trick_divergence(rounds: usize, seed: u64) -> Result<Option<usize>> {
    let rng = SeededRng::new(seed, 0x5e);
    let arch = Architecture::mlp(&[6, 10, 4])?;
    let data = gen_synthetic(4, 6, 25, 2.0, &rng.derive(&[0]))?;
    let parts = dirichlet_partition(data.labels(), 8, 0.5, &rng.derive(&[1]))?;
    let bits = arch
        .prunable_flags()
        .iter()
        .enumerate()
        .map(|(j, p)| !p || j % 3 != 0)
        .collect();
    let mask = Mask::from_bits(&arch, bits)?;
    let params = ModelParams::init(&arch, &rng.derive(&[2]));
    let settings = TrainSettings {
        k: 8,
        batch_size: 10,
        ..Default::default()
    };
    let mut a = ServerState::new(params, mask, 0.05)?;
    let mut b = a.clone();
    let plans = rng.derive(&[3]);
    for r in 0..rounds {
        let plan = RoundPlan::sample(&plans, r, 8, 4, 0.2)?;
        if plan.dropped.iter().all(|d| *d) {
            continue;
        }
        a = run_training_round(&arch, &a, &plan, &parts, &data, &settings)?.0;
        b = run_full_vector_round(&arch, &b, &plan, &parts, &data, &settings)?;
        let same = a
            .params
            .as_slice()
            .iter()
            .zip(b.params.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits())
            && a.momentum_buffer.iter().zip(&b.momentum_buffer).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.lr.to_bits() == b.lr.to_bits();
        if !same {
            return Ok(Some(r));
        }
    }
    Ok(None)
}

/// Median over `reps` independent draws of `‖Σ̂ − I‖₂` for `k` samples in
/// dimension `n`.
pub fn covariance_median(n: usize, k: usize, reps: usize, seed: u64) -> Result<f64> {
    let rng = SeededRng::new(seed, 0xc0);
    let devs = (0..reps as u64)
        .map(|r| {
            let pspec = PerturbationSpec::new(rng.derive(&[n as u64, k as u64, r]), 1e-3, k)?;
            Ok(covariance_deviation(&pspec, n))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(median(devs))
}

/// Relative L2 error of the one-sided Stein estimate of `∇ ½‖W‖² = W` at a
/// standard-normal `W`.
pub fn stein_quadratic_error(n: usize, k: usize, sigma: f64, seed: u64) -> Result<f64> {
    let rng = SeededRng::new(seed, 0x51);
    let w = seeded_gaussian(&rng.derive(&[0]), n, 1.0);
    let pspec = PerturbationSpec::new(rng.derive(&[1]), sigma, k)?;
    let dlv = delta_losses_with(&Quadratic { dim: n }, &w, Support::Dense(n), &pspec, DifferenceScheme::Forward)?;
    let est = stein_estimate(&dlv, &pspec, Support::Dense(n))?;
    let err: f64 = est.iter().zip(&w).map(|(e, t)| (e - t).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = w.iter().map(|t| t * t).sum::<f64>().sqrt();
    Ok(err / norm)
}

/// Worst relative gap between server saliency scores and central differences
/// of the pruning statistic in the relaxed mask, over surviving weights.
/// Denominators are floored at `1e-6` times the largest score.
pub fn saliency_identity_error(seed: u64) -> Result<f64> {
    let rng = SeededRng::new(seed, 0x5a);
    let arch = Architecture::mlp(&[4, 8, 6, 3])?;
    let params = ModelParams::init(&arch, &rng.derive(&[0]));
    let bits = arch
        .prunable_flags()
        .iter()
        .enumerate()
        .map(|(j, p)| !p || j % 4 != 1)
        .collect();
    let mask = Mask::from_bits(&arch, bits)?;
    let probes = [
        ProbeBatch::real(0, random_batch(&arch, 6, &rng.derive(&[1]))),
        ProbeBatch::real(1, random_batch(&arch, 4, &rng.derive(&[2]))),
    ];
    let (eps, mc) = (0.5, 2);
    let noise_rng = rng.derive(&[3]);
    let report = saliency_scores(&arch, &params, &mask, &probes, eps, mc, &noise_rng)?;
    let base: Vec<f64> = mask.bits().iter().map(|b| f64::from(u8::from(*b))).collect();
    let h = 1e-5;
    // Exactly-zero scores (zero-initialized biases) meet pure rounding noise in
    // the difference quotient, so the floor scales with the largest score.
    let floor = 1e-6 * report.scores.iter().copied().fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for j in mask.support() {
        let mut up = base.clone();
        up[j] += h;
        let mut down = base.clone();
        down[j] -= h;
        let fu = pruning_objective(&arch, &params, &up, &mask, &probes, eps, mc, &noise_rng)?;
        let fd = pruning_objective(&arch, &params, &down, &mask, &probes, eps, mc, &noise_rng)?;
        let oracle = ((fu - fd) / (2.0 * h)).abs();
        worst = worst.max((report.scores[j] - oracle).abs() / oracle.max(report.scores[j]).max(floor));
    }
    Ok(worst)
}

/// What the data-free pruning schedule produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSummary {
    pub kept: usize,
    pub target: f64,
    pub monotone: bool,
    pub collapse: bool,
    /// The round-by-round replay agrees with the library's pruning driver.
    pub matches_driver: bool,
}

/// Replays data-free pruning round by round, checking nesting of masks and
/// layer collapse after each round.
pub fn density_schedule(
    arch: &Architecture,
    rounds: usize,
    density: f64,
    synthetic_batch: usize,
    seed: u64,
) -> Result<ScheduleSummary> {
    let rng = SeededRng::new(seed, 0xd5);
    let params = ModelParams::init(arch, &rng.derive(&[0]));
    let cfg = ForesightConfig {
        mode: PruneMode::DataFree,
        rounds,
        density,
        synthetic_batch,
        ..Default::default()
    };
    let prune_rng = rng.derive(&[1]);
    let mut mask = Mask::ones(arch.num_params());
    let mut monotone = true;
    let mut collapse = false;
    for t in 1..=rounds {
        let round_rng = prune_rng.derive(&[t as u64]);
        let probe = ProbeBatch::synthetic(arch, synthetic_batch, &round_rng.derive(&[1]));
        let mut report = saliency_scores(arch, &params, &mask, &[probe], cfg.eps, cfg.mc_samples, &round_rng.derive(&[2]))?;
        let next = prune_round(arch, &mut report, &mask, t, rounds, density)?;
        monotone &= next.is_subset_of(&mask) && next.prunable_kept(arch) <= mask.prunable_kept(arch);
        collapse |= check_collapse(arch, &next).is_err();
        mask = next;
    }
    let driver = run_foresight_pruning(arch, &params, &cfg, None, &prune_rng)?;
    Ok(ScheduleSummary {
        kept: mask.prunable_kept(arch),
        target: density * arch.num_prunable() as f64,
        monotone,
        collapse,
        matches_driver: driver.mask == mask,
    })
}

/// Checks `‖θ^fl‖_* ≤ Σ_i ‖θ^i‖_*` on random instances with at most three
/// devices, 64 samples and 500 parameters; returns the number of violations.
pub fn flntk_violations(instances: usize, seed: u64) -> Result<usize> {
    let root = SeededRng::new(seed, 0xf1);
    let mut violations = 0;
    for i in 0..instances as u64 {
        let r = root.derive(&[i]);
        let mut s = r.derive(&[0]).stream();
        let arch = loop {
            let widths = [s.random_range(2..=8), s.random_range(2..=16), s.random_range(2..=4)];
            let a = Architecture::mlp(&widths)?;
            if a.num_params() <= 500 {
                break a;
            }
        };
        let params = ModelParams::init(&arch, &r.derive(&[1]));
        let devices = s.random_range(1..=3);
        let mut budget = 64;
        let mut jacobians = Vec::new();
        for d in 0..devices {
            let most = (budget - (devices - d - 1)).min(64 / devices);
            let rows = s.random_range(1..=most.max(1));
            budget -= rows;
            let x = random_batch(&arch, rows, &r.derive(&[2, d as u64]));
            jacobians.push(parameter_jacobian(&arch, &params, &x)?);
        }
        let b = flntk_oracle(&jacobians)?;
        if b.federated > b.local_sum * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Coefficient of variation (population standard deviation over mean).
pub fn dispersion(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Dispersion of per-device local NTK trace norms on a Dirichlet(β) split of
/// the synthetic task, with standard-normal probes and with each device's
/// own rows. Every device contributes exactly `rows` samples (its rows are
/// reused cyclically if it has fewer). Returns `(gaussian, real)`.
pub fn ntk_dispersion(devices: usize, beta: f64, rows: usize, seed: u64) -> Result<(f64, f64)> {
    let rng = SeededRng::new(seed, 0x7e);
    let data = gen_synthetic(10, 32, 200, 3.0, &rng.derive(&[0]))?;
    let parts = dirichlet_partition(data.labels(), devices, beta, &rng.derive(&[1]))?;
    let arch = Architecture::mlp(&[32, 16, 10])?;
    let params = ModelParams::init(&arch, &rng.derive(&[2]));
    let mut gauss = Vec::with_capacity(devices);
    let mut real = Vec::with_capacity(devices);
    for p in &parts {
        let g = random_batch(&arch, rows, &rng.derive(&[3, p.device_id as u64]));
        gauss.push(local_ntk_trace(&arch, &params, p.device_id, &g)?.trace_norm);
        let picks: Vec<usize> = (0..rows).map(|i| p.indices[i % p.len()]).collect();
        real.push(local_ntk_trace(&arch, &params, p.device_id, &data.gather(&picks))?.trace_norm);
    }
    Ok((dispersion(&gauss), dispersion(&real)))
}

fn quick_comm() -> Result<(bool, String)> {
    let (up, down) = comm_training_round(1_000_000, 0.2, 50, crate::accounting::CommMode::SeedTrick, 1)?;
    let ok = up == FLOAT_BITS * 50 + SEED_BITS && down == 6_400_000;
    Ok((ok, format!("up {up} bits, down {down} bits")))
}

fn quick_memory() -> Result<(bool, String)> {
    let arch = Architecture::lenet5(10);
    let ratio = peak_memory_model(&arch, 32, MemoryMode::BpFree, 1.0)
        / peak_memory_model(&arch, 32, MemoryMode::Backprop, 1.0);
    Ok((ratio <= 0.25, format!("bp-free/backprop = {ratio:.4}")))
}

fn quick_round_trips() -> Result<(bool, String)> {
    let cfg = ExperimentConfig::default();
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string())?;
    let arch = Architecture::mlp(&[5, 4, 3])?;
    let ck = Checkpoint {
        params: ModelParams::init(&arch, &SeededRng::new(1, 0)),
        mask: Mask::ones(arch.num_params()),
    };
    let bytes = ck.to_bytes(&arch);
    let again = Checkpoint::from_bytes(&arch, &bytes, std::path::Path::new("<memory>"))?.to_bytes(&arch);
    let ok = back == cfg && again == bytes;
    Ok((ok, "config and checkpoint".into()))
}

/// The fast suite behind `zoprune verify`.
pub fn quick_suite() -> Vec<Check> {
    let mut out = vec![
        Check::from(
            "gradient vs finite differences",
            gradient_check(10, 1).map(|w| (w < 1e-4, format!("max relative error {w:.2e}"))),
        ),
        Check::from(
            "seed trick equals full-vector upload",
            seed_trick_divergence(5, 2).map(|d| (d.is_none(), format!("first divergence {d:?}"))),
        ),
        Check::from(
            "stein estimate on a quadratic",
            stein_quadratic_error(20, 20_000, 1e-3, 3).map(|e| (e < 0.08, format!("relative error {e:.4}"))),
        ),
        Check::from(
            "saliency matches mask differences",
            saliency_identity_error(4).map(|e| (e < 1e-3, format!("max relative error {e:.2e}"))),
        ),
        Check::from(
            "covariance deviation shrinks with samples",
            (|| {
                let a = covariance_median(20, 100, 5, 5)?;
                let b = covariance_median(20, 1000, 5, 5)?;
                Ok((b < a && a <= 5.0 * (20.0f64 / 100.0).sqrt(), format!("{a:.3} -> {b:.3}")))
            })(),
        ),
        Check::from(
            "federated kernel triangle bound",
            flntk_violations(10, 6).map(|v| (v == 0, format!("{v} violations"))),
        ),
        Check::from(
            "pruning schedule",
            Architecture::mlp(&[8, 16, 4]).and_then(|a| density_schedule(&a, 5, 0.3, 32, 7)).map(|s| {
                let ok = (s.kept as f64 - s.target).abs() <= 1.0 && s.monotone && !s.collapse && s.matches_driver;
                (ok, format!("{} kept of target {:.1}", s.kept, s.target))
            }),
        ),
    ];
    out.push(Check::from("communication formulas", quick_comm()));
    out.push(Check::from("memory model", quick_memory()));
    out.push(Check::from("file round trips", quick_round_trips()));
    out
}

//! Reference round in which devices keep every perturbation and upload their
//! whole gradient estimate. It shares no estimator code with the seed-trick
//! round, only the device batch choice and the server step.

use crate::error::{Error, Result};
use crate::fed::round::{aggregation_weights, apply_update, device_batch};
use crate::fed::{ClientPartition, RoundPlan, ServerState, TrainSettings};
use crate::io::DatasetHandle;
use crate::tensor::{cross_entropy_loss, model_forward, Architecture, ModelParams};
use crate::zo::{perturbation, DifferenceScheme, PerturbationSpec, Support};

fn loss_at(
    arch: &Architecture,
    values: Vec<f64>,
    state: &ServerState,
    batch: &crate::tensor::Tensor,
    labels: &[usize],
) -> Result<f64> {
    let params = ModelParams::from_vec(arch, values)?;
    cross_entropy_loss(&model_forward(arch, &params, &state.mask, batch)?, labels)
}

/// Device-side estimate computed from stored perturbations.
pub fn full_vector_estimate(
    arch: &Architecture,
    state: &ServerState,
    partition: &ClientPartition,
    data: &DatasetHandle,
    round: usize,
    seed: u64,
    settings: &TrainSettings,
) -> Result<Vec<f64>> {
    if settings.scheme != DifferenceScheme::Forward {
        return Err(Error::InvalidArgument(
            "the reference round models the one-sided scheme only".into(),
        ));
    }
    let rows = device_batch(round, seed, partition, settings.batch_size);
    let batch = data.gather(&rows);
    let labels = data.labels_of(&rows);
    let pspec = PerturbationSpec::from_seed(seed, settings.sigma, settings.k)?;
    let w = state.params.as_slice();
    let base = loss_at(arch, w.to_vec(), state, &batch, &labels)?;
    let deltas: Vec<Vec<f64>> = (0..settings.k)
        .map(|k| perturbation(&pspec, k, Support::Masked(&state.mask)))
        .collect();
    let mut diffs = Vec::with_capacity(settings.k);
    for d in &deltas {
        let moved: Vec<f64> = w.iter().zip(d).map(|(a, b)| a + b).collect();
        diffs.push(loss_at(arch, moved, state, &batch, &labels)? - base);
    }
    let inv_var = 1.0 / (settings.sigma * settings.sigma);
    let mut est = vec![0.0; w.len()];
    for (d, dl) in deltas.iter().zip(&diffs) {
        let coeff = dl * inv_var;
        if coeff == 0.0 {
            continue;
        }
        for j in 0..w.len() {
            if state.mask.get(j) {
                est[j] += d[j] * coeff;
            }
        }
    }
    est.iter_mut().for_each(|g| *g /= settings.k as f64);
    Ok(est)
}

/// Server step fed by full estimate vectors, in ascending device order.
pub fn run_full_vector_round(
    arch: &Architecture,
    state: &ServerState,
    plan: &RoundPlan,
    partitions: &[ClientPartition],
    data: &DatasetHandle,
    settings: &TrainSettings,
) -> Result<ServerState> {
    let live: Vec<(usize, u64)> = plan
        .selected
        .iter()
        .zip(&plan.seeds)
        .zip(&plan.dropped)
        .filter(|(_, dropped)| !**dropped)
        .map(|((&d, &s), _)| (d, s))
        .collect();
    if live.is_empty() {
        return Err(Error::AllDevicesFailed { round: plan.round });
    }
    let weights = aggregation_weights(&live.iter().map(|(d, _)| partitions[*d].len()).collect::<Vec<_>>());
    let mut grad = vec![0.0; arch.num_params()];
    for ((d, seed), w) in live.iter().zip(&weights) {
        let est = full_vector_estimate(arch, state, &partitions[*d], data, plan.round, *seed, settings)?;
        for (g, e) in grad.iter_mut().zip(&est) {
            *g += w * e;
        }
    }
    Ok(apply_update(state, &grad, settings))
}

//! FedAvg with true gradients: local momentum SGD, then a sample-weighted
//! average of the local models.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::accounting::{masked_model_bits, FLOAT_BITS};
use crate::error::{Error, Result};
use crate::fed::round::aggregation_weights;
use crate::fed::{ClientPartition, RoundOutcome, RoundPlan, ServerState, TrainSettings};
use crate::io::DatasetHandle;
use crate::tensor::{
    backward_params, count_forward_flops_masked, cross_entropy_grad, cross_entropy_loss,
    model_forward_traced, Architecture, SeededRng,
};

/// Reverse mode is modelled as twice the forward cost.
const BACKPROP_FLOPS_FACTOR: f64 = 3.0;

struct LocalResult {
    params: Vec<f64>,
    loss: f64,
    steps_samples: usize,
}

fn local_train(
    arch: &Architecture,
    state: &ServerState,
    partition: &ClientPartition,
    data: &DatasetHandle,
    seed: u64,
    epochs: usize,
    settings: &TrainSettings,
) -> Result<LocalResult> {
    let mut params = state.params.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let mut seen = 0usize;
    for epoch in 0..epochs {
        let mut order = partition.indices.clone();
        order.shuffle(&mut SeededRng::new(seed, epoch as u64).stream());
        for rows in order.chunks(settings.batch_size) {
            let x = data.gather(rows);
            let y = data.labels_of(rows);
            let (logits, trace) = model_forward_traced(arch, &params, &state.mask, &x)?;
            loss_sum += cross_entropy_loss(&logits, &y)?;
            batches += 1;
            seen += rows.len();
            let dl = cross_entropy_grad(&logits, &y)?;
            let grad = backward_params(arch, &params, &state.mask, &trace, &dl)?;
            let w = params.as_mut_slice();
            for j in 0..w.len() {
                if !state.mask.get(j) {
                    continue;
                }
                let g = grad[j] + settings.weight_decay * w[j];
                velocity[j] = settings.momentum * velocity[j] + g;
                w[j] -= state.lr * velocity[j];
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite(format!(
                    "local weights of device {}",
                    partition.device_id
                )));
            }
        }
    }
    Ok(LocalResult {
        params: params.into_vec(),
        loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
        steps_samples: seen,
    })
}

/// One FedAvg round over the plan's surviving devices. Each runs `epochs`
/// passes over its data; the server moves to `W + Σ_i (N_i/N)(W_i − W)` on
/// the unmasked coordinates.
pub fn run_fedavg_baseline(
    arch: &Architecture,
    state: &ServerState,
    plan: &RoundPlan,
    partitions: &[ClientPartition],
    data: &DatasetHandle,
    epochs: usize,
    settings: &TrainSettings,
) -> Result<(ServerState, RoundOutcome)> {
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
    let results = live
        .par_iter()
        .map(|&(d, seed)| {
            let part = partitions
                .get(d)
                .ok_or_else(|| Error::InvalidArgument(format!("no partition for device {d}")))?;
            local_train(arch, state, part, data, seed, epochs, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = aggregation_weights(&live.iter().map(|(d, _)| partitions[*d].len()).collect::<Vec<_>>());

    let mut next = state.clone();
    let base = state.params.as_slice();
    let w = next.params.as_mut_slice();
    let mut step = vec![0.0; w.len()];
    for (r, wt) in results.iter().zip(&weights) {
        for j in 0..step.len() {
            step[j] += wt * (r.params[j] - base[j]);
        }
    }
    for j in 0..w.len() {
        if state.mask.get(j) {
            w[j] += step[j];
        }
    }
    next.lr = state.lr * settings.lr_decay;
    next.round = state.round + 1;

    let n = arch.num_params();
    let model_bits = masked_model_bits(n, state.mask.density());
    let per_sample = count_forward_flops_masked(arch, &state.mask);
    let outcome = RoundOutcome {
        loss: results.iter().zip(&weights).map(|(r, wt)| wt * r.loss).sum(),
        participants: live.iter().map(|(d, _)| *d).collect(),
        up_bits: live.len() as u64 * model_bits,
        down_bits: plan.selected.len() as u64 * model_bits,
        device_flops: results
            .iter()
            .map(|r| BACKPROP_FLOPS_FACTOR * r.steps_samples as f64 * per_sample)
            .sum(),
    };
    debug_assert_eq!(FLOAT_BITS, 32);
    Ok((next, outcome))
}

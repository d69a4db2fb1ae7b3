//! One synchronous round of backprop-free federated training.

use rayon::prelude::*;

use crate::accounting::{comm_training_round, CommMode};
use crate::error::{Error, Result};
use crate::fed::ClientPartition;
use crate::io::DatasetHandle;
use crate::prune::Mask;
use crate::tensor::{count_forward_flops_masked, Architecture, ModelParams, SeededRng};
use crate::zo::{
    delta_losses, stein_estimate, DeltaLossVector, DifferenceScheme, PerturbationSpec, Support,
};

const SEED_LABEL: u64 = 0x5eed;
const BATCH_LABEL: u64 = 0xba7c;
const DROP_LABEL: u64 = 0xd209;

/// Devices chosen for a round and the seeds they perturb with.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    /// Ascending device ids.
    pub selected: Vec<usize>,
    /// `seeds[i]` belongs to `selected[i]`; pairwise distinct.
    pub seeds: Vec<u64>,
    /// `dropped[i]` marks a simulated failure of `selected[i]`.
    pub dropped: Vec<bool>,
}

impl RoundPlan {
    /// Samples `per_round` of `devices` without replacement and derives each
    /// one's seed from `(round, device)`.
    pub fn sample(
        rng: &SeededRng,
        round: usize,
        devices: usize,
        per_round: usize,
        dropout: f64,
    ) -> Result<Self> {
        if per_round == 0 || per_round > devices {
            return Err(Error::InvalidArgument(format!(
                "cannot select {per_round} of {devices} devices"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        let r = round as u64;
        let selected = rng.derive(&[r]).sample_indices(devices, per_round);
        let mut seeds: Vec<u64> = Vec::with_capacity(per_round);
        for &d in &selected {
            let mut salt = 0;
            let mut s = rng.derive_seed(&[r, d as u64, SEED_LABEL]);
            while seeds.contains(&s) {
                salt += 1;
                s = rng.derive_seed(&[r, d as u64, SEED_LABEL, salt]);
            }
            seeds.push(s);
        }
        let dropped = selected
            .iter()
            .map(|&d| dropout > 0.0 && rng.derive(&[r, d as u64, DROP_LABEL]).uniform_at(0) <= dropout)
            .collect();
        Ok(Self {
            round,
            selected,
            seeds,
            dropped,
        })
    }

    /// Plan without dropout over explicit devices and seeds.
    pub fn fixed(round: usize, selected: Vec<usize>, seeds: Vec<u64>) -> Self {
        let dropped = vec![false; selected.len()];
        Self {
            round,
            selected,
            seeds,
            dropped,
        }
    }
}

/// Everything the server keeps between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: ModelParams,
    pub mask: Mask,
    /// Zero wherever the mask is zero.
    pub momentum_buffer: Vec<f64>,
    pub lr: f64,
    pub round: usize,
}

impl ServerState {
    /// Fresh state; parameters outside the mask are kept as given.
    pub fn new(params: ModelParams, mask: Mask, lr: f64) -> Result<Self> {
        if params.len() != mask.len() {
            return Err(Error::Shape("mask and parameters differ in length".into()));
        }
        let n = params.len();
        Ok(Self {
            params,
            mask,
            momentum_buffer: vec![0.0; n],
            lr,
            round: 0,
        })
    }
}

/// Optimizer and estimator settings of the training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub k: usize,
    pub sigma: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub scheme: DifferenceScheme,
    pub comm: CommMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            k: 50,
            sigma: 1e-3,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-3,
            lr_decay: 0.998,
            scheme: DifferenceScheme::Forward,
            comm: CommMode::SeedTrick,
        }
    }
}

/// Costs and statistics of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    /// Sample-weighted training loss reported by surviving devices.
    pub loss: f64,
    pub participants: Vec<usize>,
    pub up_bits: u64,
    pub down_bits: u64,
    pub device_flops: f64,
}

/// Rows of `partition` a device trains on this round.
pub(crate) fn device_batch(
    plan_round: usize,
    device_seed: u64,
    partition: &ClientPartition,
    batch_size: usize,
) -> Vec<usize> {
    let take = batch_size.min(partition.len());
    SeededRng::new(device_seed, BATCH_LABEL)
        .derive(&[plan_round as u64])
        .sample_indices(partition.len(), take)
        .into_iter()
        .map(|i| partition.indices[i])
        .collect()
}

/// What a device sends back: its loss differences and sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceUpload {
    pub device: usize,
    pub seed: u64,
    pub samples: usize,
    pub dlv: DeltaLossVector,
}

/// Device side of a round: `K` loss differences on one local mini-batch.
pub fn device_step(
    arch: &Architecture,
    state: &ServerState,
    partition: &ClientPartition,
    data: &DatasetHandle,
    round: usize,
    seed: u64,
    settings: &TrainSettings,
) -> Result<DeviceUpload> {
    let rows = device_batch(round, seed, partition, settings.batch_size);
    let batch = data.gather(&rows);
    let labels = data.labels_of(&rows);
    let pspec = PerturbationSpec::from_seed(seed, settings.sigma, settings.k)?;
    let dlv = delta_losses(
        arch,
        state.params.as_slice(),
        &state.mask,
        &batch,
        &labels,
        &pspec,
        settings.scheme,
    )?;
    Ok(DeviceUpload {
        device: partition.device_id,
        seed,
        samples: partition.len(),
        dlv,
    })
}

/// Aggregation weights `N_i / Σ N` over the surviving devices.
pub fn aggregation_weights(samples: &[usize]) -> Vec<f64> {
    let total: usize = samples.iter().sum();
    samples.iter().map(|&s| s as f64 / total as f64).collect()
}

/// Momentum SGD with weight decay on the unmasked coordinates, then one
/// learning-rate decay step.
pub fn apply_update(state: &ServerState, grad: &[f64], settings: &TrainSettings) -> ServerState {
    let mut next = state.clone();
    let w = next.params.as_mut_slice();
    for j in 0..w.len() {
        if !state.mask.get(j) {
            continue;
        }
        let g = grad[j] + settings.weight_decay * w[j];
        let v = settings.momentum * next.momentum_buffer[j] + g;
        next.momentum_buffer[j] = v;
        w[j] -= state.lr * v;
    }
    next.lr = state.lr * settings.lr_decay;
    next.round = state.round + 1;
    next
}

fn round_costs(
    arch: &Architecture,
    state: &ServerState,
    plan: &RoundPlan,
    survivors: &[DeviceUpload],
    settings: &TrainSettings,
) -> Result<(u64, u64, f64)> {
    let n = arch.num_params();
    let d = state.mask.density();
    let up = comm_training_round(n, d, settings.k, settings.comm, survivors.len())?.0;
    let down = comm_training_round(n, d, settings.k, settings.comm, plan.selected.len())?.1;
    let per_sample = count_forward_flops_masked(arch, &state.mask);
    let forwards = match settings.scheme {
        DifferenceScheme::Forward => settings.k + 1,
        DifferenceScheme::Central => 2 * settings.k + 1,
    };
    let flops = survivors
        .iter()
        .map(|u| {
            let batch = settings.batch_size.min(u.samples);
            (forwards * batch) as f64 * per_sample
        })
        .sum();
    Ok((up, down, flops))
}

fn run_devices(
    arch: &Architecture,
    state: &ServerState,
    plan: &RoundPlan,
    partitions: &[ClientPartition],
    data: &DatasetHandle,
    settings: &TrainSettings,
) -> Result<Vec<DeviceUpload>> {
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
    live.par_iter()
        .map(|&(d, seed)| {
            let part = partitions
                .get(d)
                .ok_or_else(|| Error::InvalidArgument(format!("no partition for device {d}")))?;
            device_step(arch, state, part, data, plan.round, seed, settings)
        })
        .collect()
}

/// One round with the seed trick: devices return scalars only, the server
/// regenerates every perturbation from the device seeds, aggregates
/// `Σ_i (N_i/N) ĝ_i` in ascending device order and takes a momentum step.
pub fn run_training_round(
    arch: &Architecture,
    state: &ServerState,
    plan: &RoundPlan,
    partitions: &[ClientPartition],
    data: &DatasetHandle,
    settings: &TrainSettings,
) -> Result<(ServerState, RoundOutcome)> {
    let uploads = run_devices(arch, state, plan, partitions, data, settings)?;
    let weights = aggregation_weights(&uploads.iter().map(|u| u.samples).collect::<Vec<_>>());
    let mut grad = vec![0.0; arch.num_params()];
    let mut loss = 0.0;
    for (u, w) in uploads.iter().zip(&weights) {
        let pspec = PerturbationSpec::from_seed(u.seed, settings.sigma, settings.k)?;
        let est = stein_estimate(&u.dlv, &pspec, Support::Masked(&state.mask))?;
        for (g, e) in grad.iter_mut().zip(&est) {
            *g += w * e;
        }
        loss += w * u.dlv.base_loss;
    }
    let (up_bits, down_bits, device_flops) = round_costs(arch, state, plan, &uploads, settings)?;
    let next = apply_update(state, &grad, settings);
    Ok((
        next,
        RoundOutcome {
            loss,
            participants: uploads.iter().map(|u| u.device).collect(),
            up_bits,
            down_bits,
            device_flops,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::gen_synthetic;

    fn setup(devices: usize) -> (Architecture, DatasetHandle, Vec<ClientPartition>, ServerState) {
        let arch = Architecture::mlp(&[6, 8, 3]).unwrap();
        let data = gen_synthetic(3, 6, 30, 3.0, &SeededRng::new(1, 0)).unwrap();
        let parts = crate::fed::dirichlet_partition(data.labels(), devices, 1.0, &SeededRng::new(2, 0)).unwrap();
        let params = ModelParams::init(&arch, &SeededRng::new(3, 0));
        let state = ServerState::new(params, Mask::ones(arch.num_params()), 0.05).unwrap();
        (arch, data, parts, state)
    }

    #[test]
    fn plans_are_distinct_and_sorted() {
        let rng = SeededRng::new(9, 0);
        for r in 0..20 {
            let p = RoundPlan::sample(&rng, r, 30, 7, 0.0).unwrap();
            assert!(p.selected.windows(2).all(|w| w[0] < w[1]));
            let mut s = p.seeds.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 7);
            assert!(p.dropped.iter().all(|d| !d));
        }
        assert!(RoundPlan::sample(&rng, 0, 3, 4, 0.0).is_err());
        assert!(RoundPlan::sample(&rng, 0, 3, 2, 1.0).is_err());
    }

    #[test]
    fn single_device_update_is_plain_estimate() {
        let (arch, data, _, state) = setup(1);
        let all = ClientPartition {
            device_id: 0,
            indices: (0..data.len()).collect(),
            label_histogram: vec![30; 3],
        };
        let settings = TrainSettings {
            momentum: 0.0,
            weight_decay: 0.0,
            k: 8,
            ..Default::default()
        };
        let plan = RoundPlan::fixed(0, vec![0], vec![77]);
        let (next, _) = run_training_round(&arch, &state, &plan, std::slice::from_ref(&all), &data, &settings).unwrap();
        let up = device_step(&arch, &state, &all, &data, 0, 77, &settings).unwrap();
        let pspec = PerturbationSpec::from_seed(77, settings.sigma, 8).unwrap();
        let g = stein_estimate(&up.dlv, &pspec, Support::Masked(&state.mask)).unwrap();
        for (j, gj) in g.iter().enumerate() {
            let expected = state.params.as_slice()[j] - state.lr * gj;
            assert_eq!(next.params.as_slice()[j].to_bits(), expected.to_bits());
        }
        assert_eq!(next.lr, state.lr * 0.998);
    }

    #[test]
    fn identical_devices_aggregate_to_either_estimate() {
        let (arch, data, parts, state) = setup(2);
        let twin = vec![
            parts[0].clone(),
            ClientPartition {
                device_id: 1,
                ..parts[0].clone()
            },
        ];
        let settings = TrainSettings {
            momentum: 0.0,
            weight_decay: 0.0,
            k: 4,
            ..Default::default()
        };
        let plan = RoundPlan::fixed(3, vec![0, 1], vec![5, 5]);
        let (both, _) = run_training_round(&arch, &state, &plan, &twin, &data, &settings).unwrap();
        let solo = RoundPlan::fixed(3, vec![0], vec![5]);
        let (one, _) = run_training_round(&arch, &state, &solo, &twin[..1], &data, &settings).unwrap();
        for (a, b) in both.params.as_slice().iter().zip(one.params.as_slice()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn masked_coordinates_never_move() {
        let (arch, data, parts, state) = setup(4);
        let bits: Vec<bool> = arch
            .prunable_flags()
            .iter()
            .enumerate()
            .map(|(j, p)| !p || j % 3 == 0)
            .collect();
        let mask = Mask::from_bits(&arch, bits).unwrap();
        let mut state = ServerState::new(state.params.clone(), mask.clone(), 0.1).unwrap();
        let start = state.params.clone();
        let rng = SeededRng::new(4, 0);
        let settings = TrainSettings {
            k: 5,
            ..Default::default()
        };
        for r in 0..5 {
            let plan = RoundPlan::sample(&rng, r, 4, 2, 0.0).unwrap();
            state = run_training_round(&arch, &state, &plan, &parts, &data, &settings).unwrap().0;
        }
        for j in 0..mask.len() {
            if !mask.get(j) {
                assert_eq!(state.params.as_slice()[j].to_bits(), start.as_slice()[j].to_bits());
                assert_eq!(state.momentum_buffer[j], 0.0);
            }
        }
        assert_ne!(state.params, start);
    }

    #[test]
    fn dropout_excludes_devices_and_renormalizes() {
        let (arch, data, parts, state) = setup(4);
        let settings = TrainSettings {
            k: 3,
            ..Default::default()
        };
        let mut plan = RoundPlan::fixed(0, vec![0, 1, 2], vec![1, 2, 3]);
        plan.dropped = vec![false, true, false];
        let (_, out) = run_training_round(&arch, &state, &plan, &parts, &data, &settings).unwrap();
        assert_eq!(out.participants, vec![0, 2]);
        assert_eq!(out.up_bits, 2 * (32 * 3 + 64));
        assert_eq!(out.down_bits, 3 * 32 * arch.num_params() as u64);
        let w = aggregation_weights(&[parts[0].len(), parts[2].len()]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        plan.dropped = vec![true; 3];
        assert!(matches!(
            run_training_round(&arch, &state, &plan, &parts, &data, &settings),
            Err(Error::AllDevicesFailed { round: 0 })
        ));
    }
}

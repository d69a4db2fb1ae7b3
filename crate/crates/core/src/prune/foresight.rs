//! The multi-round pruning phase that runs before any training.

use crate::error::{Error, Result};
use crate::prune::{check_collapse, prune_round, saliency_scores, Mask, ProbeBatch};
use crate::tensor::{count_forward_flops_masked, Architecture, ModelParams, SeededRng};

/// Which inputs drive the pruning statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// Sampled devices evaluate the statistic on their own data.
    RealData,
    /// The server probes with standard-normal inputs; devices are idle.
    DataFree,
}

/// Supplies a device's probe inputs for a pruning round.
pub trait ProbeSource: Sync {
    fn devices(&self) -> usize;
    fn probe(&self, device: usize, round: usize) -> Result<ProbeBatch>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForesightConfig {
    pub mode: PruneMode,
    /// `T_p`.
    pub rounds: usize,
    /// Target prunable density `d`.
    pub density: f64,
    /// `G_p`, devices sampled per round in real-data mode.
    pub devices_per_round: usize,
    /// Noise scale relative to each layer's weight deviation.
    pub eps: f64,
    pub mc_samples: usize,
    /// Probe batch size in data-free mode.
    pub synthetic_batch: usize,
}

impl Default for ForesightConfig {
    fn default() -> Self {
        Self {
            mode: PruneMode::DataFree,
            rounds: 50,
            density: 0.2,
            devices_per_round: 10,
            eps: 0.01,
            mc_samples: 1,
            synthetic_batch: 256,
        }
    }
}

impl ForesightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "density must lie in (0, 1], got {}",
                self.density
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        if self.mc_samples == 0 || self.synthetic_batch == 0 || self.devices_per_round == 0 {
            return Err(Error::InvalidArgument(
                "mc_samples, synthetic_batch and devices_per_round must be positive".into(),
            ));
        }
        if self.density < 1.0 && self.rounds == 0 {
            return Err(Error::InvalidArgument(
                "density below 1 needs at least one pruning round".into(),
            ));
        }
        Ok(())
    }
}

/// What one pruning round cost and produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneRoundLog {
    pub round: usize,
    /// Devices that took part, ascending. Empty in data-free mode.
    pub selected: Vec<usize>,
    /// One 32-bit statistic per device and noise draw.
    pub up_bits: u64,
    /// The dense 32-bit model sent to each participating device.
    pub down_bits: u64,
    /// Forward-pass FLOPs spent on devices.
    pub device_flops: f64,
    pub prunable_density: f64,
    pub threshold: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct ForesightOutcome {
    pub mask: Mask,
    pub log: Vec<PruneRoundLog>,
}

/// Runs `T_p` rounds of saliency scoring and scheduled pruning from the
/// all-ones mask. `source` is required in real-data mode and ignored otherwise.
///
/// Round `t` uses `rng.derive(&[t])`; device sampling, synthetic probes and
/// noise draws are separate children of that stream.
pub fn run_foresight_pruning(
    arch: &Architecture,
    params: &ModelParams,
    cfg: &ForesightConfig,
    source: Option<&dyn ProbeSource>,
    rng: &SeededRng,
) -> Result<ForesightOutcome> {
    cfg.validate()?;
    let n = arch.num_params();
    let mut mask = Mask::ones(n);
    let mut log = Vec::new();
    if cfg.density == 1.0 {
        return Ok(ForesightOutcome { mask, log });
    }
    let source = match (cfg.mode, source) {
        (PruneMode::RealData, None) => {
            return Err(Error::InvalidArgument(
                "real-data pruning needs device probes".into(),
            ))
        }
        (PruneMode::RealData, Some(s)) => Some(s),
        (PruneMode::DataFree, _) => None,
    };
    for t in 1..=cfg.rounds {
        let round_rng = rng.derive(&[t as u64]);
        let (selected, probes) = match source {
            Some(src) => {
                let m = src.devices();
                if m == 0 {
                    return Err(Error::InvalidArgument("no devices to probe".into()));
                }
                let selected = round_rng
                    .derive(&[0])
                    .sample_indices(m, cfg.devices_per_round.min(m));
                let probes = selected
                    .iter()
                    .map(|&i| src.probe(i, t))
                    .collect::<Result<Vec<_>>>()?;
                (selected, probes)
            }
            None => (
                Vec::new(),
                vec![ProbeBatch::synthetic(arch, cfg.synthetic_batch, &round_rng.derive(&[1]))],
            ),
        };
        let mut report = saliency_scores(
            arch,
            params,
            &mask,
            &probes,
            cfg.eps,
            cfg.mc_samples,
            &round_rng.derive(&[2]),
        )?;
        let (up_bits, down_bits, device_flops) = if source.is_some() {
            let devices = selected.len() as u64;
            let samples: usize = probes.iter().map(ProbeBatch::samples).sum();
            let per_sample = count_forward_flops_masked(arch, &mask);
            (
                devices * 32 * cfg.mc_samples as u64,
                devices * 32 * n as u64,
                2.0 * (cfg.mc_samples * samples) as f64 * per_sample,
            )
        } else {
            (0, 0, 0.0)
        };
        let next = prune_round(arch, &mut report, &mask, t, cfg.rounds, cfg.density)?;
        debug_assert!(next.is_subset_of(&mask));
        mask = next;
        log.push(PruneRoundLog {
            round: t,
            selected,
            up_bits,
            down_bits,
            device_flops,
            prunable_density: mask.prunable_density(arch),
            threshold: report.threshold,
            objective: report.objective,
        });
    }
    check_collapse(arch, &mask)?;
    Ok(ForesightOutcome { mask, log })
}

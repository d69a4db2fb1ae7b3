use crate::error::{Error, Result};
use crate::prune::{Mask, SaliencyReport};
use crate::tensor::{Architecture, ParamRole};

/// Prunable weights kept after round `t` of `rounds`: `round(d^{t/T} · n_prunable)`.
pub fn scheduled_keep(n_prunable: usize, t: usize, rounds: usize, density: f64) -> usize {
    let frac = density.powf(t as f64 / rounds as f64);
    ((frac * n_prunable as f64).round() as usize).min(n_prunable)
}

/// One step of the exponential density schedule.
///
/// Among prunable weights that are still alive, the highest-scoring
/// `scheduled_keep(..)` survive; equal scores favour the lower flat index.
/// Dead weights never come back. The report's `round` and `threshold` are
/// filled in.
pub fn prune_round(
    arch: &Architecture,
    report: &mut SaliencyReport,
    mask: &Mask,
    t: usize,
    rounds: usize,
    density: f64,
) -> Result<Mask> {
    if rounds == 0 || t > rounds {
        return Err(Error::InvalidArgument(format!(
            "pruning round {t} outside 0..={rounds}"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    if report.scores.len() != mask.len() || mask.len() != arch.num_params() {
        return Err(Error::Shape("scores, mask and architecture disagree in length".into()));
    }
    let flags = arch.prunable_flags();
    let keep = scheduled_keep(arch.num_prunable(), t, rounds, density);
    let mut alive: Vec<usize> = (0..mask.len()).filter(|&j| flags[j] && mask.get(j)).collect();
    report.round = t;
    if keep >= alive.len() {
        report.threshold = alive
            .iter()
            .map(|&j| report.scores[j])
            .fold(f64::INFINITY, f64::min);
        return Ok(mask.clone());
    }
    alive.sort_by(|&a, &b| {
        report.scores[b]
            .total_cmp(&report.scores[a])
            .then(a.cmp(&b))
    });
    report.threshold = if keep == 0 {
        f64::INFINITY
    } else {
        report.scores[alive[keep - 1]]
    };
    let mut bits = mask.bits().to_vec();
    for &j in &alive[keep..] {
        bits[j] = false;
    }
    let next = Mask::from_bits(arch, bits)?;
    check_collapse(arch, &next)?;
    Ok(next)
}

/// Errors if a prunable layer has no surviving weight.
pub fn check_collapse(arch: &Architecture, mask: &Mask) -> Result<()> {
    for seg in arch.segments() {
        if seg.role == ParamRole::Weight
            && seg.prunable
            && !mask.bits()[seg.range()].iter().any(|b| *b)
        {
            return Err(Error::LayerCollapse {
                layer: seg.layer,
                name: arch.layers()[seg.layer].name().to_string(),
            });
        }
    }
    Ok(())
}

//! Analytic communication, compute and memory costs.
//!
//! Floats travel as 32 bits and seeds as 64. Memory is modelled as 4 bytes
//! per stored value.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Architecture, LayerSpec};

pub const FLOAT_BITS: u64 = 32;
pub const SEED_BITS: u64 = 64;
pub const FLOAT_BYTES: f64 = 4.0;

/// How a device reports its gradient information in a training round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommMode {
    /// `K` loss differences plus the seed that regenerates the perturbations.
    #[default]
    SeedTrick,
    /// The device's full estimate vector.
    FullVector,
}

fn check_density(d: f64) -> Result<()> {
    if d > 0.0 && d <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("density must lie in (0, 1], got {d}")))
    }
}

/// Bits moved by one training round of `devices` devices on a model of `n`
/// parameters at density `d`: `(up, down)`.
pub fn comm_training_round(
    n: usize,
    d: f64,
    k: usize,
    mode: CommMode,
    devices: usize,
) -> Result<(u64, u64)> {
    check_density(d)?;
    let devices = devices as u64;
    let up = match mode {
        CommMode::SeedTrick => devices * (FLOAT_BITS * k as u64 + SEED_BITS),
        CommMode::FullVector => devices * FLOAT_BITS * n as u64,
    };
    let down = devices * masked_model_bits(n, d);
    Ok((up, down))
}

/// `32·d·n`, the masked model in 32-bit floats.
pub fn masked_model_bits(n: usize, d: f64) -> u64 {
    (FLOAT_BITS as f64 * d * n as f64).round() as u64
}

/// Per-device bits of a real-data pruning phase in the worst case: the dense
/// model every round, then the masked model once.
pub fn pruning_comm_worst_case(n: usize, d: f64, rounds: usize) -> Result<u64> {
    check_density(d)?;
    Ok(FLOAT_BITS * rounds as u64 * n as u64 + masked_model_bits(n, d))
}

/// Which training style the memory model describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    /// Reverse mode: every activation and its gradient stay resident.
    Backprop,
    /// Forward passes only, evaluated layer by layer.
    BpFree,
}

/// Bytes of parameter storage. Backprop keeps weights and their gradients;
/// the forward-only model keeps the surviving weights (the 1-bit mask is
/// amortized away).
pub fn parameter_memory_bytes(arch: &Architecture, mode: MemoryMode, density: f64) -> f64 {
    let n = arch.num_params() as f64;
    match mode {
        MemoryMode::Backprop => 2.0 * n * FLOAT_BYTES,
        MemoryMode::BpFree => density * (n * FLOAT_BYTES),
    }
}

fn layer_params(arch: &Architecture, i: usize) -> usize {
    arch.weight_segment(i).map_or(0, |s| s.len) + arch.bias_segment(i).map_or(0, |s| s.len)
}

/// Modelled peak memory in bytes for one step on a batch of `batch` samples.
///
/// Backprop: parameters and their gradients, plus every layer's input and the
/// logits, each with a gradient buffer. Forward-only: surviving parameters,
/// plus the largest single layer working set (its input, its output and one
/// perturbation segment over its surviving weights). Activations and
/// reshapes overwrite their input buffer.
pub fn peak_memory_model(arch: &Architecture, batch: usize, mode: MemoryMode, density: f64) -> f64 {
    let layers = arch.layers().len();
    let act = |i: usize| -> f64 { (batch * arch.shape_at(i).iter().product::<usize>()) as f64 };
    let params = parameter_memory_bytes(arch, mode, density);
    match mode {
        MemoryMode::Backprop => {
            let retained: f64 = (0..=layers).map(act).sum();
            params + 2.0 * retained * FLOAT_BYTES
        }
        MemoryMode::BpFree => {
            let working = (0..layers)
                .map(|i| {
                    match arch.layers()[i] {
                        LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                            act(i) + act(i + 1) + density * layer_params(arch, i) as f64
                        }
                        // elementwise and reshaping layers run in place
                        LayerSpec::Relu | LayerSpec::Flatten => act(i),
                        _ => act(i) + act(i + 1),
                    }
                })
                .fold(0.0, f64::max);
            params + working * FLOAT_BYTES
        }
    }
}

/// Running totals over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostLedger {
    pub up_bits: u64,
    pub down_bits: u64,
    pub flops: f64,
    pub peak_mem_bytes: f64,
    pub rounds: usize,
}

impl CostLedger {
    /// Appends one round. `flops` is the round's increment.
    pub fn record(&mut self, up_bits: u64, down_bits: u64, flops: f64, peak_mem_bytes: f64) {
        self.up_bits += up_bits;
        self.down_bits += down_bits;
        self.flops += flops;
        self.peak_mem_bytes = self.peak_mem_bytes.max(peak_mem_bytes);
        self.rounds += 1;
    }

    /// Rebuilds the ledger from a metrics CSV, optionally restricted to one phase.
    pub fn replay_csv(path: &Path, phase: Option<&str>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Corrupt {
                    path: path.to_path_buf(),
                    offset: 0,
                    reason: format!("missing column {name}"),
                })
        };
        let (c_phase, c_flops, c_up, c_down, c_mem) = (
            col("phase")?,
            col("flops_cum")?,
            col("up_bits")?,
            col("down_bits")?,
            col("peak_mem_model_bytes")?,
        );
        let mut ledger = CostLedger::default();
        let mut last_flops = 0.0;
        for row in reader.records() {
            let row = row?;
            let bad = |what: &str| Error::Corrupt {
                path: path.to_path_buf(),
                offset: row.position().map_or(0, |p| p.byte()),
                reason: format!("unparsable {what}"),
            };
            let flops_cum: f64 = row[c_flops].parse().map_err(|_| bad("flops_cum"))?;
            let delta = flops_cum - last_flops;
            last_flops = flops_cum;
            if phase.is_some_and(|p| p != &row[c_phase]) {
                continue;
            }
            ledger.record(
                row[c_up].parse().map_err(|_| bad("up_bits"))?,
                row[c_down].parse().map_err(|_| bad("down_bits"))?,
                delta,
                row[c_mem].parse().map_err(|_| bad("peak_mem_model_bytes"))?,
            );
        }
        Ok(ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_trick_round_formula() {
        let (up, down) = comm_training_round(1_000_000, 0.2, 50, CommMode::SeedTrick, 1).unwrap();
        assert_eq!(up, 1664);
        assert_eq!(down, 6_400_000);
        let (full, _) = comm_training_round(1_000_000, 0.2, 50, CommMode::FullVector, 1).unwrap();
        assert_eq!(full, 32_000_000);
        assert!(full > 1000 * up);
        assert!(comm_training_round(10, 0.0, 1, CommMode::SeedTrick, 1).is_err());
        assert!(comm_training_round(10, 1.1, 1, CommMode::SeedTrick, 1).is_err());
    }

    #[test]
    fn seed_trick_upload_ignores_model_size() {
        let a = comm_training_round(100, 1.0, 70, CommMode::SeedTrick, 3).unwrap().0;
        let b = comm_training_round(10_000_000, 1.0, 70, CommMode::SeedTrick, 3).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn worst_case_pruning_phase() {
        let n = 62_006;
        assert_eq!(
            pruning_comm_worst_case(n, 0.2, 50).unwrap(),
            32 * 50 * n as u64 + masked_model_bits(n, 0.2)
        );
    }

    #[test]
    fn lenet_memory_ratio() {
        let arch = Architecture::lenet5(10);
        let bp = peak_memory_model(&arch, 32, MemoryMode::Backprop, 1.0);
        for d in [1.0, 0.5, 0.2] {
            let free = peak_memory_model(&arch, 32, MemoryMode::BpFree, d);
            assert!(free / bp <= 0.25, "ratio {}", free / bp);
        }
        let dense = parameter_memory_bytes(&arch, MemoryMode::BpFree, 1.0);
        assert_eq!(parameter_memory_bytes(&arch, MemoryMode::BpFree, 0.2), 0.2 * dense);
    }

    #[test]
    fn forward_only_never_exceeds_backprop() {
        for arch in [
            Architecture::lenet5(10),
            Architecture::mlp(&[32, 128, 128, 10]).unwrap(),
            Architecture::mlp(&[3, 2]).unwrap(),
        ] {
            for batch in [1, 8, 256] {
                assert!(
                    peak_memory_model(&arch, batch, MemoryMode::BpFree, 1.0)
                        <= peak_memory_model(&arch, batch, MemoryMode::Backprop, 1.0)
                );
            }
        }
    }

    #[test]
    fn ledger_is_monotone() {
        let mut l = CostLedger::default();
        l.record(10, 20, 5.0, 100.0);
        l.record(1, 2, 0.5, 50.0);
        assert_eq!((l.up_bits, l.down_bits, l.flops, l.peak_mem_bytes, l.rounds), (11, 22, 5.5, 100.0, 2));
    }
}

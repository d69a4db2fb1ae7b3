//! A full run: foresight pruning, then federated training, with one metrics
//! row per round.

use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};

use crate::accounting::{masked_model_bits, peak_memory_model, CostLedger, MemoryMode};
use crate::error::{Error, Result};
use crate::fed::{
    dirichlet_partition, run_fedavg_baseline, run_training_round, ClientPartition, RoundOutcome,
    RoundPlan, ServerState,
};
use crate::io::config::ExperimentConfig;
use crate::io::{Dataset, DatasetHandle};
use crate::prune::{run_foresight_pruning, Mask, ProbeBatch, ProbeSource, PruneMode, PruneRoundLog};
use crate::tensor::{
    argmax_rows, cross_entropy_loss, model_forward, Architecture, ModelParams, SeededRng,
};

/// Column order of the metrics CSV.
pub const METRICS_HEADER: [&str; 8] = [
    "round",
    "phase",
    "loss",
    "accuracy",
    "flops_cum",
    "up_bits",
    "down_bits",
    "peak_mem_model_bytes",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prune,
    Train,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prune => "prune",
            Phase::Train => "train",
        })
    }
}

/// One row of the metrics stream. Bits are per round, FLOPs cumulative and
/// device-side only.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub phase: Phase,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub flops_cum: f64,
    pub up_bits: u64,
    pub down_bits: u64,
    pub peak_mem_model_bytes: f64,
}

impl RoundMetrics {
    fn fields(&self) -> [String; 8] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.round.to_string(),
            self.phase.to_string(),
            opt(self.loss),
            opt(self.accuracy),
            self.flops_cum.to_string(),
            self.up_bits.to_string(),
            self.down_bits.to_string(),
            self.peak_mem_model_bytes.to_string(),
        ]
    }
}

/// Receives metrics rows as rounds commit.
pub trait MetricsSink {
    fn record(&mut self, row: &RoundMetrics) -> Result<()>;
}

impl MetricsSink for Vec<RoundMetrics> {
    fn record(&mut self, row: &RoundMetrics) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// CSV writer that flushes each row to a temporary file beside the target and
/// renames it into place on [`CsvMetricsWriter::finish`].
pub struct CsvMetricsWriter {
    path: PathBuf,
    writer: csv::Writer<tempfile::NamedTempFile>,
}

impl CsvMetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        let mut writer = csv::Writer::from_writer(tmp);
        writer.write_record(METRICS_HEADER)?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn finish(self) -> Result<()> {
        let tmp = self
            .writer
            .into_inner()
            .map_err(|e| Error::io(&self.path, e.into_error()))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(&self.path, e))?;
        tmp.persist(&self.path).map_err(|e| Error::io(&self.path, e.error))?;
        Ok(())
    }
}

impl MetricsSink for CsvMetricsWriter {
    fn record(&mut self, row: &RoundMetrics) -> Result<()> {
        self.writer.write_record(row.fields())?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a metrics CSV back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    if reader.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Corrupt {
            path: path.into(),
            offset: 0,
            reason: "unexpected metrics header".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Corrupt {
            path: path.into(),
            offset: rec.position().map_or(0, |p| p.byte()),
            reason: format!("unparsable {what}"),
        };
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        rows.push(RoundMetrics {
            round: rec[0].parse().map_err(|_| bad("round"))?,
            phase: match &rec[1] {
                "prune" => Phase::Prune,
                "train" => Phase::Train,
                _ => return Err(bad("phase")),
            },
            loss: opt(&rec[2], "loss")?,
            accuracy: opt(&rec[3], "accuracy")?,
            flops_cum: rec[4].parse().map_err(|_| bad("flops_cum"))?,
            up_bits: rec[5].parse().map_err(|_| bad("up_bits"))?,
            down_bits: rec[6].parse().map_err(|_| bad("down_bits"))?,
            peak_mem_model_bytes: rec[7].parse().map_err(|_| bad("peak_mem_model_bytes"))?,
        });
    }
    Ok(rows)
}

/// Real-data probes: each device draws up to `batch` of its own rows, fresh
/// for every pruning round.
pub struct PartitionProbes<'a> {
    pub data: &'a DatasetHandle,
    pub partitions: &'a [ClientPartition],
    pub batch: usize,
    pub rng: SeededRng,
}

impl ProbeSource for PartitionProbes<'_> {
    fn devices(&self) -> usize {
        self.partitions.len()
    }

    fn probe(&self, device: usize, round: usize) -> Result<ProbeBatch> {
        let part = self
            .partitions
            .get(device)
            .ok_or_else(|| Error::InvalidArgument(format!("no partition for device {device}")))?;
        let picks = self
            .rng
            .derive(&[device as u64, round as u64])
            .sample_indices(part.len(), self.batch.min(part.len()));
        let rows: Vec<usize> = picks.into_iter().map(|i| part.indices[i]).collect();
        Ok(ProbeBatch::real(device, self.data.gather(&rows)))
    }
}

/// Mean cross entropy and accuracy of the masked model over a whole split.
pub fn evaluate(
    arch: &Architecture,
    params: &ModelParams,
    mask: &Mask,
    data: &DatasetHandle,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    const CHUNK: usize = 500;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in rows.chunks(CHUNK) {
        let labels = data.labels_of(chunk);
        let logits = model_forward(arch, params, mask, &data.gather(chunk))?;
        loss += cross_entropy_loss(&logits, &labels)? * chunk.len() as f64;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// How devices train in the second phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainer {
    /// Seed-trick zeroth-order rounds.
    ZerothOrder,
    /// Backprop FedAvg with `local_epochs` local passes.
    FedAvg,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub arch: Architecture,
    pub state: ServerState,
    pub metrics: Vec<RoundMetrics>,
    pub prune_log: Vec<PruneRoundLog>,
    pub ledger: CostLedger,
}

fn check_data(arch: &Architecture, data: &Dataset) -> Result<()> {
    if data.train.sample_shape() != arch.input_shape() {
        return Err(Error::Config(format!(
            "model expects inputs {:?}, dataset has {:?}",
            arch.input_shape(),
            data.train.sample_shape()
        )));
    }
    if data.train.classes() != arch.classes() {
        return Err(Error::Config(format!(
            "model has {} outputs, dataset {} classes",
            arch.classes(),
            data.train.classes()
        )));
    }
    Ok(())
}

/// The run's initial weights and device partitions, both fixed by the seed.
pub fn experiment_setup(
    cfg: &ExperimentConfig,
    data: &Dataset,
) -> Result<(Architecture, ModelParams, Vec<ClientPartition>)> {
    cfg.validate()?;
    let arch = cfg.architecture()?;
    check_data(&arch, data)?;
    let root = cfg.root_rng();
    let params = ModelParams::init(&arch, &root.derive(&[2]));
    let partitions = dirichlet_partition(data.train.labels(), cfg.devices, cfg.beta, &root.derive(&[3]))?;
    Ok((arch, params, partitions))
}

/// Runs only the pruning phase, returning the mask and the per-round log.
pub fn run_pruning_phase(
    cfg: &ExperimentConfig,
    data: &Dataset,
) -> Result<(Mask, Vec<PruneRoundLog>)> {
    let (arch, params, partitions) = experiment_setup(cfg, data)?;
    prune_with(cfg, &arch, &params, &partitions, data)
}

fn prune_with(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    params: &ModelParams,
    partitions: &[ClientPartition],
    data: &Dataset,
) -> Result<(Mask, Vec<PruneRoundLog>)> {
    let root = cfg.root_rng();
    let probes = PartitionProbes {
        data: &data.train,
        partitions,
        batch: cfg.prune_batch,
        rng: root.derive(&[4, 0]),
    };
    let source: Option<&dyn ProbeSource> = match cfg.prune_mode {
        PruneMode::RealData => Some(&probes),
        PruneMode::DataFree => None,
    };
    let out = run_foresight_pruning(arch, params, &cfg.foresight(), source, &root.derive(&[4, 1]))?;
    Ok((out.mask, out.log))
}

/// Metrics rows of a pruning log.
pub fn pruning_rows(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    log: &[PruneRoundLog],
) -> Vec<RoundMetrics> {
    let probe_mem = match cfg.prune_mode {
        PruneMode::RealData => peak_memory_model(arch, cfg.prune_batch, MemoryMode::BpFree, 1.0),
        PruneMode::DataFree => 0.0,
    };
    let mut flops = 0.0;
    log.iter()
        .map(|entry| {
            flops += entry.device_flops;
            RoundMetrics {
                round: entry.round,
                phase: Phase::Prune,
                loss: None,
                accuracy: None,
                flops_cum: flops,
                up_bits: entry.up_bits,
                down_bits: entry.down_bits,
                peak_mem_model_bytes: probe_mem,
            }
        })
        .collect()
}

/// Both phases of a run. With `mask` given, pruning is skipped and training
/// starts from that mask; everything else is identical.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mask: Option<Mask>,
    trainer: Trainer,
    sink: &mut dyn MetricsSink,
) -> Result<ExperimentOutcome> {
    let (arch, params, partitions) = experiment_setup(cfg, data)?;
    let mut ledger = CostLedger::default();
    let mut metrics = Vec::new();
    let mut emit = |row: RoundMetrics, ledger: &mut CostLedger, prev_flops: f64| -> Result<()> {
        ledger.record(row.up_bits, row.down_bits, row.flops_cum - prev_flops, row.peak_mem_model_bytes);
        sink.record(&row)?;
        metrics.push(row);
        Ok(())
    };

    let (mask, prune_log) = match mask {
        Some(m) => {
            if m.len() != arch.num_params() {
                return Err(Error::Config("mask length does not match the model".into()));
            }
            (m, Vec::new())
        }
        None => prune_with(cfg, &arch, &params, &partitions, data)?,
    };
    let mut flops = 0.0;
    for row in pruning_rows(cfg, &arch, &prune_log) {
        let prev = flops;
        flops = row.flops_cum;
        emit(row, &mut ledger, prev)?;
    }

    let settings = cfg.train_settings();
    let train_mem = match trainer {
        Trainer::ZerothOrder => {
            peak_memory_model(&arch, cfg.batch_size, MemoryMode::BpFree, mask.density())
        }
        Trainer::FedAvg => peak_memory_model(&arch, cfg.batch_size, MemoryMode::Backprop, 1.0),
    };
    let plan_rng = cfg.root_rng().derive(&[5]);
    let mut state = ServerState::new(params, mask, cfg.lr)?;
    for r in 0..cfg.train_rounds {
        let plan = RoundPlan::sample(&plan_rng, r, cfg.devices, cfg.train_devices, cfg.dropout)?;
        let result = match trainer {
            Trainer::ZerothOrder => run_training_round(&arch, &state, &plan, &partitions, &data.train, &settings),
            Trainer::FedAvg => run_fedavg_baseline(
                &arch,
                &state,
                &plan,
                &partitions,
                &data.train,
                cfg.local_epochs,
                &settings,
            ),
        };
        let (next, outcome) = match result {
            Ok(v) => v,
            Err(Error::AllDevicesFailed { .. }) => {
                // Nobody reported back: the broadcast was spent, the model stays.
                let mut next = state.clone();
                next.lr *= settings.lr_decay;
                next.round += 1;
                let down = plan.selected.len() as u64
                    * masked_model_bits(arch.num_params(), state.mask.density());
                let idle = RoundOutcome {
                    loss: f64::NAN,
                    participants: Vec::new(),
                    up_bits: 0,
                    down_bits: down,
                    device_flops: 0.0,
                };
                (next, idle)
            }
            Err(e) => return Err(e),
        };
        state = next;
        let last = r + 1 == cfg.train_rounds;
        let accuracy = if (r + 1) % cfg.eval_every == 0 || last {
            if data.test.is_empty() {
                None
            } else {
                Some(evaluate(&arch, &state.params, &state.mask, &data.test)?.1)
            }
        } else {
            None
        };
        let prev = flops;
        flops += outcome.device_flops;
        emit(
            RoundMetrics {
                round: r + 1,
                phase: Phase::Train,
                loss: outcome.loss.is_finite().then_some(outcome.loss),
                accuracy,
                flops_cum: flops,
                up_bits: outcome.up_bits,
                down_bits: outcome.down_bits,
                peak_mem_model_bytes: if outcome.participants.is_empty() { 0.0 } else { train_mem },
            },
            &mut ledger,
            prev,
        )?;
    }
    Ok(ExperimentOutcome {
        arch,
        state,
        metrics,
        prune_log,
        ledger,
    })
}

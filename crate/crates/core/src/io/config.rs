//! Experiment configuration: a flat TOML table plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accounting::CommMode;
use crate::error::{Error, Result};
use crate::io::{load_cifar10, synthetic_task, Dataset};
use crate::prune::{ForesightConfig, PruneMode};
use crate::tensor::{Architecture, SeededRng};
use crate::fed::TrainSettings;
use crate::zo::DifferenceScheme;

/// Environment variable consulted when no data directory is configured.
pub const DATA_ENV: &str = "ZOPRUNE_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic,
    Cifar10,
}

/// Every knob of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// `mlp:<w0>-<w1>-...`, `lenet5` or `lenet5:<classes>`.
    pub model: String,
    pub dataset: DatasetSource,
    pub data_dir: Option<PathBuf>,
    pub synthetic_classes: usize,
    pub synthetic_dims: usize,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_separation: f64,

    /// Total devices `m`.
    pub devices: usize,
    /// Dirichlet concentration of the label split.
    pub beta: f64,
    /// `G_p`.
    pub prune_devices: usize,
    /// `G_t`.
    pub train_devices: usize,
    /// `T_p`.
    pub prune_rounds: usize,
    /// `T_t`.
    pub train_rounds: usize,
    pub density: f64,
    pub prune_mode: PruneMode,
    pub eps: f64,
    pub mc_samples: usize,
    /// Per-device probe rows in real-data pruning.
    pub prune_batch: usize,
    /// Gaussian probe rows in data-free pruning.
    pub synthetic_batch: usize,

    pub k: usize,
    pub sigma: f64,
    pub scheme: DifferenceScheme,
    pub comm_mode: CommMode,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Local epochs of the FedAvg baseline.
    pub local_epochs: usize,
    /// Probability that a selected device fails in a round.
    pub dropout: f64,
    /// Test accuracy every this many training rounds (and after the last).
    pub eval_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: "mlp:32-128-128-10".into(),
            dataset: DatasetSource::Synthetic,
            data_dir: None,
            synthetic_classes: 10,
            synthetic_dims: 32,
            synthetic_per_class: 200,
            synthetic_test_per_class: 100,
            synthetic_separation: 3.0,
            devices: 100,
            beta: 0.1,
            prune_devices: 10,
            train_devices: 10,
            prune_rounds: 50,
            train_rounds: 400,
            density: 0.2,
            prune_mode: PruneMode::DataFree,
            eps: 0.01,
            mc_samples: 1,
            prune_batch: 256,
            synthetic_batch: 256,
            k: 50,
            sigma: 1e-3,
            scheme: DifferenceScheme::Forward,
            comm_mode: CommMode::SeedTrick,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            lr_decay: 0.998,
            batch_size: 32,
            local_epochs: 5,
            dropout: 0.0,
            eval_every: 1,
        }
    }
}

/// Alternative spellings accepted by [`ExperimentConfig::apply_override`].
const ALIASES: &[(&str, &str)] = &[
    ("t_p", "prune_rounds"),
    ("t_t", "train_rounds"),
    ("g_p", "prune_devices"),
    ("g_t", "train_devices"),
    ("d", "density"),
    ("m", "devices"),
];

fn canonical_key(key: &str) -> String {
    let lower = key.trim().to_ascii_lowercase();
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == lower)
        .map_or(lower, |(_, name)| name.to_string())
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value`. Keys are case-insensitive and may use the short
    /// names `t_p`, `t_t`, `g_p`, `g_t`, `d` and `m`. Values are read as TOML
    /// literals, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let key = canonical_key(key);
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        table.insert(key.clone(), parse_value(value));
        let next: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        Architecture::from_name(&self.model)?;
        if self.devices == 0 {
            return Err(Error::Config("devices must be at least 1".into()));
        }
        if self.train_devices == 0 || self.train_devices > self.devices {
            return Err(Error::Config(format!(
                "train_devices must lie in 1..={}, got {}",
                self.devices, self.train_devices
            )));
        }
        if self.prune_devices == 0 || self.prune_devices > self.devices {
            return Err(Error::Config(format!(
                "prune_devices must lie in 1..={}, got {}",
                self.devices, self.prune_devices
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if self.density < 1.0 && self.prune_rounds == 0 {
            return Err(Error::Config("density below 1 needs prune_rounds ≥ 1".into()));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("eps", self.eps),
            ("sigma", self.sigma),
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
        ] {
            positive(name, v)?;
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        for (name, v) in [
            ("k", self.k),
            ("mc_samples", self.mc_samples),
            ("prune_batch", self.prune_batch),
            ("synthetic_batch", self.synthetic_batch),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.dataset == DatasetSource::Synthetic {
            if self.synthetic_classes < 2 || self.synthetic_dims == 0 || self.synthetic_per_class == 0 {
                return Err(Error::Config(
                    "synthetic data needs ≥ 2 classes, ≥ 1 dimension and ≥ 1 sample per class".into(),
                ));
            }
            if !(self.synthetic_separation >= 0.0 && self.synthetic_separation.is_finite()) {
                return Err(Error::Config("synthetic_separation must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::from_name(&self.model)
    }

    /// Root of every random stream in a run.
    pub fn root_rng(&self) -> SeededRng {
        SeededRng::new(self.seed, 0)
    }

    pub fn foresight(&self) -> ForesightConfig {
        ForesightConfig {
            mode: self.prune_mode,
            rounds: self.prune_rounds,
            density: self.density,
            devices_per_round: self.prune_devices,
            eps: self.eps,
            mc_samples: self.mc_samples,
            synthetic_batch: self.synthetic_batch,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            k: self.k,
            sigma: self.sigma,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
            scheme: self.scheme,
            comm: self.comm_mode,
        }
    }

    /// Directory holding the CIFAR-10 batch files: the configured one, else
    /// `$ZOPRUNE_DATA`.
    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.data_dir {
            return Ok(dir.clone());
        }
        std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no data_dir configured and {DATA_ENV} is unset")))
    }
}

/// Loads or generates the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset {
        DatasetSource::Synthetic => synthetic_task(
            cfg.synthetic_classes,
            cfg.synthetic_dims,
            cfg.synthetic_per_class,
            cfg.synthetic_test_per_class,
            cfg.synthetic_separation,
            &cfg.root_rng().derive(&[1]),
        ),
        DatasetSource::Cifar10 => load_cifar10(&cfg.data_root()?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7\nk = 200\nprune_mode = \"real-data\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.k, 200);
        assert_eq!(cfg.prune_mode, PruneMode::RealData);
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("sede = 1\n"),
            Err(Error::Config(_))
        ));
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_override("nonsense=3").is_err());
    }

    #[test]
    fn overrides_use_aliases_and_types() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("K=200").unwrap();
        cfg.apply_override("T_p=3").unwrap();
        cfg.apply_override("d=0.5").unwrap();
        cfg.apply_override("model=mlp:4-3").unwrap();
        cfg.apply_override("prune_mode=real-data").unwrap();
        cfg.apply_override("data_dir=/tmp/x").unwrap();
        assert_eq!((cfg.k, cfg.prune_rounds, cfg.density), (200, 3, 0.5));
        assert_eq!(cfg.model, "mlp:4-3");
        assert_eq!(cfg.prune_mode, PruneMode::RealData);
        assert_eq!(cfg.data_dir, Some(PathBuf::from("/tmp/x")));
        assert!(cfg.apply_override("k=lots").is_err());
        assert!(cfg.apply_override("k").is_err());
    }

    #[test]
    fn ranges_are_checked() {
        for bad in ["density = 0.0", "density = 1.5", "momentum = 1.0", "train_devices = 101", "k = 0",
            "model = \"resnet\"", "dropout = 1.0", "beta = -1.0", "prune_rounds = 0"]
        {
            assert!(ExperimentConfig::from_toml_str(bad).is_err(), "{bad}");
        }
        assert!(ExperimentConfig::from_toml_str("prune_rounds = 0\ndensity = 1.0").is_ok());
    }
}

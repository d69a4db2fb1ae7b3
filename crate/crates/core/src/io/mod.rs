pub mod atomic;
pub mod checkpoint;
pub mod config;
pub mod dataset;

pub use checkpoint::Checkpoint;
pub use config::{load_dataset, DatasetSource, ExperimentConfig};
pub use dataset::{gen_synthetic, load_cifar10, synthetic_task, Dataset, DatasetHandle};

//! Pruning at initialization from a tangent-kernel surrogate.

mod foresight;
mod mask;
mod ntk;
mod saliency;
mod schedule;

pub use foresight::{
    run_foresight_pruning, ForesightConfig, ForesightOutcome, ProbeSource, PruneMode,
    PruneRoundLog,
};
pub use mask::Mask;
pub use ntk::{
    flntk_oracle, local_ntk_trace, parameter_jacobian, FlNtkBound, Jacobian, LocalNtkSummary,
};
pub use saliency::{
    fd_squared_norm, pruning_noise, pruning_objective, saliency_scores, ProbeBatch, ProbeOrigin,
    SaliencyReport,
};
pub use schedule::{check_collapse, prune_round, scheduled_keep};

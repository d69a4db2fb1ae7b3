//! Deterministic tensor and network engine.
//!
//! Forward passes run everywhere; reverse mode exists only for the server-side
//! saliency computation and the backprop baseline.

pub mod arch;
mod backward;
mod flops;
mod forward;
mod loss;
mod params;
pub mod rng;
#[allow(clippy::module_inception)]
mod tensor;

pub use arch::{Architecture, LayerSpec, ParamRole, Segment};
pub use backward::backward_params;
pub use flops::{count_forward_flops, count_forward_flops_masked};
pub use forward::{argmax_rows, model_forward, model_forward_traced, ForwardTrace};
pub use loss::{cross_entropy_grad, cross_entropy_loss};
pub use params::ModelParams;
pub use rng::{seeded_gaussian, SeededRng};
pub use tensor::Tensor;

pub(crate) use forward::forward_effective;

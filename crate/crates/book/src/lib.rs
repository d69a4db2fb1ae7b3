//! Doctest harness for the guide.
//!
//! mdbook cannot link listings against workspace crates, so each chapter is
//! pulled in here as module documentation and `cargo test --doc` runs its
//! code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/randomness.md")]
pub mod randomness {}
#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}
#[doc = include_str!("../../../book/src/estimator.md")]
pub mod estimator {}
#[doc = include_str!("../../../book/src/pruning.md")]
pub mod pruning {}
#[doc = include_str!("../../../book/src/federated.md")]
pub mod federated {}
#[doc = include_str!("../../../book/src/costs.md")]
pub mod costs {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

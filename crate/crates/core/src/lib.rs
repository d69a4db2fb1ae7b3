pub mod accounting;
pub mod cli;
pub mod error;
pub mod fed;
pub mod io;
pub mod prune;
pub mod tensor;
pub mod verify;
pub mod zo;

pub use error::{Error, Result};

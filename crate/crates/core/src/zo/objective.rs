use crate::error::{Error, Result};
use crate::prune::Mask;
use crate::tensor::{cross_entropy_loss, forward_effective, Architecture, Tensor};

/// A scalar loss over a flat parameter vector, evaluated with forward passes only.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, params: &[f64]) -> Result<f64>;
}

/// Mean cross entropy of a masked network on one labelled batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelObjective<'a> {
    pub arch: &'a Architecture,
    pub mask: &'a Mask,
    pub batch: &'a Tensor,
    pub labels: &'a [usize],
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.arch.num_params()
    }

    fn loss(&self, params: &[f64]) -> Result<f64> {
        if params.len() != self.arch.num_params() {
            return Err(Error::Shape(format!(
                "objective expects {} parameters, got {}",
                self.arch.num_params(),
                params.len()
            )));
        }
        let effective = self.mask.apply(params);
        let logits = forward_effective(self.arch, &effective, self.batch)?;
        cross_entropy_loss(&logits, self.labels)
    }
}

/// `½‖W‖²`, whose gradient is `W`.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic {
    pub dim: usize,
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, params: &[f64]) -> Result<f64> {
        Ok(0.5 * params.iter().map(|v| v * v).sum::<f64>())
    }
}

/// `gᵀW`, whose gradient is `g` everywhere.
#[derive(Debug, Clone)]
pub struct Linear {
    pub g: Vec<f64>,
}

impl Objective for Linear {
    fn dim(&self) -> usize {
        self.g.len()
    }

    fn loss(&self, params: &[f64]) -> Result<f64> {
        Ok(self.g.iter().zip(params).map(|(a, b)| a * b).sum())
    }
}

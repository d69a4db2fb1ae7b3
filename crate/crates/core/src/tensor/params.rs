use crate::error::{Error, Result};
use crate::tensor::arch::{Architecture, ParamRole};
use crate::tensor::rng::{mix64, SeededRng};

/// Flat parameter vector laid out by [`Architecture::segments`].
///
/// Global index `j` is the position in this vector; masks, saliency scores,
/// perturbations and gradients all share the same indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
}

impl ModelParams {
    pub fn from_vec(arch: &Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "architecture has {} parameters, got {}",
                arch.num_params(),
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            values: vec![0.0; arch.num_params()],
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn init(arch: &Architecture, rng: &SeededRng) -> Self {
        let mut values = vec![0.0; arch.num_params()];
        for (si, seg) in arch.segments().iter().enumerate() {
            let bound = 1.0 / (seg.fan_in as f64).sqrt();
            let stream = rng.derive(&[si as u64]);
            for (k, v) in values[seg.range()].iter_mut().enumerate() {
                *v = bound * (2.0 * stream.uniform_at(k as u64) - 1.0);
            }
        }
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Standard deviation of each weight segment, broadcast per parameter.
    /// Bias entries receive the deviation of their layer's weights.
    pub fn per_layer_weight_std(&self, arch: &Architecture) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for seg in arch.segments() {
            if seg.role != ParamRole::Weight {
                continue;
            }
            let w = &self.values[seg.range()];
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let std = (w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
            out[seg.range()].iter_mut().for_each(|v| *v = std);
            if let Some(b) = arch.bias_segment(seg.layer) {
                out[b.range()].iter_mut().for_each(|v| *v = std);
            }
        }
        out
    }
}

/// Order-sensitive hash of a float slice's bit patterns.
pub(crate) fn fingerprint(values: &[f64]) -> u64 {
    values
        .iter()
        .fold(values.len() as u64, |acc, v| mix64(acc ^ v.to_bits()))
}

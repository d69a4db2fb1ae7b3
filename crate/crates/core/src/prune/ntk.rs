//! Explicit tangent-kernel quantities for tiny networks.
//!
//! These build parameter Jacobians row by row and exist to check the cheap
//! probe statistic against the real thing.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::prune::Mask;
use crate::tensor::{backward_params, model_forward_traced, Architecture, ModelParams, Tensor};

const JACOBIAN_GUARD: usize = 100_000;
const FLNTK_GUARD: usize = 256;

/// Per-device summary of the local tangent kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalNtkSummary {
    pub device: usize,
    /// `‖θ₀ⁱ‖_*`, equal to the squared Frobenius norm of the Jacobian.
    pub trace_norm: f64,
    pub sample_count: usize,
}

/// Jacobian of every logit with respect to every parameter.
/// Row `s * classes + c` is `∂f_c(x_s)/∂W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub samples: usize,
    pub outputs: usize,
    pub params: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn rows(&self) -> usize {
        self.samples * self.outputs
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.params, &self.data)
    }

    /// `J Jᵀ`, the local tangent kernel.
    pub fn gram(&self) -> DMatrix<f64> {
        let j = self.matrix();
        &j * j.transpose()
    }
}

/// Full parameter Jacobian at the unmasked network. Guarded by
/// `params · samples ≤ 10⁵`.
pub fn parameter_jacobian(
    arch: &Architecture,
    params: &ModelParams,
    batch: &Tensor,
) -> Result<Jacobian> {
    let n = arch.num_params();
    let samples = batch.rows();
    if n.saturating_mul(samples) > JACOBIAN_GUARD {
        return Err(Error::SizeGuard(format!(
            "explicit Jacobian of {n} parameters over {samples} samples exceeds {JACOBIAN_GUARD}"
        )));
    }
    let mask = Mask::ones(n);
    let classes = arch.classes();
    let mut data = Vec::with_capacity(samples * classes * n);
    let mut shape = batch.shape().to_vec();
    shape[0] = 1;
    for s in 0..samples {
        let x = Tensor::new(shape.clone(), batch.row(s).to_vec())?;
        let (_, trace) = model_forward_traced(arch, params, &mask, &x)?;
        for c in 0..classes {
            let mut e = vec![0.0; classes];
            e[c] = 1.0;
            let cot = Tensor::new(vec![1, classes], e)?;
            data.extend(backward_params(arch, params, &mask, &trace, &cot)?);
        }
    }
    Ok(Jacobian {
        samples,
        outputs: classes,
        params: n,
        data,
    })
}

/// `‖∇_W f‖_F²` summed over the batch and all outputs.
pub fn local_ntk_trace(
    arch: &Architecture,
    params: &ModelParams,
    device: usize,
    batch: &Tensor,
) -> Result<LocalNtkSummary> {
    let j = parameter_jacobian(arch, params, batch)?;
    Ok(LocalNtkSummary {
        device,
        trace_norm: j.data.iter().map(|v| v * v).sum(),
        sample_count: j.samples,
    })
}

/// Both sides of the triangle bound for the federated tangent kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlNtkBound {
    /// Nuclear norm of the padded concatenation of local kernels.
    pub federated: f64,
    /// Sum of the local nuclear norms.
    pub local_sum: f64,
}

fn nuclear_norm(m: DMatrix<f64>) -> f64 {
    m.singular_values().iter().sum()
}

/// Places each device's `J_i J_iᵀ` side by side, zero-padding to the tallest
/// block, and takes nuclear norms by singular-value decomposition.
/// Guarded by a total of 256 samples.
pub fn flntk_oracle(jacobians: &[Jacobian]) -> Result<FlNtkBound> {
    if jacobians.is_empty() {
        return Err(Error::InvalidArgument("no device Jacobians".into()));
    }
    let total: usize = jacobians.iter().map(|j| j.samples).sum();
    if total > FLNTK_GUARD {
        return Err(Error::SizeGuard(format!(
            "{total} samples exceed the {FLNTK_GUARD}-sample oracle limit"
        )));
    }
    let p = jacobians[0].params;
    if jacobians.iter().any(|j| j.params != p || j.outputs != jacobians[0].outputs) {
        return Err(Error::Shape("device Jacobians disagree in shape".into()));
    }
    let grams: Vec<DMatrix<f64>> = jacobians.iter().map(Jacobian::gram).collect();
    let rows = grams.iter().map(|g| g.nrows()).max().unwrap();
    let cols: usize = grams.iter().map(|g| g.ncols()).sum();
    let mut fl = DMatrix::zeros(rows, cols);
    let mut offset = 0;
    for g in &grams {
        fl.view_mut((0, offset), (g.nrows(), g.ncols())).copy_from(g);
        offset += g.ncols();
    }
    let local_sum = grams.into_iter().map(nuclear_norm).sum();
    Ok(FlNtkBound {
        federated: nuclear_norm(fl),
        local_sum,
    })
}

//! Per-sample forward FLOPs.
//!
//! A multiply-accumulate counts as two operations. Weight terms scale with the
//! layer's weight density; bias additions, ReLU (one per element) and max
//! pooling (one comparison per window element) do not.

use crate::prune::Mask;
use crate::tensor::arch::{Architecture, LayerSpec};

/// FLOPs of one forward pass of one sample, with `density` applied to the
/// weights of prunable layers. Unprunable layers are counted dense.
pub fn count_forward_flops(arch: &Architecture, density: f64) -> f64 {
    count_with(arch, |layer, _| {
        if layer.is_prunable() {
            density
        } else {
            1.0
        }
    })
}

/// FLOPs of one forward pass with each layer's actual surviving weight fraction.
pub fn count_forward_flops_masked(arch: &Architecture, mask: &Mask) -> f64 {
    count_with(arch, |_, i| {
        let seg = arch.weight_segment(i).unwrap();
        let kept = mask.bits()[seg.range()].iter().filter(|b| **b).count();
        kept as f64 / seg.len as f64
    })
}

fn count_with(arch: &Architecture, density_of: impl Fn(&LayerSpec, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for (i, layer) in arch.layers().iter().enumerate() {
        let out: usize = arch.shape_at(i + 1).iter().product();
        total += match *layer {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
                ..
            } => {
                let macs = (inputs * outputs) as f64;
                2.0 * macs * density_of(layer, i) + if bias { outputs as f64 } else { 0.0 }
            }
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                bias,
                ..
            } => {
                let macs = (kernel * kernel * in_channels * out) as f64;
                2.0 * macs * density_of(layer, i) + if bias { out as f64 } else { 0.0 }
            }
            LayerSpec::MaxPool2d { window } => (out * window * window) as f64,
            LayerSpec::Relu => out as f64,
            LayerSpec::Flatten => 0.0,
        };
    }
    total
}

//! Forward evaluation of `f(x; W ⊙ m)`.
//!
//! Two entry points: [`model_forward`] keeps only the live activation, and
//! [`model_forward_traced`] additionally records every layer input so that
//! [`backward_params`](crate::tensor::backward_params) can run afterwards.
//! Only server-side code (saliency, the backprop baseline) asks for traces.

use crate::error::{Error, Result};
use crate::prune::Mask;
use crate::tensor::arch::{Architecture, LayerSpec};
use crate::tensor::params::{fingerprint, ModelParams};
use crate::tensor::tensor::Tensor;

/// Layer inputs recorded by a traced forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[i]` is the input of layer `i`.
    pub(crate) inputs: Vec<Tensor>,
    pub logits: Tensor,
    /// Fingerprint of the effective weights the trace was recorded with.
    pub(crate) version: u64,
}

impl ForwardTrace {
    /// Number of stored activation values, the trace's memory footprint.
    pub fn retained_values(&self) -> usize {
        self.inputs.iter().map(Tensor::len).sum::<usize>() + self.logits.len()
    }
}

pub(crate) fn check_inputs(
    arch: &Architecture,
    params: &ModelParams,
    mask: &Mask,
    batch: &Tensor,
) -> Result<()> {
    if params.len() != arch.num_params() {
        return Err(Error::Shape(format!(
            "architecture has {} parameters, got {}",
            arch.num_params(),
            params.len()
        )));
    }
    if mask.len() != arch.num_params() {
        return Err(Error::Shape(format!(
            "mask length {} differs from parameter count {}",
            mask.len(),
            arch.num_params()
        )));
    }
    if batch.shape().len() != arch.input_shape().len() + 1
        || &batch.shape()[1..] != arch.input_shape()
    {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match per-sample input {:?}",
            batch.shape(),
            arch.input_shape()
        )));
    }
    if batch.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Network logits at `W ⊙ m`, shape `(batch, classes)`.
pub fn model_forward(
    arch: &Architecture,
    params: &ModelParams,
    mask: &Mask,
    batch: &Tensor,
) -> Result<Tensor> {
    check_inputs(arch, params, mask, batch)?;
    let effective = mask.apply(params.as_slice());
    forward_effective(arch, &effective, batch)
}

/// Forward pass on weights that are already masked. Retains nothing but the
/// current activation.
pub(crate) fn forward_effective(
    arch: &Architecture,
    effective: &[f64],
    batch: &Tensor,
) -> Result<Tensor> {
    let mut x = batch.clone();
    for i in 0..arch.layers().len() {
        x = layer_forward(arch, effective, i, &x)?;
    }
    Ok(x)
}

/// Forward pass that records layer inputs for reverse mode.
pub fn model_forward_traced(
    arch: &Architecture,
    params: &ModelParams,
    mask: &Mask,
    batch: &Tensor,
) -> Result<(Tensor, ForwardTrace)> {
    check_inputs(arch, params, mask, batch)?;
    let effective = mask.apply(params.as_slice());
    let mut inputs = Vec::with_capacity(arch.layers().len());
    let mut x = batch.clone();
    for i in 0..arch.layers().len() {
        let y = layer_forward(arch, &effective, i, &x)?;
        inputs.push(std::mem::replace(&mut x, y));
    }
    let trace = ForwardTrace {
        inputs,
        logits: x.clone(),
        version: fingerprint(&effective),
    };
    Ok((x, trace))
}

fn layer_forward(arch: &Architecture, w: &[f64], i: usize, x: &Tensor) -> Result<Tensor> {
    let batch = x.rows();
    let out_shape = arch.shape_at(i + 1);
    let mut shape = Vec::with_capacity(out_shape.len() + 1);
    shape.push(batch);
    shape.extend_from_slice(out_shape);
    let y = match arch.layers()[i] {
        LayerSpec::Dense {
            inputs, outputs, ..
        } => {
            let wseg = arch.weight_segment(i).unwrap();
            let bias = arch.bias_segment(i).map(|s| &w[s.range()]);
            dense_forward(&w[wseg.range()], bias, x.data(), batch, inputs, outputs)
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let wseg = arch.weight_segment(i).unwrap();
            let bias = arch.bias_segment(i).map(|s| &w[s.range()]);
            let geo = ConvGeometry::new(
                arch.shape_at(i),
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
            );
            conv_forward(&w[wseg.range()], bias, x.data(), batch, &geo)
        }
        LayerSpec::MaxPool2d { window } => {
            maxpool_forward(x.data(), batch, arch.shape_at(i), window).0
        }
        LayerSpec::Relu => x.data().iter().map(|v| v.max(0.0)).collect(),
        LayerSpec::Flatten => x.data().to_vec(),
    };
    let y = Tensor::new(shape, y)?;
    if !y.all_finite() {
        return Err(Error::non_finite(format!(
            "output of layer {i} ({})",
            arch.layers()[i].name()
        )));
    }
    Ok(y)
}

/// Row `o` of a weight matrix as (column, value) pairs, zeros dropped.
fn sparse_rows(weights: &[f64], rows: usize, cols: usize) -> Vec<Vec<(u32, f64)>> {
    (0..rows)
        .map(|o| {
            weights[o * cols..(o + 1) * cols]
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(c, w)| (c as u32, *w))
                .collect()
        })
        .collect()
}

#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub(crate) fn dense_forward(
    weights: &[f64],
    bias: Option<&[f64]>,
    x: &[f64],
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * outputs];
    let nnz = weights.iter().filter(|w| **w != 0.0).count();
    // Below half density the index-gather loop beats the dense dot product.
    if nnz * 2 < weights.len() {
        let rows = sparse_rows(weights, outputs, inputs);
        for b in 0..batch {
            let xb = &x[b * inputs..(b + 1) * inputs];
            for (o, row) in rows.iter().enumerate() {
                let mut s = 0.0;
                for &(c, w) in row {
                    s += w * xb[c as usize];
                }
                y[b * outputs + o] = s;
            }
        }
    } else {
        for b in 0..batch {
            let xb = &x[b * inputs..(b + 1) * inputs];
            for o in 0..outputs {
                y[b * outputs + o] = dot4(&weights[o * inputs..(o + 1) * inputs], xb);
            }
        }
    }
    if let Some(bias) = bias {
        for row in y.chunks_exact_mut(outputs) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
    y
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub(crate) fn new(
        input: &[usize],
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let (height, width) = (input[1], input[2]);
        Self {
            in_channels,
            out_channels,
            height,
            width,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
            kernel,
            stride,
            padding,
        }
    }

    pub(crate) fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub(crate) fn out_len(&self) -> usize {
        self.out_channels * self.out_height * self.out_width
    }

    /// Input coordinate hit by output `o` and kernel offset `k`, if inside the image.
    #[inline]
    pub(crate) fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }
}

pub(crate) fn conv_forward(
    weights: &[f64],
    bias: Option<&[f64]>,
    x: &[f64],
    batch: usize,
    g: &ConvGeometry,
) -> Vec<f64> {
    let plane = g.out_height * g.out_width;
    let mut y = vec![0.0; batch * g.out_len()];
    let kk = g.kernel * g.kernel;
    for b in 0..batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        for oc in 0..g.out_channels {
            let out = &mut y[b * g.out_len() + oc * plane..b * g.out_len() + (oc + 1) * plane];
            for ic in 0..g.in_channels {
                let xin = &xb[ic * g.height * g.width..(ic + 1) * g.height * g.width];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let w = weights[(oc * g.in_channels + ic) * kk + ky * g.kernel + kx];
                        if w == 0.0 {
                            continue;
                        }
                        for oy in 0..g.out_height {
                            let Some(iy) = g.source(oy, ky, g.height) else {
                                continue;
                            };
                            let row = &xin[iy * g.width..(iy + 1) * g.width];
                            let orow = &mut out[oy * g.out_width..(oy + 1) * g.out_width];
                            if g.stride == 1 && g.padding == 0 {
                                for (o, xv) in orow.iter_mut().zip(&row[kx..kx + g.out_width]) {
                                    *o += w * xv;
                                }
                            } else {
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    if let Some(ix) = g.source(ox, kx, g.width) {
                                        *o += w * row[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                out.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
    }
    y
}

/// Returns pooled values and, per output, the flat input index of the maximum
/// (first in scan order on ties).
pub(crate) fn maxpool_forward(
    x: &[f64],
    batch: usize,
    input: &[usize],
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = (input[0], input[1], input[2]);
    let (oh, ow) = (h / window, w / window);
    let mut y = Vec::with_capacity(batch * c * oh * ow);
    let mut arg = Vec::with_capacity(batch * c * oh * ow);
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = base + (oy * window + ky) * w + ox * window + kx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (y, arg)
}

/// Index of the largest logit per row (lowest index on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::SeededRng;
    use crate::tensor::seeded_gaussian;

    fn batch(arch: &Architecture, n: usize, seed: u64) -> Tensor {
        let mut shape = vec![n];
        shape.extend_from_slice(arch.input_shape());
        let data = seeded_gaussian(&SeededRng::new(seed, 0), n * arch.input_len(), 1.0);
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_dense_layer() {
        let arch = Architecture::mlp(&[2, 2]).unwrap();
        // weights row-major (out x in), then bias
        let p = ModelParams::from_vec(&arch, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let y = model_forward(&arch, &p, &Mask::ones(6), &x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        assert_eq!(y.shape(), &[1, 2]);
    }

    #[test]
    fn zero_mask_gives_bias_only_output() {
        let arch = Architecture::lenet5(10);
        let p = ModelParams::init(&arch, &SeededRng::new(3, 0));
        let flags = arch.prunable_flags();
        let m = Mask::from_bits_unchecked(flags.iter().map(|f| !f).collect());
        let x = batch(&arch, 2, 1);
        let y = model_forward(&arch, &p, &m, &x).unwrap();
        // Every prunable weight is gone: the dense head output is its bias.
        let last = arch.bias_segment(11).unwrap();
        for i in 0..2 {
            assert_eq!(y.row(i), &p.as_slice()[last.range()]);
        }
    }

    #[test]
    fn mask_absorption_is_exact() {
        for arch in [Architecture::lenet5(10), Architecture::mlp(&[8, 16, 4]).unwrap()] {
            let p = ModelParams::init(&arch, &SeededRng::new(9, 0));
            let bits: Vec<bool> = arch
                .prunable_flags()
                .iter()
                .enumerate()
                .map(|(j, f)| !f || SeededRng::new(4, 4).uniform_at(j as u64) < 0.3)
                .collect();
            let m = Mask::from_bits(&arch, bits).unwrap();
            let x = batch(&arch, 3, 2);
            let a = model_forward(&arch, &p, &m, &x).unwrap();
            let pm = ModelParams::from_vec(&arch, m.apply(p.as_slice())).unwrap();
            let b = model_forward(&arch, &pm, &Mask::ones(arch.num_params()), &x).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn ones_mask_matches_unmasked_and_traced() {
        let arch = Architecture::mlp(&[5, 7, 3]).unwrap();
        let p = ModelParams::init(&arch, &SeededRng::new(1, 1));
        let x = batch(&arch, 4, 5);
        let m = Mask::ones(arch.num_params());
        let a = model_forward(&arch, &p, &m, &x).unwrap();
        let (b, trace) = model_forward_traced(&arch, &p, &m, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace.inputs.len(), arch.layers().len());
    }

    #[test]
    fn sparse_and_dense_kernels_agree_closely() {
        let (i, o, b) = (37, 11, 3);
        let w: Vec<f64> = (0..i * o)
            .map(|k| if k % 3 == 0 { (k as f64).sin() } else { 0.0 })
            .collect();
        let x: Vec<f64> = (0..i * b).map(|k| (k as f64 * 0.37).cos()).collect();
        let sparse = dense_forward(&w, None, &x, b, i, o);
        for bb in 0..b {
            for oo in 0..o {
                let direct: f64 = (0..i).map(|c| w[oo * i + c] * x[bb * i + c]).sum();
                assert!((direct - sparse[bb * o + oo]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let arch = Architecture::mlp(&[5, 3]).unwrap();
        let p = ModelParams::zeros(&arch);
        let x = Tensor::zeros(vec![2, 4]);
        assert!(matches!(
            model_forward(&arch, &p, &Mask::ones(18), &x),
            Err(Error::Shape(_))
        ));
        let x = Tensor::zeros(vec![2, 5]);
        assert!(model_forward(&arch, &p, &Mask::ones(17), &x).is_err());
    }

    #[test]
    fn non_finite_activation_is_an_error() {
        let arch = Architecture::mlp(&[2, 2]).unwrap();
        let p = ModelParams::from_vec(&arch, vec![f64::MAX, f64::MAX, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![10.0, 10.0]).unwrap();
        assert!(matches!(
            model_forward(&arch, &p, &Mask::ones(6), &x),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn conv_with_stride_and_padding_matches_direct_sum() {
        let arch = Architecture::new(
            vec![2, 5, 5],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    bias: true,
                    prunable: true,
                },
                LayerSpec::Flatten,
            ],
        )
        .unwrap();
        let p = ModelParams::init(&arch, &SeededRng::new(2, 2));
        let x = batch(&arch, 1, 3);
        let y = model_forward(&arch, &p, &Mask::ones(arch.num_params()), &x).unwrap();
        assert_eq!(y.shape(), &[1, 27]);
        let w = p.as_slice();
        for oc in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = w[54 + oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += w[((oc * 2 + ic) * 3 + ky) * 3 + kx]
                                        * x.data()[ic * 25 + iy as usize * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((s - y.data()[oc * 9 + oy * 3 + ox]).abs() < 1e-12);
                }
            }
        }
    }
}

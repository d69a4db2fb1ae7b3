//! Reverse mode over a recorded [`ForwardTrace`].
//!
//! There is no general graph here: the network is a fixed chain of layers, so
//! the backward pass walks it in reverse, given the cotangent of the logits.

use crate::error::{Error, Result};
use crate::prune::Mask;
use crate::tensor::arch::{Architecture, LayerSpec};
use crate::tensor::forward::{maxpool_forward, ConvGeometry, ForwardTrace};
use crate::tensor::params::{fingerprint, ModelParams};
use crate::tensor::tensor::Tensor;

/// Gradient of `<dlogits, f(x; W ⊙ m)>` with respect to the effective weights `W ⊙ m`.
///
/// Every index `j` receives `∂/∂(W⊙m)_j`, including masked ones; this is the
/// quantity whose product with `W_j` gives `∂/∂m_j`. Callers that train
/// multiply by the mask themselves.
pub fn backward_params(
    arch: &Architecture,
    params: &ModelParams,
    mask: &Mask,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<Vec<f64>> {
    let effective = mask.apply(params.as_slice());
    if fingerprint(&effective) != trace.version {
        return Err(Error::StaleTrace);
    }
    if dlogits.shape() != trace.logits.shape() {
        return Err(Error::Shape(format!(
            "cotangent shape {:?} differs from logits {:?}",
            dlogits.shape(),
            trace.logits.shape()
        )));
    }
    let mut grad = vec![0.0; arch.num_params()];
    let mut dy = dlogits.data().to_vec();
    let batch = dlogits.rows();
    for i in (0..arch.layers().len()).rev() {
        let x = &trace.inputs[i];
        let need_dx = i > 0;
        dy = match arch.layers()[i] {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                let wseg = arch.weight_segment(i).unwrap();
                let w = &effective[wseg.range()];
                {
                    let gw = &mut grad[wseg.range()];
                    for b in 0..batch {
                        let xb = x.row(b);
                        for o in 0..outputs {
                            let d = dy[b * outputs + o];
                            if d == 0.0 {
                                continue;
                            }
                            for (g, xv) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(xb) {
                                *g += d * xv;
                            }
                        }
                    }
                }
                if let Some(bseg) = arch.bias_segment(i) {
                    let gb = &mut grad[bseg.range()];
                    for b in 0..batch {
                        for o in 0..outputs {
                            gb[o] += dy[b * outputs + o];
                        }
                    }
                }
                if need_dx {
                    let mut dx = vec![0.0; batch * inputs];
                    for b in 0..batch {
                        let dxb = &mut dx[b * inputs..(b + 1) * inputs];
                        for o in 0..outputs {
                            let d = dy[b * outputs + o];
                            if d == 0.0 {
                                continue;
                            }
                            for (g, wv) in dxb.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                                *g += d * wv;
                            }
                        }
                    }
                    dx
                } else {
                    Vec::new()
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let g = ConvGeometry::new(
                    arch.shape_at(i),
                    out_channels,
                    in_channels,
                    kernel,
                    stride,
                    padding,
                );
                let wseg = arch.weight_segment(i).unwrap();
                let w = &effective[wseg.range()];
                let plane = g.out_height * g.out_width;
                if let Some(bseg) = arch.bias_segment(i) {
                    let gb = &mut grad[bseg.range()];
                    for b in 0..batch {
                        for (oc, acc) in gb.iter_mut().enumerate().take(out_channels) {
                            let start = b * g.out_len() + oc * plane;
                            *acc += dy[start..start + plane].iter().sum::<f64>();
                        }
                    }
                }
                let mut dx = if need_dx {
                    vec![0.0; batch * g.in_len()]
                } else {
                    Vec::new()
                };
                let kk = kernel * kernel;
                let gw = &mut grad[wseg.range()];
                for b in 0..batch {
                    let xb = x.row(b);
                    for oc in 0..out_channels {
                        let dyp = &dy[b * g.out_len() + oc * plane..b * g.out_len() + (oc + 1) * plane];
                        for ic in 0..in_channels {
                            let xin = &xb[ic * g.height * g.width..(ic + 1) * g.height * g.width];
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let widx = (oc * in_channels + ic) * kk + ky * kernel + kx;
                                    let wv = w[widx];
                                    let mut acc = 0.0;
                                    for oy in 0..g.out_height {
                                        let Some(iy) = g.source(oy, ky, g.height) else {
                                            continue;
                                        };
                                        for ox in 0..g.out_width {
                                            let Some(ix) = g.source(ox, kx, g.width) else {
                                                continue;
                                            };
                                            let d = dyp[oy * g.out_width + ox];
                                            acc += d * xin[iy * g.width + ix];
                                            if need_dx && wv != 0.0 {
                                                dx[b * g.in_len()
                                                    + ic * g.height * g.width
                                                    + iy * g.width
                                                    + ix] += d * wv;
                                            }
                                        }
                                    }
                                    gw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                dx
            }
            LayerSpec::MaxPool2d { window } => {
                let (_, arg) = maxpool_forward(x.data(), batch, arch.shape_at(i), window);
                let mut dx = vec![0.0; x.len()];
                for (d, &idx) in dy.iter().zip(&arg) {
                    dx[idx] += d;
                }
                dx
            }
            LayerSpec::Relu => dy
                .iter()
                .zip(x.data())
                .map(|(d, xv)| if *xv > 0.0 { *d } else { 0.0 })
                .collect(),
            LayerSpec::Flatten => dy,
        };
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::forward::{model_forward, model_forward_traced};
    use crate::tensor::loss::{cross_entropy_grad, cross_entropy_loss};
    use crate::tensor::rng::SeededRng;
    use crate::tensor::seeded_gaussian;

    #[test]
    fn stale_trace_is_rejected() {
        let arch = Architecture::mlp(&[3, 4, 2]).unwrap();
        let p = ModelParams::init(&arch, &SeededRng::new(1, 0));
        let m = Mask::ones(arch.num_params());
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let (y, trace) = model_forward_traced(&arch, &p, &m, &x).unwrap();
        let mut q = p.clone();
        q.as_mut_slice()[0] += 1.0;
        let dy = Tensor::zeros(y.shape().to_vec());
        assert!(matches!(
            backward_params(&arch, &q, &m, &trace, &dy),
            Err(Error::StaleTrace)
        ));
        assert!(backward_params(&arch, &p, &m, &trace, &dy).is_ok());
    }

    #[test]
    fn zero_head_with_zero_cotangent_gives_zero_gradient() {
        let arch = Architecture::mlp(&[3, 4, 2]).unwrap();
        let mut p = ModelParams::init(&arch, &SeededRng::new(1, 0));
        let head = arch.weight_segment(2).unwrap().range();
        p.as_mut_slice()[head].iter_mut().for_each(|v| *v = 0.0);
        let m = Mask::ones(arch.num_params());
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let (y, trace) = model_forward_traced(&arch, &p, &m, &x).unwrap();
        let g = backward_params(&arch, &p, &m, &trace, &Tensor::zeros(y.shape().to_vec())).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_batch_leaves_mean_loss_gradient_unchanged() {
        let arch = Architecture::mlp(&[4, 6, 3]).unwrap();
        let p = ModelParams::init(&arch, &SeededRng::new(5, 0));
        let m = Mask::ones(arch.num_params());
        let x = Tensor::new(vec![3, 4], seeded_gaussian(&SeededRng::new(6, 0), 12, 1.0)).unwrap();
        let labels = vec![0, 2, 1];
        let grad = |x: &Tensor, labels: &[usize]| {
            let (y, t) = model_forward_traced(&arch, &p, &m, x).unwrap();
            backward_params(&arch, &p, &m, &t, &cross_entropy_grad(&y, labels).unwrap()).unwrap()
        };
        let g1 = grad(&x, &labels);
        let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let g2 = grad(&x.repeat_rows(2), &labels2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn masked_entries_get_effective_weight_gradient() {
        // d/d(W⊙m)_j at a masked j matches a finite difference on that effective weight.
        let arch = Architecture::mlp(&[3, 4, 2]).unwrap();
        let p = ModelParams::init(&arch, &SeededRng::new(8, 0));
        let mut bits = vec![true; arch.num_params()];
        bits[2] = false;
        let m = Mask::from_bits(&arch, bits).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.7]).unwrap();
        let labels = [1usize, 0];
        let (y, t) = model_forward_traced(&arch, &p, &m, &x).unwrap();
        let g = backward_params(&arch, &p, &m, &t, &cross_entropy_grad(&y, &labels).unwrap()).unwrap();
        let loss_at = |v: f64| {
            let mut q = m.apply(p.as_slice());
            q[2] = v;
            let q = ModelParams::from_vec(&arch, q).unwrap();
            let y = model_forward(&arch, &q, &Mask::ones(arch.num_params()), &x).unwrap();
            cross_entropy_loss(&y, &labels).unwrap()
        };
        let h = 1e-5;
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        assert!((fd - g[2]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", g[2]);
    }
}

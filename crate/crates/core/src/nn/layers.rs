//! Layer kernels with hand-written backward passes.
//!
//! Activations are NHWC. Convolutions are lowered to a single GEMM over the
//! whole batch via im2col.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// 3x3 convolution, stride 1, zero padding 1.
    Conv3x3 {
        name: String,
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    /// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
    MaxPool2,
    GlobalAvgPool,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
}

/// Per-layer values saved by the forward pass.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Conv { cols: Vec<f32>, in_shape: [usize; 4] },
    Relu { output: Tensor },
    MaxPool { argmax: Vec<u32>, in_shape: Vec<usize> },
    Gap { in_shape: Vec<usize> },
    Linear { input: Tensor },
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv3x3 { name, .. } | Layer::Linear { name, .. } => Some(name),
            _ => None,
        }
    }

    /// (parameter suffix, shape) pairs owned by this layer.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Layer::Conv3x3 {
                name,
                in_channels,
                out_channels,
            } => vec![
                (
                    format!("{name}.weight"),
                    vec![*out_channels, 3, 3, *in_channels],
                ),
                (format!("{name}.bias"), vec![*out_channels]),
            ],
            Layer::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![(format!("{name}.weight"), vec![*out_features, *in_features])];
                if *bias {
                    v.push((format!("{name}.bias"), vec![*out_features]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Fan-in used for He initialisation of the weight.
    pub fn fan_in(&self) -> usize {
        match self {
            Layer::Conv3x3 { in_channels, .. } => 9 * in_channels,
            Layer::Linear { in_features, .. } => *in_features,
            _ => 0,
        }
    }
}

fn param<'a>(params: &'a crate::nn::ParamSet, key: &str) -> Result<&'a Tensor> {
    params
        .get(key)
        .ok_or_else(|| Error::ShapeMismatch { name: key.to_string() })
}

pub(crate) fn forward(
    layer: &Layer,
    params: &crate::nn::ParamSet,
    input: &Tensor,
) -> Result<(Tensor, LayerCache)> {
    match layer {
        Layer::Conv3x3 {
            name,
            in_channels,
            out_channels,
        } => {
            let s = input.shape();
            if s.len() != 4 || s[3] != *in_channels {
                return Err(Error::ShapeMismatch {
                    name: format!("{name} input"),
                });
            }
            let in_shape = [s[0], s[1], s[2], s[3]];
            let w = param(params, &format!("{name}.weight"))?;
            let b = param(params, &format!("{name}.bias"))?;
            let cols = im2col(input.data(), in_shape);
            let rows = in_shape[0] * in_shape[1] * in_shape[2];
            let k = 9 * in_channels;
            let n = *out_channels;
            let mut out = vec![0f32; rows * n];
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(b.data());
            }
            gemm(
                rows, k, n,
                &cols, k as isize, 1,
                w.data(), 1, k as isize,
                1.0,
                &mut out, n as isize, 1,
            );
            let t = Tensor::from_vec(&[s[0], s[1], s[2], n], out)?;
            Ok((t, LayerCache::Conv { cols, in_shape }))
        }
        Layer::Relu => {
            let mut out = input.clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok((out.clone(), LayerCache::Relu { output: out }))
        }
        Layer::MaxPool2 => {
            let s = input.shape();
            if s.len() != 4 {
                return Err(Error::ShapeMismatch { name: "max_pool input".into() });
            }
            let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            let x = input.data();
            let mut out = vec![0f32; b * oh * ow * c];
            let mut argmax = vec![0u32; out.len()];
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let o = ((bi * oh + oy) * ow + ox) * c + ch;
                            out[o] = best;
                            argmax[o] = best_idx as u32;
                        }
                    }
                }
            }
            Ok((
                Tensor::from_vec(&[b, oh, ow, c], out)?,
                LayerCache::MaxPool {
                    argmax,
                    in_shape: s.to_vec(),
                },
            ))
        }
        Layer::GlobalAvgPool => {
            let s = input.shape();
            if s.len() != 4 {
                return Err(Error::ShapeMismatch { name: "avg_pool input".into() });
            }
            let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
            let x = input.data();
            let mut out = vec![0f32; b * c];
            let scale = 1.0 / hw as f32;
            for bi in 0..b {
                let o = &mut out[bi * c..(bi + 1) * c];
                for p in 0..hw {
                    let row = &x[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                    for (acc, v) in o.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                for v in o.iter_mut() {
                    *v *= scale;
                }
            }
            Ok((
                Tensor::from_vec(&[b, c], out)?,
                LayerCache::Gap { in_shape: s.to_vec() },
            ))
        }
        Layer::Linear {
            name,
            in_features,
            out_features,
            bias,
        } => {
            if input.row_len() != *in_features {
                return Err(Error::ShapeMismatch {
                    name: format!("{name} input"),
                });
            }
            let rows = input.rows();
            let w = param(params, &format!("{name}.weight"))?;
            let n = *out_features;
            let mut out = vec![0f32; rows * n];
            if *bias {
                let b = param(params, &format!("{name}.bias"))?;
                for r in 0..rows {
                    out[r * n..(r + 1) * n].copy_from_slice(b.data());
                }
            }
            gemm(
                rows, *in_features, n,
                input.data(), *in_features as isize, 1,
                w.data(), 1, *in_features as isize,
                1.0,
                &mut out, n as isize, 1,
            );
            Ok((
                Tensor::from_vec(&[rows, n], out)?,
                LayerCache::Linear {
                    input: input.clone(),
                },
            ))
        }
    }
}

/// Backward pass for one layer. Parameter gradients are accumulated into
/// `grads`; the input gradient is only computed when `need_input_grad`.
pub(crate) fn backward(
    layer: &Layer,
    params: &crate::nn::ParamSet,
    cache: &LayerCache,
    grad_out: &Tensor,
    grads: &mut crate::nn::ParamSet,
    need_input_grad: bool,
) -> Result<Option<Tensor>> {
    match (layer, cache) {
        (
            Layer::Conv3x3 {
                name,
                in_channels,
                out_channels,
            },
            LayerCache::Conv { cols, in_shape },
        ) => {
            let rows = in_shape[0] * in_shape[1] * in_shape[2];
            let k = 9 * in_channels;
            let n = *out_channels;
            let g = grad_out.data();
            {
                let gw = grads
                    .get_mut(&format!("{name}.weight"))
                    .ok_or_else(|| Error::ShapeMismatch { name: name.clone() })?;
                gemm(
                    n, rows, k,
                    g, 1, n as isize,
                    cols, k as isize, 1,
                    1.0,
                    gw.data_mut(), k as isize, 1,
                );
            }
            {
                let gb = grads
                    .get_mut(&format!("{name}.bias"))
                    .ok_or_else(|| Error::ShapeMismatch { name: name.clone() })?;
                let gb = gb.data_mut();
                for r in 0..rows {
                    for (acc, v) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *acc += v;
                    }
                }
            }
            if !need_input_grad {
                return Ok(None);
            }
            let w = param(params, &format!("{name}.weight"))?;
            let mut gcols = vec![0f32; rows * k];
            gemm(
                rows, n, k,
                g, n as isize, 1,
                w.data(), k as isize, 1,
                0.0,
                &mut gcols, k as isize, 1,
            );
            let gin = col2im(&gcols, *in_shape);
            Ok(Some(Tensor::from_vec(&in_shape[..], gin)?))
        }
        (Layer::Relu, LayerCache::Relu { output }) => {
            let mut g = grad_out.clone();
            for (gv, o) in g.data_mut().iter_mut().zip(output.data()) {
                if *o <= 0.0 {
                    *gv = 0.0;
                }
            }
            Ok(Some(g))
        }
        (Layer::MaxPool2, LayerCache::MaxPool { argmax, in_shape }) => {
            let mut gin = vec![0f32; in_shape.iter().product()];
            for (gv, &idx) in grad_out.data().iter().zip(argmax) {
                gin[idx as usize] += gv;
            }
            Ok(Some(Tensor::from_vec(in_shape, gin)?))
        }
        (Layer::GlobalAvgPool, LayerCache::Gap { in_shape }) => {
            let (b, hw, c) = (in_shape[0], in_shape[1] * in_shape[2], in_shape[3]);
            let scale = 1.0 / hw as f32;
            let g = grad_out.data();
            let mut gin = vec![0f32; b * hw * c];
            for bi in 0..b {
                let src = &g[bi * c..(bi + 1) * c];
                for p in 0..hw {
                    let dst = &mut gin[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s * scale;
                    }
                }
            }
            Ok(Some(Tensor::from_vec(in_shape, gin)?))
        }
        (
            Layer::Linear {
                name,
                in_features,
                out_features,
                bias,
            },
            LayerCache::Linear { input },
        ) => {
            let rows = input.rows();
            let (k, n) = (*in_features, *out_features);
            let g = grad_out.data();
            {
                let gw = grads
                    .get_mut(&format!("{name}.weight"))
                    .ok_or_else(|| Error::ShapeMismatch { name: name.clone() })?;
                gemm(
                    n, rows, k,
                    g, 1, n as isize,
                    input.data(), k as isize, 1,
                    1.0,
                    gw.data_mut(), k as isize, 1,
                );
            }
            if *bias {
                let gb = grads
                    .get_mut(&format!("{name}.bias"))
                    .ok_or_else(|| Error::ShapeMismatch { name: name.clone() })?;
                let gb = gb.data_mut();
                for r in 0..rows {
                    for (acc, v) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *acc += v;
                    }
                }
            }
            if !need_input_grad {
                return Ok(None);
            }
            let w = param(params, &format!("{name}.weight"))?;
            let mut gin = vec![0f32; rows * k];
            gemm(
                rows, n, k,
                g, n as isize, 1,
                w.data(), k as isize, 1,
                0.0,
                &mut gin, k as isize, 1,
            );
            Ok(Some(Tensor::from_vec(input.shape(), gin)?))
        }
        _ => Err(Error::invalid("layer/cache mismatch in backward pass")),
    }
}

/// `c = a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[rustfmt::skip]
pub(crate) fn gemm(
    m: usize, k: usize, n: usize,
    a: &[f32], rsa: isize, csa: isize,
    b: &[f32], rsb: isize, csb: isize,
    beta: f32,
    c: &mut [f32], rsc: isize, csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every caller passes contiguous buffers whose extents match the
    // dimensions and strides given.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), rsc, csc,
        );
    }
}

fn im2col(x: &[f32], [b, h, w, c]: [usize; 4]) -> Vec<f32> {
    let k = 9 * c;
    let mut cols = vec![0f32; b * h * w * k];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], [b, h, w, c]: [usize; 4]) -> Vec<f32> {
    let k = 9 * c;
    let mut x = vec![0f32; b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (d, s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

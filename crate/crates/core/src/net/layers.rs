// Per-kind forward and backward kernels on flat row-major buffers.

use super::{LayerKind, Params};
use crate::tensor::Tensor;

fn window_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, String> {
    let padded = len + 2 * padding;
    if padded < kernel {
        return Err(format!("kernel {kernel} larger than padded extent {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(super) fn output_shape(
    kind: &LayerKind,
    input: &[usize],
    block_input: Option<&[usize]>,
) -> Result<Vec<usize>, String> {
    let spatial = |expect_c: Option<usize>| -> Result<(usize, usize, usize), String> {
        match *input {
            [c, h, w] => match expect_c {
                Some(e) if e != c => Err(format!("expects {e} input channels, got {c}")),
                _ => Ok((c, h, w)),
            },
            _ => Err("expects a [C, H, W] input".into()),
        }
    };
    Ok(match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (_, h, w) = spatial(Some(in_channels))?;
            vec![
                out_channels,
                window_out(h, kernel, stride, padding)?,
                window_out(w, kernel, stride, padding)?,
            ]
        }
        LayerKind::DepthwiseConv2d {
            channels,
            kernel,
            stride,
            padding,
        } => {
            let (_, h, w) = spatial(Some(channels))?;
            vec![
                channels,
                window_out(h, kernel, stride, padding)?,
                window_out(w, kernel, stride, padding)?,
            ]
        }
        LayerKind::AffineChannel { channels } => {
            spatial(Some(channels))?;
            input.to_vec()
        }
        LayerKind::Relu | LayerKind::Silu => input.to_vec(),
        LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
            let (c, h, w) = spatial(None)?;
            vec![c, window_out(h, kernel, stride, 0)?, window_out(w, kernel, stride, 0)?]
        }
        LayerKind::GlobalAvgPool => {
            let (c, _, _) = spatial(None)?;
            vec![c]
        }
        LayerKind::Flatten => vec![input.iter().product()],
        LayerKind::Dense { in_features, .. } if input != [in_features] => {
            return Err(format!("expects a flat input of {in_features} features"));
        }
        LayerKind::Dense { out_features, .. } => vec![out_features],
        LayerKind::Residual => match block_input {
            Some(b) if b == input => input.to_vec(),
            Some(b) => return Err(format!("block input {b:?} cannot be added to {input:?}")),
            None => return Err("residual outside a block".into()),
        },
    })
}

#[derive(Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    groups: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl ConvGeom {
    fn new(kind: &LayerKind, input: &[usize], out: &[usize]) -> Option<Self> {
        let (in_c, out_c, groups, k, s, p) = match *kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => (in_channels, out_channels, 1, kernel, stride, padding),
            LayerKind::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                padding,
            } => (channels, channels, channels, kernel, stride, padding),
            _ => return None,
        };
        Some(ConvGeom {
            in_c,
            out_c,
            groups,
            h: input[1],
            w: input[2],
            oh: out[1],
            ow: out[2],
            k,
            s,
            p,
        })
    }

    // Output columns whose sampled input column `ox * s + kx - p` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.p {
            0
        } else {
            (self.p - kx).div_ceil(self.s)
        };
        let hi = if self.w + self.p > kx {
            ((self.w + self.p - kx - 1) / self.s + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.s + ky).checked_sub(self.p)?;
        (iy < self.h).then_some(iy)
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (icg, ocg) = (g.in_c / g.groups, g.out_c / g.groups);
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.out_c * plane];
    for o in 0..g.out_c {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        let group = o / ocg;
        for ic in 0..icg {
            let i = group * icg + ic;
            let src = &x[i * g.h * g.w..(i + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weight[((o * icg + ic) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..g.oh {
                        let Some(iy) = g.row(oy, ky) else { continue };
                        let srow = &src[iy * g.w..];
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for ox in lo..hi {
                            drow[ox] += wv * srow[ox * g.s + kx - g.p];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_params: bool,
) -> (Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) {
    let (icg, ocg) = (g.in_c / g.groups, g.out_c / g.groups);
    let plane = g.oh * g.ow;
    let mut grad_in = vec![0.0; x.len()];
    let mut grad_w = vec![0.0; if want_params { weight.len() } else { 0 }];
    for o in 0..g.out_c {
        let go = &grad_out[o * plane..(o + 1) * plane];
        let group = o / ocg;
        for ic in 0..icg {
            let i = group * icg + ic;
            let base = i * g.h * g.w;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((o * icg + ic) * g.k + ky) * g.k + kx;
                    let wv = weight[widx];
                    let (lo, hi) = g.col_range(kx);
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let Some(iy) = g.row(oy, ky) else { continue };
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        let row_base = base + iy * g.w;
                        for ox in lo..hi {
                            let xi = row_base + ox * g.s + kx - g.p;
                            grad_in[xi] += wv * grow[ox];
                            acc += x[xi] * grow[ox];
                        }
                    }
                    if want_params {
                        grad_w[widx] += acc;
                    }
                }
            }
        }
    }
    let params = want_params.then(|| {
        let grad_b = (0..g.out_c)
            .map(|o| grad_out[o * plane..(o + 1) * plane].iter().sum())
            .collect();
        (grad_w, grad_b)
    });
    (grad_in, params)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(super) fn forward(
    kind: &LayerKind,
    params: Option<&Params>,
    input: &Tensor,
    skip: Option<&Tensor>,
    out_shape: &[usize],
) -> Vec<f64> {
    let x = input.data();
    let shape = input.shape();
    match *kind {
        LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } => {
            let g = ConvGeom::new(kind, shape, out_shape).unwrap();
            let p = params.expect("conv parameters");
            conv_forward(&g, x, p.weight.data(), p.bias.data())
        }
        LayerKind::AffineChannel { .. } => {
            let p = params.expect("affine parameters");
            let plane = shape[1] * shape[2];
            let (s, b) = (p.weight.data(), p.bias.data());
            x.iter()
                .enumerate()
                .map(|(i, &v)| s[i / plane] * v + b[i / plane])
                .collect()
        }
        LayerKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
        LayerKind::MaxPool2d { kernel, stride } => {
            pool_windows(shape, out_shape, kernel, stride, |win| {
                win.map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max)
            })
        }
        LayerKind::AvgPool2d { kernel, stride } => {
            let n = (kernel * kernel) as f64;
            pool_windows(shape, out_shape, kernel, stride, |win| {
                win.map(|i| x[i]).sum::<f64>() / n
            })
        }
        LayerKind::GlobalAvgPool => {
            let plane = shape[1] * shape[2];
            x.chunks(plane)
                .map(|c| c.iter().sum::<f64>() / plane as f64)
                .collect()
        }
        LayerKind::Flatten => x.to_vec(),
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            let p = params.expect("dense parameters");
            let (w, b) = (p.weight.data(), p.bias.data());
            (0..out_features)
                .map(|o| {
                    b[o] + w[o * in_features..(o + 1) * in_features]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .collect()
        }
        LayerKind::Residual => {
            let s = skip.expect("residual skip input").data();
            x.iter().zip(s).map(|(a, b)| a + b).collect()
        }
    }
}

// Calls `f(window indices)` for every output cell of an unpadded pool.
fn pool_windows(
    shape: &[usize],
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
    f: impl Fn(&mut dyn Iterator<Item = usize>) -> f64,
) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut win = (0..kernel).flat_map(|ky| {
                    (0..kernel).map(move |kx| (ch * h + oy * stride + ky) * w + ox * stride + kx)
                });
                out.push(f(&mut win));
            }
        }
    }
    out
}

/// Gradient with respect to the layer input and, if requested, its
/// parameters. For residual layers the skip branch receives `grad_out`
/// unchanged; the caller routes it.
pub(super) fn backward(
    kind: &LayerKind,
    params: Option<&Params>,
    input: &Tensor,
    grad_out: &[f64],
    out_shape: &[usize],
    want_params: bool,
) -> (Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) {
    let x = input.data();
    let shape = input.shape();
    match *kind {
        LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } => {
            let g = ConvGeom::new(kind, shape, out_shape).unwrap();
            let p = params.expect("conv parameters");
            conv_backward(&g, x, p.weight.data(), grad_out, want_params)
        }
        LayerKind::AffineChannel { channels } => {
            let p = params.expect("affine parameters");
            let plane = shape[1] * shape[2];
            let s = p.weight.data();
            let grad_in = grad_out
                .iter()
                .enumerate()
                .map(|(i, &g)| g * s[i / plane])
                .collect();
            let pg = want_params.then(|| {
                let mut gs = vec![0.0; channels];
                let mut gb = vec![0.0; channels];
                for (i, (&g, &v)) in grad_out.iter().zip(x).enumerate() {
                    gs[i / plane] += g * v;
                    gb[i / plane] += g;
                }
                (gs, gb)
            });
            (grad_in, pg)
        }
        LayerKind::Relu => (
            grad_out
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            None,
        ),
        LayerKind::Silu => (
            grad_out
                .iter()
                .zip(x)
                .map(|(&g, &v)| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                })
                .collect(),
            None,
        ),
        LayerKind::MaxPool2d { kernel, stride } => {
            let mut grad_in = vec![0.0; x.len()];
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = usize::MAX;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                                if best == usize::MAX || x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        grad_in[best] += grad_out[(ch * oh + oy) * ow + ox];
                    }
                }
            }
            (grad_in, None)
        }
        LayerKind::AvgPool2d { kernel, stride } => {
            let mut grad_in = vec![0.0; x.len()];
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let n = (kernel * kernel) as f64;
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out[(ch * oh + oy) * ow + ox] / n;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                grad_in[(ch * h + oy * stride + ky) * w + ox * stride + kx] += g;
                            }
                        }
                    }
                }
            }
            (grad_in, None)
        }
        LayerKind::GlobalAvgPool => {
            let plane = shape[1] * shape[2];
            let grad_in = (0..x.len())
                .map(|i| grad_out[i / plane] / plane as f64)
                .collect();
            (grad_in, None)
        }
        LayerKind::Flatten | LayerKind::Residual => (grad_out.to_vec(), None),
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            let p = params.expect("dense parameters");
            let w = p.weight.data();
            let mut grad_in = vec![0.0; in_features];
            for (o, &g) in grad_out.iter().enumerate().take(out_features) {
                for (gi, &wv) in grad_in.iter_mut().zip(&w[o * in_features..(o + 1) * in_features]) {
                    *gi += g * wv;
                }
            }
            let pg = want_params.then(|| {
                let mut gw = Vec::with_capacity(w.len());
                for &g in grad_out {
                    gw.extend(x.iter().map(|&v| g * v));
                }
                (gw, grad_out.to_vec())
            });
            (grad_in, pg)
        }
    }
}

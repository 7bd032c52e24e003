//! Scalar reference implementations and random generators shared by the
//! acceptance suite. Nothing here calls into the library's map arithmetic.

#![allow(dead_code)]

use camforge::net::{LayerKind, LayerSpec, Network, NetworkSpec, Preprocess};
use camforge::{ActivationRecord, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_record(
    c: usize,
    h: usize,
    w: usize,
    block: usize,
    rng: &mut ChaCha8Rng,
) -> ActivationRecord {
    ActivationRecord::new(
        format!("layer{block}"),
        block,
        uniform(&[c, h, w], -1.0, 2.0, rng),
        uniform(&[c, h, w], -1.0, 1.0, rng),
        0,
    )
    .unwrap()
}

/// `[C][H][W]` view of a rank-3 tensor.
pub fn planes(t: &Tensor) -> Vec<Grid> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    (0..c)
        .map(|k| {
            (0..h)
                .map(|i| (0..w).map(|j| d[(k * h + i) * w + j]).collect())
                .collect()
        })
        .collect()
}

pub fn grid(t: &Tensor) -> Grid {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    (0..h).map(|i| t.data()[i * w..(i + 1) * w].to_vec()).collect()
}

pub fn flatten(g: &Grid) -> Vec<f64> {
    g.iter().flatten().copied().collect()
}

fn zeros(h: usize, w: usize) -> Grid {
    vec![vec![0.0; w]; h]
}

fn map_grid(g: &Grid, f: impl Fn(f64) -> f64) -> Grid {
    g.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

/// Bilinear sampling at half-pixel-aligned source coordinates, clamped at
/// the borders, evaluated as a weighted sum of the four neighbours.
pub fn upsample(src: &Grid, th: usize, tw: usize) -> Grid {
    let (sh, sw) = (src.len(), src[0].len());
    let coord = |o: usize, s: usize, t: usize| {
        let pos = ((o as f64 + 0.5) * s as f64 / t as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(s - 1), pos - lo as f64)
    };
    let mut out = zeros(th, tw);
    for (i, row) in out.iter_mut().enumerate() {
        let (y0, y1, fy) = coord(i, sh, th);
        for (j, v) in row.iter_mut().enumerate() {
            let (x0, x1, fx) = coord(j, sw, tw);
            *v = (1.0 - fy) * (1.0 - fx) * src[y0][x0]
                + (1.0 - fy) * fx * src[y0][x1]
                + fy * (1.0 - fx) * src[y1][x0]
                + fy * fx * src[y1][x1];
        }
    }
    out
}

pub fn normalize(g: &Grid) -> Grid {
    let lo = g.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = g.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        map_grid(g, |v| (v - lo) / (hi - lo))
    } else {
        map_grid(g, |_| 0.0)
    }
}

fn weighted_relu(acts: &[Grid], weights: &[f64]) -> Grid {
    let (h, w) = (acts[0].len(), acts[0][0].len());
    let mut out = zeros(h, w);
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let s: f64 = (0..acts.len()).map(|k| weights[k] * acts[k][i][j]).sum();
            *v = s.max(0.0);
        }
    }
    out
}

/// Sum of the absolute terms entering each pixel of a weighted channel sum.
fn weighted_magnitude(acts: &[Grid], weights: &[f64]) -> Grid {
    let (h, w) = (acts[0].len(), acts[0][0].len());
    let mut out = zeros(h, w);
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..acts.len()).map(|k| (weights[k] * acts[k][i][j]).abs()).sum();
        }
    }
    out
}

pub fn grad_cam_alpha(rec: &ActivationRecord) -> Vec<f64> {
    planes(&rec.gradients)
        .iter()
        .map(|p| {
            let n = (p.len() * p[0].len()) as f64;
            p.iter().flatten().sum::<f64>() / n
        })
        .collect()
}

/// Native-resolution Grad-CAM map and the per-pixel term magnitude.
pub fn grad_cam(rec: &ActivationRecord) -> (Grid, Grid) {
    let acts = planes(&rec.activations);
    let alpha = grad_cam_alpha(rec);
    (weighted_relu(&acts, &alpha), weighted_magnitude(&acts, &alpha))
}

pub fn combi_cam(recs: &[&ActivationRecord], th: usize, tw: usize) -> (Grid, Grid) {
    let mut sum = zeros(th, tw);
    let mut mag = zeros(th, tw);
    for rec in recs {
        let (m, a) = grad_cam(rec);
        let (um, ua) = (upsample(&m, th, tw), upsample(&a, th, tw));
        for i in 0..th {
            for j in 0..tw {
                sum[i][j] += um[i][j];
                mag[i][j] += ua[i][j];
            }
        }
    }
    (sum, mag)
}

pub fn gradcampp(rec: &ActivationRecord) -> (Grid, Grid) {
    let acts = planes(&rec.activations);
    let grads = planes(&rec.gradients);
    let weights: Vec<f64> = acts
        .iter()
        .zip(&grads)
        .map(|(a, g)| {
            let s: f64 = a.iter().flatten().sum();
            let mut w = 0.0;
            for row in g {
                for &gv in row {
                    let denom = 2.0 * gv.powi(2) + s * gv.powi(3);
                    let coeff = if denom == 0.0 { 0.0 } else { gv.powi(2) / denom };
                    w += coeff * gv.max(0.0);
                }
            }
            w
        })
        .collect();
    (weighted_relu(&acts, &weights), weighted_magnitude(&acts, &weights))
}

pub fn layer_cam(recs: &[&ActivationRecord], th: usize, tw: usize) -> Grid {
    let mut out = zeros(th, tw);
    for rec in recs {
        let acts = planes(&rec.activations);
        let grads = planes(&rec.gradients);
        let (h, w) = (acts[0].len(), acts[0][0].len());
        let mut m = zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                let s: f64 = (0..acts.len()).map(|k| grads[k][i][j].max(0.0) * acts[k][i][j]).sum();
                m[i][j] = s.max(0.0);
            }
        }
        let up = upsample(&normalize(&m), th, tw);
        for i in 0..th {
            for j in 0..tw {
                out[i][j] = out[i][j].max(up[i][j]);
            }
        }
    }
    out
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Score-CAM with masks applied by hand and scored through a plain forward
/// pass.
pub fn score_cam(net: &Network, x: &Tensor, rec: &ActivationRecord, class: usize) -> (Grid, Grid) {
    let acts = planes(&rec.activations);
    let xs = planes(x);
    let (h, w) = (xs[0].len(), xs[0][0].len());
    let weights: Vec<f64> = acts
        .iter()
        .map(|a| {
            let mask = normalize(&upsample(a, h, w));
            let masked: Vec<f64> = xs
                .iter()
                .flat_map(|p| (0..h).flat_map(move |i| (0..w).map(move |j| (i, j, p))))
                .map(|(i, j, p)| p[i][j] * mask[i][j])
                .collect();
            let input = Tensor::new(x.shape().to_vec(), masked).unwrap();
            softmax(&net.forward(&input).unwrap().logits)[class]
        })
        .collect();
    (weighted_relu(&acts, &weights), weighted_magnitude(&acts, &weights))
}

/// `|a - b| <= tol * max(|a|, |b|, floor)`, where `floor` is the magnitude
/// of the terms that produced the value.
pub fn close(a: f64, b: f64, floor: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(floor)
}

pub fn grids_close(got: &[f64], want: &Grid, floor: &Grid, tol: f64) -> bool {
    let (w, f) = (flatten(want), flatten(floor));
    got.len() == w.len() && got.iter().zip(&w).zip(&f).all(|((&g, &o), &m)| close(g, o, m, tol))
}

pub fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> LayerKind {
    LayerKind::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
        padding: p,
    }
}

pub fn spec(input: [usize; 3], classes: usize, layers: Vec<LayerSpec>) -> NetworkSpec {
    NetworkSpec {
        input_shape: input.to_vec(),
        class_count: classes,
        class_labels: (0..classes).map(|c| format!("c{c}")).collect(),
        preprocess: Preprocess::default(),
        layers,
    }
}

/// Replaces every parameter with a uniform draw from `[-1, 1)`.
pub fn randomize(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Network {
    let net = Network::init(spec, rng.random()).unwrap();
    let flat: Vec<f64> = (0..net.flat_params().len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    net.with_flat_params(&flat).unwrap()
}

/// One to three conv blocks with random widths, kernels, activations and
/// optional pooling, ending in global pooling and a dense head.
pub fn random_cam_net(rng: &mut ChaCha8Rng) -> Network {
    let c_in = if rng.random_bool(0.5) { 1 } else { 3 };
    let (h, w) = (rng.random_range(4..=8), rng.random_range(4..=8));
    let blocks = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let mut layers = Vec::new();
    let (mut ch, mut sh, mut sw) = (c_in, h, w);
    for b in 0..blocks {
        let out = rng.random_range(1..=4);
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        layers.push(LayerSpec::new(format!("b{b}_conv"), conv(ch, out, k, 1, k / 2)).in_block(b).tagged());
        let act = if rng.random_bool(0.5) { LayerKind::Relu } else { LayerKind::Silu };
        layers.push(LayerSpec::new(format!("b{b}_act"), act).in_block(b));
        if sh >= 4 && sw >= 4 && rng.random_bool(0.5) {
            layers.push(LayerSpec::new(format!("b{b}_pool"), LayerKind::MaxPool2d { kernel: 2, stride: 2 }).in_block(b));
            sh /= 2;
            sw /= 2;
        }
        ch = out;
    }
    layers.push(LayerSpec::new("gap", LayerKind::GlobalAvgPool));
    layers.push(LayerSpec::new(
        "fc",
        LayerKind::Dense {
            in_features: ch,
            out_features: classes,
        },
    ));
    randomize(spec([c_in, h, w], classes, layers), rng)
}

pub fn random_input(net: &Network, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(&net.spec().input_shape, 0.0, 1.0, rng)
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    -softmax(logits)[label].ln()
}

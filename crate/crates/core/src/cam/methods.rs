use rayon::prelude::*;

use super::{Heatmap, MapSpace, Method};
use crate::error::{Error, Result};
use crate::net::{ActivationRecord, Network};
use crate::tensor::Tensor;

/// Channel importance weights: the spatial mean of the class-score gradient
/// over each feature map.
pub fn grad_cam_weights(rec: &ActivationRecord) -> Vec<f64> {
    rec.gradients
        .channel_mean()
        .expect("records hold rank-3 tensors")
}

/// Single-layer Grad-CAM map at the layer's native resolution.
pub fn grad_cam_map(rec: &ActivationRecord) -> Heatmap {
    let weights = grad_cam_weights(rec);
    let values = rec
        .activations
        .weighted_channel_sum(&weights)
        .expect("weights match channel count")
        .elementwise_relu();
    Heatmap::layer_native(values, Method::GradCam, rec)
}

fn check_records(recs: &[&ActivationRecord]) -> Result<usize> {
    let first = recs
        .first()
        .ok_or_else(|| Error::Argument("layer set is empty".into()))?;
    if let Some(r) = recs.iter().find(|r| r.class_index != first.class_index) {
        return Err(Error::Consistency(format!(
            "record '{}' explains class {} but '{}' explains class {}",
            r.layer_name, r.class_index, first.layer_name, first.class_index
        )));
    }
    Ok(first.class_index)
}

/// Multi-layer Combi-CAM: the sum of every layer's Grad-CAM map after
/// upsampling it to `size`.
///
/// The sum is raw; with `per_layer_normalize` each upsampled map is first
/// rescaled to `[0, 1]`, which discards the magnitude differences between
/// layers. Layers are accumulated in the given order.
pub fn combi_cam(
    recs: &[&ActivationRecord],
    size: (usize, usize),
    per_layer_normalize: bool,
) -> Result<Heatmap> {
    let class_index = check_records(recs)?;
    let mut acc: Option<Tensor> = None;
    for rec in recs {
        let mut up = grad_cam_map(rec).values.bilinear_upsample(size)?;
        if per_layer_normalize {
            up = up.min_max_normalize();
        }
        acc = Some(match acc {
            None => up,
            Some(a) => a.add(&up)?,
        });
    }
    Ok(Heatmap {
        values: acc.expect("nonempty"),
        space: MapSpace::InputAligned,
        method: Method::CombiCam,
        class_index,
        layers: recs.iter().map(|r| r.layer_name.clone()).collect(),
    })
}

/// Grad-CAM++ with the closed-form coefficients for an exponential class
/// score, so only first-order gradients are needed.
pub fn gradcampp_map(rec: &ActivationRecord) -> Heatmap {
    let (c, h, w) = rec.activations.dims3().expect("rank-3 record");
    let plane = h * w;
    let acts = rec.activations.data();
    let grads = rec.gradients.data();
    let weights: Vec<f64> = (0..c)
        .map(|k| {
            let a = &acts[k * plane..(k + 1) * plane];
            let g = &grads[k * plane..(k + 1) * plane];
            let sum_a: f64 = a.iter().sum();
            g.iter()
                .map(|&gv| {
                    let g2 = gv * gv;
                    let denom = 2.0 * g2 + sum_a * g2 * gv;
                    let coeff = if denom == 0.0 { 0.0 } else { g2 / denom };
                    coeff * gv.max(0.0)
                })
                .sum()
        })
        .collect();
    let values = rec
        .activations
        .weighted_channel_sum(&weights)
        .expect("weights match channel count")
        .elementwise_relu();
    Heatmap::layer_native(values, Method::GradCamPlusPlus, rec)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScoreCamOptions {
    /// Only the channels with the largest peak activation are probed; the
    /// rest get weight zero. `None` probes every channel.
    pub max_channels: Option<usize>,
}

/// Score-CAM weights: the class probability of the input masked by each
/// normalised, upsampled feature map. Gradients are never read.
pub fn score_cam_weights(
    net: &Network,
    x: &Tensor,
    rec: &ActivationRecord,
    class_index: usize,
    opts: ScoreCamOptions,
) -> Result<Vec<f64>> {
    let (c, _, _) = rec.activations.dims3()?;
    if class_index >= net.spec().class_count {
        return Err(Error::Range(format!("class index {class_index} out of range")));
    }
    let (_, h, w) = x.dims3()?;
    let probe: Vec<bool> = match opts.max_channels {
        Some(m) if m < c => {
            let peaks: Vec<f64> = (0..c)
                .map(|k| rec.activations.channel(k).map(|t| t.max()))
                .collect::<Result<_>>()?;
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| peaks[b].total_cmp(&peaks[a]).then(a.cmp(&b)));
            let mut keep = vec![false; c];
            order.iter().take(m).for_each(|&k| keep[k] = true);
            keep
        }
        _ => vec![true; c],
    };
    (0..c)
        .into_par_iter()
        .map(|k| {
            if !probe[k] {
                return Ok(0.0);
            }
            let mask = rec
                .activations
                .channel(k)?
                .bilinear_upsample((h, w))?
                .min_max_normalize();
            Ok(net.masked_forward(x, &mask)?.probabilities[class_index])
        })
        .collect()
}

pub fn score_cam_map(
    net: &Network,
    x: &Tensor,
    rec: &ActivationRecord,
    class_index: usize,
    opts: ScoreCamOptions,
) -> Result<Heatmap> {
    let weights = score_cam_weights(net, x, rec, class_index, opts)?;
    let values = rec.activations.weighted_channel_sum(&weights)?.elementwise_relu();
    let mut map = Heatmap::layer_native(values, Method::ScoreCam, rec);
    map.class_index = class_index;
    Ok(map)
}

/// Layer-CAM: per layer `relu(sum_k relu(G_k) * A_k)`, normalised and
/// upsampled, then the elementwise maximum across layers.
pub fn layer_cam_map(recs: &[&ActivationRecord], size: (usize, usize)) -> Result<Heatmap> {
    let class_index = check_records(recs)?;
    let mut acc: Option<Tensor> = None;
    for rec in recs {
        let (c, h, w) = rec.activations.dims3()?;
        let plane = h * w;
        let (a, g) = (rec.activations.data(), rec.gradients.data());
        let mut m = vec![0.0; plane];
        for k in 0..c {
            for (i, mi) in m.iter_mut().enumerate() {
                *mi += g[k * plane + i].max(0.0) * a[k * plane + i];
            }
        }
        let layer = Tensor::new(vec![h, w], m)?
            .elementwise_relu()
            .min_max_normalize()
            .bilinear_upsample(size)?;
        acc = Some(match acc {
            None => layer,
            Some(prev) => prev.max_with(&layer)?,
        });
    }
    Ok(Heatmap {
        values: acc.expect("nonempty"),
        space: MapSpace::InputAligned,
        method: Method::LayerCam,
        class_index,
        layers: recs.iter().map(|r| r.layer_name.clone()).collect(),
    })
}

/// Peak of each block's unnormalised Grad-CAM map, ordered by block id.
pub fn activation_profile(
    blocks: &[usize],
    recs: &[ActivationRecord],
) -> Result<Vec<(usize, f64)>> {
    let mut ids = blocks.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.iter()
        .map(|&b| {
            let rec = recs.iter().find(|r| r.block == b).ok_or_else(|| {
                Error::Consistency(format!("no activation record for block {b}"))
            })?;
            Ok((b, grad_cam_map(rec).values.max()))
        })
        .collect()
}

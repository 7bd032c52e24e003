use rayon::prelude::*;

use super::dataset::{BBox, SyntheticScene};
use crate::cam::{explain, CamRequest, ClassSelector, LayerSelection, Method};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationScore {
    pub pointing_hits: usize,
    /// Mean fraction of heatmap mass inside the box.
    pub energy_ratio: f64,
    pub n_scenes: usize,
}

impl LocalizationScore {
    pub fn hit_rate(&self) -> f64 {
        if self.n_scenes == 0 {
            0.0
        } else {
            self.pointing_hits as f64 / self.n_scenes as f64
        }
    }

    pub fn from_scores(scores: &[(bool, f64)]) -> Self {
        let n = scores.len();
        LocalizationScore {
            pointing_hits: scores.iter().filter(|s| s.0).count(),
            energy_ratio: if n == 0 {
                0.0
            } else {
                scores.iter().map(|s| s.1).sum::<f64>() / n as f64
            },
            n_scenes: n,
        }
    }
}

/// Whether the map's argmax (first in row-major order on ties) lies in
/// `bbox`, and the share of the map's mass inside it. A map with no mass has
/// an energy ratio of zero.
pub fn score_map(map: &Tensor, bbox: &BBox) -> Result<(bool, f64)> {
    let (h, w) = map.dims2()?;
    if bbox.top + bbox.height > h || bbox.left + bbox.width > w {
        return Err(Error::Range(format!(
            "bounding box {bbox:?} exceeds {h}x{w} map"
        )));
    }
    let arg = map.argmax();
    let hit = bbox.contains(arg / w, arg % w);
    let total = map.sum();
    let inside: f64 = (bbox.top..bbox.top + bbox.height)
        .map(|r| map.data()[r * w + bbox.left..r * w + bbox.left + bbox.width].iter().sum::<f64>())
        .sum();
    let ratio = if total > 0.0 {
        (inside / total).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok((hit, ratio))
}

/// Explains every scene's true class with `method` over `layers` and scores
/// the input-aligned maps.
pub fn pointing_game(
    net: &Network,
    scenes: &[SyntheticScene],
    method: Method,
    layers: &LayerSelection,
) -> Result<LocalizationScore> {
    let scores: Vec<(bool, f64)> = scenes
        .par_iter()
        .map(|s| {
            let req = CamRequest::new(method)
                .class(ClassSelector::Index(s.pattern_class))
                .layers(layers.clone());
            let x = net.spec().preprocess.apply(&s.image)?;
            let res = explain(net, &x, &req)?;
            score_map(&res.heatmap.values, &s.pattern_bbox)
        })
        .collect::<Result<_>>()?;
    Ok(LocalizationScore::from_scores(&scores))
}

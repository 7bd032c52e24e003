//! Class activation mapping: Grad-CAM, multi-layer Combi-CAM, and the
//! Grad-CAM++, Score-CAM and Layer-CAM baselines.

mod methods;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::{ActivationRecord, ClassScore, Network, NetworkSpec};
use crate::tensor::Tensor;

pub use methods::{
    activation_profile, combi_cam, grad_cam_map, grad_cam_weights, gradcampp_map,
    layer_cam_map, score_cam_map, score_cam_weights, ScoreCamOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    GradCam,
    GradCamPlusPlus,
    ScoreCam,
    LayerCam,
    CombiCam,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::GradCam,
        Method::GradCamPlusPlus,
        Method::ScoreCam,
        Method::LayerCam,
        Method::CombiCam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GradCam => "gradcam",
            Method::GradCamPlusPlus => "gradcampp",
            Method::ScoreCam => "scorecam",
            Method::LayerCam => "layercam",
            Method::CombiCam => "combicam",
        }
    }

    /// Methods defined on a single layer.
    pub fn is_single_layer(self) -> bool {
        matches!(self, Method::GradCam | Method::GradCamPlusPlus | Method::ScoreCam)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSpace {
    LayerNative,
    InputAligned,
}

/// A nonnegative saliency map and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `[H, W]` values, all `>= 0`.
    pub values: Tensor,
    pub space: MapSpace,
    pub method: Method,
    pub class_index: usize,
    pub layers: Vec<String>,
}

impl Heatmap {
    fn layer_native(values: Tensor, method: Method, rec: &ActivationRecord) -> Self {
        Heatmap {
            values,
            space: MapSpace::LayerNative,
            method,
            class_index: rec.class_index,
            layers: vec![rec.layer_name.clone()],
        }
    }

    /// Resamples a layer-native map onto the input grid.
    pub fn to_input(&self, size: (usize, usize)) -> Result<Heatmap> {
        Ok(Heatmap {
            values: self.values.bilinear_upsample(size)?,
            space: MapSpace::InputAligned,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelection {
    AllBlocks,
    LastOnly,
    Blocks(Vec<usize>),
    Names(Vec<String>),
}

impl FromStr for LayerSelection {
    type Err = Error;

    /// `all-blocks`, `last`, or a comma-separated list of block ids.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all-blocks" => Ok(LayerSelection::AllBlocks),
            "last" => Ok(LayerSelection::LastOnly),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Argument(format!("bad block id '{p}' in layer list")))
                })
                .collect::<Result<Vec<_>>>()
                .map(LayerSelection::Blocks),
        }
    }
}

/// The tagged layers a method aggregates over, ordered shallow to deep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSet {
    pub names: Vec<String>,
}

impl LayerSet {
    pub fn resolve(spec: &NetworkSpec, selection: &LayerSelection) -> Result<LayerSet> {
        let tagged: Vec<_> = spec.tagged_layers().collect();
        let chosen: Vec<bool> = match selection {
            LayerSelection::AllBlocks => vec![true; tagged.len()],
            LayerSelection::LastOnly => {
                (0..tagged.len()).map(|i| i + 1 == tagged.len()).collect()
            }
            LayerSelection::Blocks(ids) => {
                check_unique(ids)?;
                for b in ids {
                    if !tagged.iter().any(|l| l.block == Some(*b)) {
                        return Err(Error::Argument(format!("network has no block {b}")));
                    }
                }
                tagged.iter().map(|l| ids.contains(&l.block.unwrap())).collect()
            }
            LayerSelection::Names(names) => {
                check_unique(names)?;
                for n in names {
                    if !tagged.iter().any(|l| &l.name == n) {
                        return Err(Error::Argument(format!("'{n}' is not a tagged layer")));
                    }
                }
                tagged.iter().map(|l| names.contains(&l.name)).collect()
            }
        };
        let names: Vec<String> = tagged
            .iter()
            .zip(chosen)
            .filter(|(_, keep)| *keep)
            .map(|(l, _)| l.name.clone())
            .collect();
        if names.is_empty() {
            return Err(Error::Argument("layer selection is empty".into()));
        }
        Ok(LayerSet { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Records belonging to this set, in set order.
    pub fn select<'a>(&self, recs: &'a [ActivationRecord]) -> Result<Vec<&'a ActivationRecord>> {
        self.names
            .iter()
            .map(|n| {
                recs.iter()
                    .find(|r| &r.layer_name == n)
                    .ok_or_else(|| Error::Consistency(format!("no record for layer '{n}'")))
            })
            .collect()
    }
}

fn check_unique<T: PartialEq + fmt::Debug>(items: &[T]) -> Result<()> {
    for (i, a) in items.iter().enumerate() {
        if items[..i].contains(a) {
            return Err(Error::Argument(format!("duplicate layer selector {a:?}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassSelector {
    Predicted,
    Index(usize),
    Label(String),
}

impl FromStr for ClassSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "predicted" => ClassSelector::Predicted,
            _ => match s.parse::<usize>() {
                Ok(i) => ClassSelector::Index(i),
                Err(_) => ClassSelector::Label(s.to_string()),
            },
        })
    }
}

impl ClassSelector {
    /// `predicted` is only invoked for [`ClassSelector::Predicted`].
    pub fn resolve(
        &self,
        spec: &NetworkSpec,
        predicted: impl FnOnce() -> Result<usize>,
    ) -> Result<usize> {
        match self {
            ClassSelector::Predicted => predicted(),
            ClassSelector::Index(i) if *i < spec.class_count => Ok(*i),
            ClassSelector::Index(i) => Err(Error::Range(format!(
                "class index {i} out of range for {} classes",
                spec.class_count
            ))),
            ClassSelector::Label(l) => spec
                .class_labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::Argument(format!("unknown class label '{l}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamRequest {
    pub method: Method,
    pub class: ClassSelector,
    pub layers: LayerSelection,
    pub per_layer_normalize: bool,
    pub score_cam: ScoreCamOptions,
}

impl CamRequest {
    pub fn new(method: Method) -> Self {
        CamRequest {
            method,
            class: ClassSelector::Predicted,
            layers: if method.is_single_layer() {
                LayerSelection::LastOnly
            } else {
                LayerSelection::AllBlocks
            },
            per_layer_normalize: false,
            score_cam: ScoreCamOptions::default(),
        }
    }

    pub fn class(mut self, class: ClassSelector) -> Self {
        self.class = class;
        self
    }

    pub fn layers(mut self, layers: LayerSelection) -> Self {
        self.layers = layers;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamResult {
    pub score: ClassScore,
    pub class_index: usize,
    /// Input-aligned map.
    pub heatmap: Heatmap,
    pub layer_set: LayerSet,
    pub records: Vec<ActivationRecord>,
}

/// Runs one explain pass and produces the requested method's input-aligned
/// map. `x` is the network input (after preprocessing).
pub fn explain(net: &Network, x: &Tensor, req: &CamRequest) -> Result<CamResult> {
    let layer_set = LayerSet::resolve(net.spec(), &req.layers)?;
    if req.method.is_single_layer() && layer_set.len() != 1 {
        return Err(Error::Argument(format!(
            "{} takes exactly one layer, got {}",
            req.method,
            layer_set.len()
        )));
    }
    let class_index = req
        .class
        .resolve(net.spec(), || Ok(net.forward(x)?.predicted))?;
    let (score, records) = net.explain_pass(x, class_index)?;
    let size = net.spec().spatial_size();
    let selected = layer_set.select(&records)?;
    let heatmap = match req.method {
        Method::GradCam => grad_cam_map(selected[0]).to_input(size)?,
        Method::GradCamPlusPlus => gradcampp_map(selected[0]).to_input(size)?,
        Method::ScoreCam => {
            score_cam_map(net, x, selected[0], class_index, req.score_cam)?.to_input(size)?
        }
        Method::LayerCam => layer_cam_map(&selected, size)?,
        Method::CombiCam => combi_cam(&selected, size, req.per_layer_normalize)?,
    };
    Ok(CamResult {
        score,
        class_index,
        heatmap,
        layer_set,
        records,
    })
}

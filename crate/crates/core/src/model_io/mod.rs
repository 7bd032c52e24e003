//! On-disk model format: a JSON manifest describing the architecture plus a
//! binary weights file of little-endian `f64` blobs.
//!
//! The weights file starts with the magic `CWGT`; each parameterised layer
//! owns one blob (weights then bias, row-major) located by the `offset` and
//! `length` fields of its manifest entry. The schema is documented in
//! `docs/model-format.md` at the repository root.

mod image;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LayerKind, LayerSpec, Network, NetworkSpec, Params, Preprocess};
use crate::tensor::Tensor;

pub use image::{decode_image, decode_png, encode_png, encode_tensor_png, quantize};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CWGT";
pub const MANIFEST_FORMAT: &str = "camforge-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PreprocessEntry>,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessEntry {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<u64>,
}

impl LayerEntry {
    fn from_spec(layer: &LayerSpec) -> Self {
        let mut e = LayerEntry {
            name: layer.name.clone(),
            kind: layer.kind.name().to_string(),
            block: layer.block,
            tagged: layer.tagged,
            ..Default::default()
        };
        match layer.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                e.in_channels = Some(in_channels);
                e.out_channels = Some(out_channels);
                e.kernel = Some(kernel);
                e.stride = Some(stride);
                e.padding = Some(padding);
            }
            LayerKind::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                padding,
            } => {
                e.out_channels = Some(channels);
                e.kernel = Some(kernel);
                e.stride = Some(stride);
                e.padding = Some(padding);
            }
            LayerKind::AffineChannel { channels } => e.out_channels = Some(channels),
            LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
                e.kernel = Some(kernel);
                e.stride = Some(stride);
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                e.in_channels = Some(in_features);
                e.out_channels = Some(out_features);
            }
            LayerKind::Relu
            | LayerKind::Silu
            | LayerKind::GlobalAvgPool
            | LayerKind::Flatten
            | LayerKind::Residual => {}
        }
        e
    }

    // `in_channels` of convolutions and dense layers may be omitted, in which
    // case it is taken from `inferred_in`.
    fn to_spec(&self, inferred_in: Option<usize>) -> std::result::Result<LayerSpec, String> {
        let req = |v: Option<usize>, field: &str| {
            v.ok_or_else(|| format!("layer '{}' ({}) is missing '{field}'", self.name, self.kind))
        };
        let in_ch = || {
            self.in_channels
                .or(inferred_in)
                .ok_or_else(|| format!("layer '{}' needs 'in_channels'", self.name))
        };
        let kind = match self.kind.as_str() {
            "conv2d" => LayerKind::Conv2d {
                in_channels: in_ch()?,
                out_channels: req(self.out_channels, "out_channels")?,
                kernel: req(self.kernel, "kernel")?,
                stride: self.stride.unwrap_or(1),
                padding: self.padding.unwrap_or(0),
            },
            "depthwise_conv2d" => LayerKind::DepthwiseConv2d {
                channels: req(self.out_channels, "out_channels")?,
                kernel: req(self.kernel, "kernel")?,
                stride: self.stride.unwrap_or(1),
                padding: self.padding.unwrap_or(0),
            },
            "affine_channel" => LayerKind::AffineChannel {
                channels: req(self.out_channels, "out_channels")?,
            },
            "relu" => LayerKind::Relu,
            "silu" => LayerKind::Silu,
            "max_pool2d" | "avg_pool2d" => {
                let kernel = req(self.kernel, "kernel")?;
                let stride = self.stride.unwrap_or(kernel);
                if self.kind == "max_pool2d" {
                    LayerKind::MaxPool2d { kernel, stride }
                } else {
                    LayerKind::AvgPool2d { kernel, stride }
                }
            }
            "global_avg_pool" => LayerKind::GlobalAvgPool,
            "flatten" => LayerKind::Flatten,
            "dense" => LayerKind::Dense {
                in_features: in_ch()?,
                out_features: req(self.out_channels, "out_channels")?,
            },
            "residual" => LayerKind::Residual,
            other => return Err(format!("layer '{}' has unknown kind '{other}'", self.name)),
        };
        if self.padding.is_some_and(|p| p > 0)
            && !matches!(kind, LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. })
        {
            return Err(format!("layer '{}': padding is only valid on convolutions", self.name));
        }
        Ok(LayerSpec {
            name: self.name.clone(),
            kind,
            block: self.block,
            tagged: self.tagged,
        })
    }
}

impl Manifest {
    /// Manifest for `net` with blobs packed contiguously after the magic.
    pub fn from_network(net: &Network) -> Self {
        let spec = net.spec();
        let mut offset = WEIGHTS_MAGIC.len() as u64;
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let mut e = LayerEntry::from_spec(l);
                let n = l.kind.param_count() as u64;
                if n > 0 {
                    e.offset = Some(offset);
                    e.length = Some(8 * n);
                    offset += 8 * n;
                }
                e
            })
            .collect();
        Manifest {
            format: MANIFEST_FORMAT.to_string(),
            input_shape: spec.input_shape.clone(),
            class_count: spec.class_count,
            class_labels: spec.class_labels.clone(),
            preprocess: (!spec.preprocess.is_identity()).then(|| PreprocessEntry {
                mean: spec.preprocess.mean.clone(),
                std: spec.preprocess.std.clone(),
            }),
            layers,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("unsupported format '{}'", m.format),
            });
        }
        Ok(m)
    }

    pub fn to_spec(&self, path: &Path) -> Result<NetworkSpec> {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        // Channel count flowing into each layer, for layers that omit it.
        let mut channels = self.input_shape.first().copied();
        for entry in &self.layers {
            let spec = entry.to_spec(channels).map_err(parse_err)?;
            channels = match spec.kind {
                LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
                LayerKind::GlobalAvgPool => channels,
                LayerKind::Flatten => None,
                LayerKind::Dense { out_features, .. } => Some(out_features),
                _ => channels,
            };
            layers.push(spec);
        }
        let preprocess = self
            .preprocess
            .as_ref()
            .map(|p| Preprocess {
                mean: p.mean.clone(),
                std: p.std.clone(),
            })
            .unwrap_or_default();
        if preprocess.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(parse_err("preprocess std entries must be finite and nonzero".into()));
        }
        Ok(NetworkSpec {
            input_shape: self.input_shape.clone(),
            class_count: self.class_count,
            class_labels: self.class_labels.clone(),
            preprocess,
            layers,
        })
    }
}

/// The weights file contents for `net`, laid out as [`Manifest::from_network`]
/// describes.
pub fn weights_bytes(net: &Network) -> Vec<u8> {
    let mut out = WEIGHTS_MAGIC.to_vec();
    for p in net.params().iter().flatten() {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_model(
    net: &Network,
    manifest_path: impl AsRef<Path>,
    weights_path: impl AsRef<Path>,
) -> Result<()> {
    let (mp, wp) = (manifest_path.as_ref(), weights_path.as_ref());
    fs::write(wp, weights_bytes(net)).map_err(|e| Error::io(wp, e))?;
    fs::write(mp, Manifest::from_network(net).to_json()).map_err(|e| Error::io(mp, e))?;
    Ok(())
}

pub fn load_model(manifest_path: impl AsRef<Path>, weights_path: impl AsRef<Path>) -> Result<Network> {
    let (mp, wp) = (manifest_path.as_ref(), weights_path.as_ref());
    let text = fs::read_to_string(mp).map_err(|e| Error::io(mp, e))?;
    let weights = fs::read(wp).map_err(|e| Error::io(wp, e))?;
    model_from_parts(&Manifest::parse(&text, mp)?, &weights, mp)
}

/// Builds a network from an already parsed manifest and weights buffer.
pub fn model_from_parts(manifest: &Manifest, weights: &[u8], manifest_path: &Path) -> Result<Network> {
    let spec = manifest.to_spec(manifest_path)?;
    spec.validate()?;
    if weights.len() < WEIGHTS_MAGIC.len() || &weights[..4] != WEIGHTS_MAGIC {
        return Err(Error::Bounds("weights file lacks the CWGT magic".into()));
    }

    let mut ranges: Vec<(u64, u64, &str)> = Vec::new();
    let mut params = Vec::with_capacity(spec.layers.len());
    for (layer, entry) in spec.layers.iter().zip(&manifest.layers) {
        let Some((ws, bs)) = layer.kind.param_shapes() else {
            if entry.offset.is_some() || entry.length.is_some() {
                return Err(Error::Bounds(format!(
                    "layer '{}' has no parameters but declares a blob",
                    layer.name
                )));
            }
            params.push(None);
            continue;
        };
        let (Some(offset), Some(length)) = (entry.offset, entry.length) else {
            return Err(Error::Bounds(format!("layer '{}' has no weight blob", layer.name)));
        };
        let expected = 8 * layer.kind.param_count() as u64;
        if length != expected {
            return Err(Error::Bounds(format!(
                "layer '{}' blob is {length} bytes, shape implies {expected}",
                layer.name
            )));
        }
        let end = offset.checked_add(length).unwrap_or(u64::MAX);
        if offset < WEIGHTS_MAGIC.len() as u64 || end > weights.len() as u64 {
            return Err(Error::Bounds(format!(
                "layer '{}' blob [{offset}, {end}) outside weights file of {} bytes",
                layer.name,
                weights.len()
            )));
        }
        ranges.push((offset, end, &layer.name));
        let values: Vec<f64> = weights[offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let nw: usize = ws.iter().product();
        params.push(Some(Params {
            weight: Tensor::new(ws, values[..nw].to_vec())?,
            bias: Tensor::new(bs, values[nw..].to_vec())?,
        }));
    }
    ranges.sort();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Bounds(format!(
                "blobs of '{}' and '{}' overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    Network::new(spec, params)
}

//! Small block-structured CNNs: architecture description, parameters,
//! forward inference and reverse-mode gradients.

mod engine;
mod layers;

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use engine::{ClassScore, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Folded normalization: per-channel `scale * x + bias`.
    AffineChannel { channels: usize },
    Relu,
    Silu,
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Dense { in_features: usize, out_features: usize },
    /// Adds the tensor that entered the enclosing block.
    Residual,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerKind::AffineChannel { .. } => "affine_channel",
            LayerKind::Relu => "relu",
            LayerKind::Silu => "silu",
            LayerKind::MaxPool2d { .. } => "max_pool2d",
            LayerKind::AvgPool2d { .. } => "avg_pool2d",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Residual => "residual",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. })
    }

    /// `(weight shape, bias shape)` for parameterised kinds.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerKind::DepthwiseConv2d {
                channels, kernel, ..
            } => Some((vec![channels, 1, kernel, kernel], vec![channels])),
            LayerKind::AffineChannel { channels } => Some((vec![channels], vec![channels])),
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    /// Number of `f64` values (weights then bias) stored for this layer.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub block: Option<usize>,
    /// Marks the last convolution of its block.
    pub tagged: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            block: None,
            tagged: false,
        }
    }

    pub fn in_block(mut self, block: usize) -> Self {
        self.block = Some(block);
        self
    }

    pub fn tagged(mut self) -> Self {
        self.tagged = true;
        self
    }
}

/// Per-channel input standardisation applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Preprocess {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preprocess {
    pub fn is_identity(&self) -> bool {
        self.mean.is_empty() && self.std.is_empty()
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(image.clone());
        }
        let (c, h, w) = image.dims3()?;
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::shape(format!(
                "preprocessing has {} means / {} stds for {c} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        let plane = h * w;
        let data = image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i / plane]) / self.std[i / plane])
            .collect();
        Tensor::new(vec![c, h, w], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub class_labels: Vec<String>,
    pub preprocess: Preprocess,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks every structural invariant and returns the activation shape at
    /// each position (`shapes[0]` is the input, `shapes[i + 1]` the output of
    /// layer `i`).
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        match self.input_shape[..] {
            [c, h, w] if (c == 1 || c == 3) && h > 0 && w > 0 => {}
            _ => {
                return Err(Error::shape(format!(
                    "input shape must be [1|3, H, W], got {:?}",
                    self.input_shape
                )))
            }
        }
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be positive".into()));
        }
        if !self.class_labels.is_empty() && self.class_labels.len() != self.class_count {
            return Err(Error::Config(format!(
                "{} class labels for {} classes",
                self.class_labels.len(),
                self.class_count
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }

        let mut names = HashSet::new();
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name '{}'", l.name)));
            }
        }
        self.check_blocks()?;

        let mut shapes = vec![self.input_shape.clone()];
        let mut block_inputs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shapes.last().unwrap().clone();
            if let Some(b) = layer.block {
                block_inputs.entry(b).or_insert_with(|| input.clone());
            }
            let prev = if i == 0 {
                "input".to_string()
            } else {
                format!("'{}'", self.layers[i - 1].name)
            };
            let out = layers::output_shape(&layer.kind, &input, layer.block.map(|b| &block_inputs[&b][..]))
                .map_err(|msg| {
                    Error::shape(format!(
                        "layer '{}' ({}) cannot follow {prev} with output {input:?}: {msg}",
                        layer.name,
                        layer.kind.name()
                    ))
                })?;
            shapes.push(out);
        }

        let last = self.layers.last().unwrap();
        match last.kind {
            LayerKind::Dense { out_features, .. } if out_features == self.class_count => {}
            _ => {
                return Err(Error::shape(format!(
                    "final layer '{}' must be dense with {} outputs",
                    last.name, self.class_count
                )))
            }
        }
        Ok(shapes)
    }

    fn check_blocks(&self) -> Result<()> {
        for l in &self.layers {
            if let Some(k) = match l.kind {
                LayerKind::Conv2d { kernel, stride, .. }
                | LayerKind::DepthwiseConv2d { kernel, stride, .. }
                | LayerKind::MaxPool2d { kernel, stride }
                | LayerKind::AvgPool2d { kernel, stride } => Some((kernel, stride)),
                _ => None,
            } {
                if k.0 == 0 || k.1 == 0 {
                    return Err(Error::Config(format!(
                        "layer '{}' needs kernel >= 1 and stride >= 1",
                        l.name
                    )));
                }
            }
            if l.tagged && !l.kind.is_conv() {
                return Err(Error::Tag(format!(
                    "layer '{}' is tagged but is {}, not a convolution",
                    l.name,
                    l.kind.name()
                )));
            }
            if l.tagged && l.block.is_none() {
                return Err(Error::Tag(format!("tagged layer '{}' has no block", l.name)));
            }
            if matches!(l.kind, LayerKind::Residual) && l.block.is_none() {
                return Err(Error::Config(format!(
                    "residual layer '{}' must belong to a block",
                    l.name
                )));
            }
        }

        // Blocks are contiguous runs carrying exactly one tagged convolution.
        let mut seen: Vec<usize> = Vec::new();
        let mut tags: BTreeMap<usize, usize> = BTreeMap::new();
        for l in &self.layers {
            if let Some(b) = l.block {
                match seen.last() {
                    Some(&last) if last == b => {}
                    _ if seen.contains(&b) => {
                        return Err(Error::Config(format!(
                            "block {b} is not contiguous (layer '{}')",
                            l.name
                        )))
                    }
                    _ => seen.push(b),
                }
                *tags.entry(b).or_default() += l.tagged as usize;
            }
        }
        for (b, n) in tags {
            if n != 1 {
                return Err(Error::Tag(format!(
                    "block {b} has {n} tagged convolutions, expected exactly one"
                )));
            }
        }
        Ok(())
    }

    pub fn tagged_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.tagged)
    }

    /// Distinct block ids in network order.
    pub fn blocks(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for l in &self.layers {
            if let Some(b) = l.block {
                if out.last() != Some(&b) {
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        (self.input_shape[1], self.input_shape[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A validated network together with its parameters. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Option<Params>>,
    shapes: Vec<Vec<usize>>,
    skip_from: Vec<Option<usize>>,
}

impl Network {
    pub fn new(spec: NetworkSpec, params: Vec<Option<Params>>) -> Result<Self> {
        let shapes = spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::Config(format!(
                "{} parameter slots for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (layer, p) in spec.layers.iter().zip(&params) {
            match (layer.kind.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws && p.bias.shape() == bs => {}
                (expected, _) => {
                    return Err(Error::shape(format!(
                        "layer '{}' parameters do not match expected shapes {expected:?}",
                        layer.name
                    )))
                }
            }
        }
        let mut skip_from = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            skip_from.push(match (layer.kind, layer.block) {
                (LayerKind::Residual, Some(b)) => spec.layers.iter().position(|l| l.block == Some(b)),
                _ => None,
            });
        }
        Ok(Network {
            spec,
            params,
            shapes,
            skip_from,
        })
    }

    /// He-style uniform initialisation with zero biases; affine layers start
    /// as the identity.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layers
            .iter()
            .map(|l| {
                let (ws, bs) = l.kind.param_shapes()?;
                let n: usize = ws.iter().product();
                let bias = Tensor::from_raw(bs.clone(), vec![0.0; bs.iter().product()]);
                let weight = if let LayerKind::AffineChannel { .. } = l.kind {
                    Tensor::from_raw(ws, vec![1.0; n])
                } else {
                    let fan_in: usize = ws[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::from_raw(ws, data)
                };
                Some(Params { weight, bias })
            })
            .collect();
        Network::new(spec, params)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    /// Activation shape at each position; index 0 is the input.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn with_params(&self, params: Vec<Option<Params>>) -> Result<Self> {
        Network::new(self.spec.clone(), params)
    }

    /// Flattened parameters of every layer, weights before bias, in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params.iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    /// Inverse of [`Network::flat_params`].
    pub fn with_flat_params(&self, flat: &[f64]) -> Result<Self> {
        let total: usize = self.spec.layers.iter().map(|l| l.kind.param_count()).sum();
        if flat.len() != total {
            return Err(Error::shape(format!(
                "{} flat parameters for a network with {total}",
                flat.len()
            )));
        }
        let mut pos = 0;
        let mut params = Vec::with_capacity(self.params.len());
        for layer in &self.spec.layers {
            params.push(match layer.kind.param_shapes() {
                None => None,
                Some((ws, bs)) => {
                    let nw: usize = ws.iter().product();
                    let nb: usize = bs.iter().product();
                    let weight = Tensor::new(ws, flat[pos..pos + nw].to_vec())?;
                    let bias = Tensor::new(bs, flat[pos + nw..pos + nw + nb].to_vec())?;
                    pos += nw + nb;
                    Some(Params { weight, bias })
                }
            });
        }
        self.with_params(params)
    }
}

/// The per-block output of an explain pass at one tagged layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layer_name: String,
    pub block: usize,
    /// `[C, H, W]` output of the tagged layer.
    pub activations: Tensor,
    /// Gradient of the class logit with respect to `activations`.
    pub gradients: Tensor,
    pub class_index: usize,
}

impl ActivationRecord {
    pub fn new(
        layer_name: impl Into<String>,
        block: usize,
        activations: Tensor,
        gradients: Tensor,
        class_index: usize,
    ) -> Result<Self> {
        activations.dims3()?;
        if activations.shape() != gradients.shape() {
            return Err(Error::shape(format!(
                "activations {:?} and gradients {:?} differ",
                activations.shape(),
                gradients.shape()
            )));
        }
        Ok(ActivationRecord {
            layer_name: layer_name.into(),
            block,
            activations,
            gradients,
            class_index,
        })
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        let s = self.activations.shape();
        (s[1], s[2])
    }
}

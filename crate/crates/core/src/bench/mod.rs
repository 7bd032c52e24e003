//! Synthetic localization benchmark: glyph-over-clutter scenes, a small SGD
//! trainer, and pointing-game / energy metrics for comparing CAM methods.

mod dataset;
mod metrics;
mod train;

use std::fmt::Write as _;

use crate::cam::{LayerSelection, Method};
use crate::error::Result;
use crate::net::{LayerKind, LayerSpec, Network, NetworkSpec, Preprocess};

pub use dataset::{
    dataset_files, export_dataset, generate_dataset, render_scene, BBox, SynthConfig, SyntheticScene, GLYPHS,
    GLYPH_SIZE,
};
pub use metrics::{pointing_game, score_map, LocalizationScore};
pub use train::{accuracy, sgd_step, train, EpochStats, TrainConfig, TrainOutcome};

/// Four-block reference CNN for `[1, size, size]` scenes.
///
/// Each block is a 3x3 "same" convolution (the tagged layer) followed by
/// ReLU. The first two blocks end in 2x2 max pooling, so the tagged maps are
/// `size`, `size / 2`, `size / 4` and `size / 4` on a side.
pub fn reference_network_spec(patterns: usize, size: usize) -> NetworkSpec {
    let conv = |i, o| LayerKind::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let pool = LayerKind::MaxPool2d { kernel: 2, stride: 2 };
    let widths = [(1, 8, true), (8, 16, true), (16, 32, false), (32, 32, false)];
    let mut layers = Vec::new();
    for (b, &(i, o, pooled)) in widths.iter().enumerate() {
        layers.push(LayerSpec::new(format!("block{b}_conv"), conv(i, o)).in_block(b).tagged());
        layers.push(LayerSpec::new(format!("block{b}_relu"), LayerKind::Relu).in_block(b));
        if pooled {
            layers.push(LayerSpec::new(format!("block{b}_pool"), pool).in_block(b));
        }
    }
    layers.push(LayerSpec::new("head_pool", LayerKind::GlobalAvgPool));
    layers.push(LayerSpec::new(
        "head_fc",
        LayerKind::Dense {
            in_features: 32,
            out_features: patterns,
        },
    ));
    NetworkSpec {
        input_shape: vec![1, size, size],
        class_count: patterns,
        class_labels: GLYPHS[..patterns].iter().map(|g| g.0.to_string()).collect(),
        preprocess: Preprocess::default(),
        layers,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub synth: SynthConfig,
    pub train_count: usize,
    pub held_out_count: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            synth: SynthConfig::default(),
            train_count: 800,
            held_out_count: 200,
            train: TrainConfig::default(),
            seed: 7,
        }
    }
}

impl BenchConfig {
    fn derive(&self, stream: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    pub fn train_scenes(&self) -> Result<Vec<SyntheticScene>> {
        generate_dataset(&SynthConfig {
            count: self.train_count,
            seed: self.derive(1),
            ..self.synth
        })
    }

    pub fn held_out_scenes(&self) -> Result<Vec<SyntheticScene>> {
        generate_dataset(&SynthConfig {
            count: self.held_out_count,
            seed: self.derive(2),
            ..self.synth
        })
    }

    pub fn initial_network(&self) -> Result<Network> {
        Network::init(
            reference_network_spec(self.synth.patterns, self.synth.height),
            self.derive(3),
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.derive(4),
            ..self.train
        }
    }

    /// Trains the reference network from its seeded initialisation.
    pub fn train_reference(&self) -> Result<TrainOutcome> {
        let net = self.initial_network()?;
        train(&net, &self.train_scenes()?, &self.held_out_scenes()?, &self.train_config())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub layers: LayerSelection,
    pub score: LocalizationScore,
}

/// Method / layer-set pairs compared by [`evaluate_methods`].
pub fn bench_entries() -> Vec<(Method, LayerSelection)> {
    vec![
        (Method::CombiCam, LayerSelection::AllBlocks),
        (Method::GradCam, LayerSelection::LastOnly),
        (Method::GradCamPlusPlus, LayerSelection::LastOnly),
        (Method::ScoreCam, LayerSelection::LastOnly),
        (Method::LayerCam, LayerSelection::AllBlocks),
    ]
}

pub fn evaluate_methods(net: &Network, scenes: &[SyntheticScene]) -> Result<Vec<BenchRow>> {
    bench_entries()
        .into_iter()
        .map(|(method, layers)| {
            let score = pointing_game(net, scenes, method, &layers)?;
            Ok(BenchRow {
                method,
                layers,
                score,
            })
        })
        .collect()
}

fn selection_label(sel: &LayerSelection) -> String {
    match sel {
        LayerSelection::AllBlocks => "all-blocks".into(),
        LayerSelection::LastOnly => "last".into(),
        LayerSelection::Blocks(ids) => ids
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(";"),
        LayerSelection::Names(n) => n.join(";"),
    }
}

/// CSV with header `method,layers,hits,n_scenes,hit_rate,energy_ratio`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("method,layers,hits,n_scenes,hit_rate,energy_ratio\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{:?},{:?}",
            r.method,
            selection_label(&r.layers),
            r.score.pointing_hits,
            r.score.n_scenes,
            r.score.hit_rate(),
            r.score.energy_ratio
        )
        .unwrap();
    }
    s
}

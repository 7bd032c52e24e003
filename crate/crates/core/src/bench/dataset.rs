use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model_io::encode_tensor_png;
use crate::tensor::Tensor;

pub const GLYPH_SIZE: usize = 7;

/// Distinguishable 7x7 glyphs; a scene's class is the glyph's index.
pub const GLYPHS: [(&str, [&str; GLYPH_SIZE]); 6] = [
    (
        "cross",
        ["...#...", "...#...", "...#...", "#######", "...#...", "...#...", "...#..."],
    ),
    (
        "ring",
        [".#####.", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", ".#####."],
    ),
    (
        "corner",
        ["#......", "#......", "#......", "#......", "#......", "#......", "#######"],
    ),
    (
        "saltire",
        ["#.....#", ".#...#.", "..#.#..", "...#...", "..#.#..", ".#...#.", "#.....#"],
    ),
    (
        "tee",
        ["#######", "...#...", "...#...", "...#...", "...#...", "...#...", "...#..."],
    ),
    (
        "bars",
        ["#######", ".......", ".......", "#######", ".......", ".......", "#######"],
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row)
            && (self.left..self.left + self.width).contains(&col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[1, H, W]` grayscale image in `[0, 1]`.
    pub image: Tensor,
    pub pattern_class: usize,
    pub pattern_bbox: BBox,
    pub clutter_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub patterns: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    /// Peak value of the background texture; glyph strokes are 1.0.
    pub clutter_amplitude: f64,
    /// Spacing in pixels of the value-noise lattice.
    pub clutter_cell: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patterns: 4,
            height: 32,
            width: 32,
            count: 0,
            seed: 0,
            clutter_amplitude: 0.35,
            clutter_cell: 4,
        }
    }
}

/// Seeded value noise: a random lattice bilinearly interpolated, scaled to
/// `[0, amplitude]`.
fn value_noise(h: usize, w: usize, cell: usize, amplitude: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lh, lw) = (h.div_ceil(cell) + 1, w.div_ceil(cell) + 1);
    let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (gy, fy) = (y / cell, (y % cell) as f64 / cell as f64);
        for x in 0..w {
            let (gx, fx) = (x / cell, (x % cell) as f64 / cell as f64);
            let at = |r: usize, c: usize| lattice[r * lw + c];
            let top = at(gy, gx) * (1.0 - fx) + at(gy, gx + 1) * fx;
            let bottom = at(gy + 1, gx) * (1.0 - fx) + at(gy + 1, gx + 1) * fx;
            out.push(amplitude * (top * (1.0 - fy) + bottom * fy));
        }
    }
    Tensor::new(vec![h, w], out)
}

pub fn render_scene(
    cfg: &SynthConfig,
    class: usize,
    top: usize,
    left: usize,
    clutter_seed: u64,
) -> Result<SyntheticScene> {
    let (h, w) = (cfg.height, cfg.width);
    let mut data = if cfg.clutter_amplitude > 0.0 {
        value_noise(h, w, cfg.clutter_cell.max(1), cfg.clutter_amplitude, clutter_seed)?.into_data()
    } else {
        vec![0.0; h * w]
    };
    let (_, rows) = GLYPHS[class];
    for (r, row) in rows.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                data[(top + r) * w + left + c] = 1.0;
            }
        }
    }
    Ok(SyntheticScene {
        image: Tensor::new(vec![1, h, w], data)?,
        pattern_class: class,
        pattern_bbox: BBox {
            top,
            left,
            height: GLYPH_SIZE,
            width: GLYPH_SIZE,
        },
        clutter_seed,
    })
}

/// `count` scenes, each with one glyph of a uniformly drawn class at a
/// uniformly drawn position over value-noise clutter.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SyntheticScene>> {
    if cfg.patterns == 0 || cfg.patterns > GLYPHS.len() {
        return Err(Error::Config(format!(
            "pattern count {} outside 1..={}",
            cfg.patterns,
            GLYPHS.len()
        )));
    }
    if cfg.height < GLYPH_SIZE || cfg.width < GLYPH_SIZE {
        return Err(Error::Config(format!(
            "{GLYPH_SIZE}x{GLYPH_SIZE} pattern does not fit a {}x{} image",
            cfg.height, cfg.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|_| {
            let class = rng.random_range(0..cfg.patterns);
            let top = rng.random_range(0..=cfg.height - GLYPH_SIZE);
            let left = rng.random_range(0..=cfg.width - GLYPH_SIZE);
            let clutter_seed = rng.random::<u64>();
            render_scene(cfg, class, top, left, clutter_seed)
        })
        .collect()
}

/// `scene_NNNNN.png` images followed by an `index.csv` with header
/// `filename,class,top,left,height,width`, as `(file name, bytes)` pairs.
pub fn dataset_files(scenes: &[SyntheticScene]) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::with_capacity(scenes.len() + 1);
    let mut index = String::from("filename,class,top,left,height,width\n");
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("scene_{i:05}.png");
        let b = s.pattern_bbox;
        writeln!(
            index,
            "{name},{},{},{},{},{}",
            s.pattern_class, b.top, b.left, b.height, b.width
        )
        .unwrap();
        files.push((name, encode_tensor_png(&s.image)?));
    }
    files.push(("index.csv".to_string(), index.into_bytes()));
    Ok(files)
}

/// Writes [`dataset_files`] into `dir`, creating it if needed.
pub fn export_dataset(scenes: &[SyntheticScene], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let files = dataset_files(scenes)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

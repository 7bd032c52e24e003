//! Heatmap overlays, side-by-side grids and block-profile charts.
//!
//! Colours follow a fixed five-stop piecewise-linear map, low to high:
//!
//! | value | colour | RGB           |
//! |-------|--------|---------------|
//! | 0.00  | blue   | (0, 0, 255)   |
//! | 0.25  | cyan   | (0, 255, 255) |
//! | 0.50  | green  | (0, 255, 0)   |
//! | 0.75  | yellow | (255, 255, 0) |
//! | 1.00  | red    | (255, 0, 0)   |

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model_io::{encode_png, quantize};
use crate::tensor::Tensor;

pub const COLORMAP_STOPS: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 1.0]),
    (0.25, [0.0, 1.0, 1.0]),
    (0.5, [0.0, 1.0, 0.0]),
    (0.75, [1.0, 1.0, 0.0]),
    (1.0, [1.0, 0.0, 0.0]),
];

/// Colour for a value in `[0, 1]` (clamped), components in `[0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    for pair in COLORMAP_STOPS.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if t <= t1 {
            let f = (t - t0) / (t1 - t0);
            return [0, 1, 2].map(|i| c0[i] + f * (c1[i] - c0[i]));
        }
    }
    COLORMAP_STOPS[4].1
}

/// Position of a colour along the map, the inverse of [`colormap`] on its
/// image. Used to check monotonicity.
pub fn colormap_index(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    if r == 0.0 && g < 1.0 {
        0.25 * g
    } else if r == 0.0 && b > 0.0 {
        0.25 + 0.25 * (1.0 - b)
    } else if g == 1.0 && r < 1.0 {
        0.5 + 0.25 * r
    } else {
        0.75 + 0.25 * (1.0 - g)
    }
}

/// Interleaved RGB bytes of `image` blended with the colourised map.
pub fn overlay_pixels(image: &Tensor, map: &Tensor, alpha: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("image has {c} channels")));
    }
    if map.shape() != [h, w] {
        return Err(Error::shape(format!(
            "heatmap {:?} is not aligned with {h}x{w} image",
            map.shape()
        )));
    }
    let norm = map.min_max_normalize();
    let (img, m) = (image.data(), norm.data());
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        let color = colormap(m[p]);
        for (ch, col) in color.iter().enumerate() {
            let base = img[(if c == 3 { ch } else { 0 }) * h * w + p];
            out.push(quantize((1.0 - alpha) * base + alpha * col));
        }
    }
    Ok(out)
}

/// PNG of the heatmap blended over `image` (`[1|3, H, W]` in `[0, 1]`).
pub fn render_overlay(image: &Tensor, map: &Tensor, alpha: f64) -> Result<Vec<u8>> {
    let (_, h, w) = image.dims3()?;
    encode_png(w, h, 3, &overlay_pixels(image, map, alpha)?)
}

pub const GRID_GAP: usize = 4;

/// Places equally sized RGB panels left to right with white gutters.
pub fn render_grid(panels: &[Vec<u8>], width: usize, height: usize) -> Result<Vec<u8>> {
    if panels.is_empty() {
        return Err(Error::Argument("grid needs at least one panel".into()));
    }
    if let Some(p) = panels.iter().find(|p| p.len() != 3 * width * height) {
        return Err(Error::shape(format!(
            "panel of {} bytes in a {width}x{height} grid",
            p.len()
        )));
    }
    let n = panels.len();
    let total_w = n * width + (n - 1) * GRID_GAP;
    let mut out = vec![255u8; 3 * total_w * height];
    for (k, panel) in panels.iter().enumerate() {
        let x0 = k * (width + GRID_GAP);
        for y in 0..height {
            let dst = 3 * (y * total_w + x0);
            out[dst..dst + 3 * width].copy_from_slice(&panel[3 * y * width..3 * (y + 1) * width]);
        }
    }
    encode_png(total_w, height, 3, &out)
}

pub fn profile_csv(profile: &[(usize, f64)]) -> String {
    let mut s = String::from("block,max_activation\n");
    for (b, v) in profile {
        writeln!(s, "{b},{v:?}").unwrap();
    }
    s
}

/// Geometry of the profile chart.
pub mod chart {
    pub const MARGIN: usize = 8;
    pub const BAR_WIDTH: usize = 12;
    pub const BAR_GAP: usize = 4;
    pub const PLOT_HEIGHT: usize = 100;
    pub const BAR_COLOR: [u8; 3] = [200, 40, 40];
    pub const AXIS_COLOR: [u8; 3] = [0, 0, 0];

    pub fn width(bars: usize) -> usize {
        2 * MARGIN + bars * BAR_WIDTH + bars.saturating_sub(1) * BAR_GAP
    }

    pub fn height() -> usize {
        2 * MARGIN + PLOT_HEIGHT + 1
    }

    /// Left pixel column of bar `i`.
    pub fn bar_x(i: usize) -> usize {
        MARGIN + i * (BAR_WIDTH + BAR_GAP)
    }

    /// Row of the baseline axis.
    pub fn axis_y() -> usize {
        MARGIN + PLOT_HEIGHT
    }
}

/// Bar chart of per-block peak magnitudes, plus its CSV.
pub fn render_profile(profile: &[(usize, f64)]) -> Result<(Vec<u8>, String)> {
    if profile.is_empty() {
        return Err(Error::Argument("empty activation profile".into()));
    }
    let (w, h) = (chart::width(profile.len()), chart::height());
    let mut px = vec![255u8; 3 * w * h];
    let mut put = |x: usize, y: usize, c: [u8; 3]| px[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&c);
    let peak = profile.iter().map(|p| p.1).fold(0.0, f64::max);
    for (i, &(_, v)) in profile.iter().enumerate() {
        let bar_h = if peak > 0.0 {
            ((v.max(0.0) / peak) * chart::PLOT_HEIGHT as f64).round() as usize
        } else {
            0
        };
        for y in chart::axis_y() - bar_h..chart::axis_y() {
            for x in chart::bar_x(i)..chart::bar_x(i) + chart::BAR_WIDTH {
                put(x, y, chart::BAR_COLOR);
            }
        }
    }
    for x in chart::MARGIN / 2..w - chart::MARGIN / 2 {
        put(x, chart::axis_y(), chart::AXIS_COLOR);
    }
    Ok((encode_png(w, h, 3, &px)?, profile_csv(profile)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::decode_png;

    fn rgb8(c: [f64; 3]) -> [u8; 3] {
        c.map(quantize)
    }

    #[test]
    fn stops_are_exact() {
        assert_eq!(rgb8(colormap(0.0)), [0, 0, 255]);
        assert_eq!(rgb8(colormap(0.25)), [0, 255, 255]);
        assert_eq!(rgb8(colormap(0.5)), [0, 255, 0]);
        assert_eq!(rgb8(colormap(0.75)), [255, 255, 0]);
        assert_eq!(rgb8(colormap(1.0)), [255, 0, 0]);
    }

    #[test]
    fn overlay_thirds_map_to_table_colors() {
        // 1/3 sits a third of the way from cyan to green: blue = 255 * 2/3.
        // 2/3 sits two thirds of the way from green to yellow: red = 255 * 2/3.
        let img = Tensor::zeros(&[3, 2, 2]).unwrap();
        let map = Tensor::new(vec![2, 2], vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let px = overlay_pixels(&img, &map, 1.0).unwrap();
        assert_eq!(px, vec![0, 0, 255, 0, 255, 170, 170, 255, 0, 255, 0, 0]);
    }

    #[test]
    fn alpha_zero_reproduces_base_image() {
        let data: Vec<f64> = (0..12).map(|i| (i * 17) as f64 / 255.0).collect();
        let img = Tensor::new(vec![3, 2, 2], data).unwrap();
        let map = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let png = render_overlay(&img, &map, 0.0).unwrap();
        assert_eq!(decode_png(&png).unwrap(), img);
    }

    #[test]
    fn constant_map_full_alpha_is_solid_blue() {
        let img = Tensor::full(&[1, 3, 3], 0.5).unwrap();
        let map = Tensor::zeros(&[3, 3]).unwrap();
        let px = overlay_pixels(&img, &map, 1.0).unwrap();
        assert!(px.chunks(3).all(|p| p == [0, 0, 255]));
    }

    #[test]
    fn overlay_rejects_misaligned_and_bad_alpha() {
        let img = Tensor::zeros(&[3, 2, 2]).unwrap();
        assert!(matches!(
            overlay_pixels(&img, &Tensor::zeros(&[2, 3]).unwrap(), 0.5),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            overlay_pixels(&img, &Tensor::zeros(&[2, 2]).unwrap(), 1.5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn colormap_is_monotone() {
        let mut prev = -1.0;
        for i in 0..=1000 {
            let idx = colormap_index(colormap(i as f64 / 1000.0));
            assert!(idx >= prev - 1e-12, "at {i}: {idx} < {prev}");
            prev = idx;
        }
    }

    fn bar_height(png: &[u8], bar: usize) -> usize {
        let img = decode_png(png).unwrap();
        let (_, h, w) = img.dims3().unwrap();
        let x = chart::bar_x(bar) + chart::BAR_WIDTH / 2;
        let d = img.data();
        (0..h)
            .filter(|&y| {
                let px = [0, 1, 2].map(|c| quantize(d[(c * h + y) * w + x]));
                px == chart::BAR_COLOR
            })
            .count()
    }

    #[test]
    fn profile_chart_and_csv() {
        let (png, csv) = render_profile(&[(0, 1.0), (1, 5.0), (2, 2.0)]).unwrap();
        assert_eq!(csv, "block,max_activation\n0,1.0\n1,5.0\n2,2.0\n");
        let heights: Vec<usize> = (0..3).map(|b| bar_height(&png, b)).collect();
        assert_eq!(heights, vec![20, 100, 40]);

        let (png, csv) = render_profile(&[(0, 0.0), (1, 0.0)]).unwrap();
        assert_eq!(csv, "block,max_activation\n0,0.0\n1,0.0\n");
        assert_eq!(bar_height(&png, 0) + bar_height(&png, 1), 0);

        let (png, csv) = render_profile(&[(4, 0.5)]).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(bar_height(&png, 0), chart::PLOT_HEIGHT);
        assert!(render_profile(&[]).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let img = Tensor::full(&[3, 4, 4], 0.3).unwrap();
        let map = Tensor::new(vec![4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        assert_eq!(
            render_overlay(&img, &map, 0.4).unwrap(),
            render_overlay(&img, &map, 0.4).unwrap()
        );
    }
}

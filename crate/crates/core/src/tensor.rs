//! Dense row-major `f64` tensors and the handful of primitives the CAM
//! methods are built from.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic prefix of the raw tensor interchange format.
pub const TENSOR_MAGIC: &[u8; 4] = b"CTEN";

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor rank must be at least 1"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::shape(format!(
            "shape {shape:?} implies {expected} elements, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor, rejecting bad shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by our own kernels.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert!(check_shape(&shape, data.len()).is_ok(), "bad shape {shape:?}");
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor data");
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(H, W)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Copy of channel `k` of a rank-3 tensor as an `[H, W]` tensor.
    pub fn channel(&self, k: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if k >= c {
            return Err(Error::Range(format!("channel {k} out of {c}")));
        }
        Ok(Tensor::from_raw(
            vec![h, w],
            self.data[k * h * w..(k + 1) * h * w].to_vec(),
        ))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    /// Elementwise maximum of two same-shaped tensors.
    pub fn max_with(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, f64::max)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Flat index of the maximum; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn elementwise_relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    /// Spatial mean of each channel of a `[C, H, W]` tensor.
    pub fn channel_mean(&self) -> Result<Vec<f64>> {
        let (c, h, w) = self.dims3()?;
        let z = (h * w) as f64;
        Ok((0..c)
            .map(|k| self.data[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / z)
            .collect())
    }

    /// `out[i,j] = sum_k w[k] * t[k,i,j]`, accumulated in channel order.
    pub fn weighted_channel_sum(&self, weights: &[f64]) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if weights.len() != c {
            return Err(Error::shape(format!(
                "{} weights for {c} channels",
                weights.len()
            )));
        }
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for (k, &wk) in weights.iter().enumerate() {
            let src = &self.data[k * plane..(k + 1) * plane];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += wk * v;
            }
        }
        Tensor::new(vec![h, w], out)
    }

    /// Bilinear resampling of an `[H, W]` map onto a larger grid.
    ///
    /// Pixel centres are aligned: output `(i, j)` samples the source at
    /// `((i + 0.5) * h / H - 0.5, (j + 0.5) * w / W - 0.5)`, clamped to the
    /// source extent. Equal shapes return an exact copy.
    pub fn bilinear_upsample(&self, target: (usize, usize)) -> Result<Tensor> {
        let (sh, sw) = self.dims2()?;
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::shape(format!("zero-sized target {th}x{tw}")));
        }
        if th < sh || tw < sw {
            return Err(Error::shape(format!(
                "cannot upsample {sh}x{sw} to smaller {th}x{tw}"
            )));
        }
        if (th, tw) == (sh, sw) {
            return Ok(self.clone());
        }
        let rows: Vec<(usize, usize, f64)> = (0..th).map(|i| sample_coord(i, sh, th)).collect();
        let cols: Vec<(usize, usize, f64)> = (0..tw).map(|j| sample_coord(j, sw, tw)).collect();
        let src = &self.data;
        let mut out = Vec::with_capacity(th * tw);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = lerp(src[y0 * sw + x0], src[y0 * sw + x1], fx);
                let bottom = lerp(src[y1 * sw + x0], src[y1 * sw + x1], fx);
                out.push(lerp(top, bottom, fy));
            }
        }
        Tensor::new(vec![th, tw], out)
    }

    /// Rescales to `[0, 1]`; a constant tensor maps to all zeros.
    pub fn min_max_normalize(&self) -> Tensor {
        let (lo, hi) = (self.min(), self.max());
        let data = if hi > lo {
            let range = hi - lo;
            self.data
                .iter()
                .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Tensor::from_raw(self.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut rd = ByteReader { bytes, pos: 0 };
        if rd.take(4)? != TENSOR_MAGIC {
            return Err(Error::Bounds("missing CTEN magic".into()));
        }
        let rank = rd.u32()? as usize;
        let shape = (0..rank)
            .map(|_| rd.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
        if rd.pos != bytes.len() {
            return Err(Error::Bounds(format!(
                "{} trailing bytes after tensor payload",
                bytes.len() - rd.pos
            )));
        }
        Tensor::new(shape, data)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }
}

fn sample_coord(out_idx: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = (out_idx as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let s = s.clamp(0.0, (src_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

// Written as `a + t (b - a)` so equal endpoints reproduce exactly; the clamp
// keeps rounding from stepping outside the endpoint range.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Bounds(format!(
                "truncated tensor: need {n} bytes at offset {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![0, 2], vec![]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![], vec![]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new(vec![2], vec![0.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relu_cases() {
        let neg = t(&[3], &[-1.0, -2.0, -0.5]);
        assert_eq!(neg.elementwise_relu().data(), &[0.0; 3]);
        let pos = t(&[2, 2], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(pos.elementwise_relu(), pos);

        let x = t(&[2, 2], &[-1.0, 2.0, 0.0, -3.0]);
        let oracle: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        assert_eq!(x.elementwise_relu().data(), &oracle[..]);
        assert_eq!(x.elementwise_relu().data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_mean_cases() {
        let c = Tensor::full(&[1, 3, 5], 2.0).unwrap();
        assert_eq!(c.channel_mean().unwrap(), vec![2.0]);
        assert_eq!(Tensor::zeros(&[3, 2, 2]).unwrap().channel_mean().unwrap(), vec![0.0; 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 3], &mut rng);
        let got = x.channel_mean().unwrap();
        for (k, g) in got.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += x.data()[k * 9 + i * 3 + j];
                }
            }
            assert!((g - acc / 9.0).abs() < 1e-15);
        }

        assert!(matches!(t(&[4], &[1.0; 4]).channel_mean(), Err(Error::Shape(_))));
    }

    #[test]
    fn weighted_channel_sum_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 2, 4], &mut rng);
        let sel = x.weighted_channel_sum(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(sel, x.channel(1).unwrap());
        let zero = x.weighted_channel_sum(&[0.0; 3]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mut data = vec![1.0; 4];
        data.extend([2.0; 4]);
        let two = t(&[2, 2, 2], &data);
        assert_eq!(two.weighted_channel_sum(&[1.0, -1.0]).unwrap().data(), &[-1.0; 4]);

        assert!(matches!(x.weighted_channel_sum(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_single_pixel_and_identity() {
        let one = t(&[1, 1], &[0.7]);
        let up = one.bilinear_upsample((5, 3)).unwrap();
        assert_eq!(up.shape(), &[5, 3]);
        assert!(up.data().iter().all(|&v| v == 0.7));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 4], &mut rng);
        assert_eq!(x.bilinear_upsample((3, 4)).unwrap(), x);
    }

    #[test]
    fn upsample_two_by_two_to_four_by_four() {
        // Independent per-pixel evaluation of the coordinate mapping.
        let src = [[0.0, 1.0], [2.0, 3.0]];
        let oracle = |i: usize, j: usize| {
            let sy = ((i as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
            let sx = ((j as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            (1.0 - fy) * ((1.0 - fx) * src[y0][x0] + fx * src[y0][x1])
                + fy * ((1.0 - fx) * src[y1][x0] + fx * src[y1][x1])
        };
        let up = t(&[2, 2], &[0.0, 1.0, 2.0, 3.0]).bilinear_upsample((4, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((up.data()[i * 4 + j] - oracle(i, j)).abs() < 1e-12);
            }
        }
        // Frozen values from the oracle above.
        let expected = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        assert_eq!(up.data(), &expected);
    }

    #[test]
    fn upsample_errors() {
        let x = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(x.bilinear_upsample((0, 4)), Err(Error::Shape(_))));
        assert!(matches!(x.bilinear_upsample((1, 4)), Err(Error::Shape(_))));
        assert!(matches!(t(&[1, 2, 2], &[0.0; 4]).bilinear_upsample((4, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(Tensor::full(&[3], 4.2).unwrap().min_max_normalize().data(), &[0.0; 3]);
        assert_eq!(t(&[3], &[0.0, 5.0, 10.0]).min_max_normalize().data(), &[0.0, 0.5, 1.0]);
        let unit = t(&[4], &[0.0, 0.25, 1.0, 0.5]);
        assert_eq!(unit.min_max_normalize(), unit);
    }

    #[test]
    fn cten_rejects_truncation_and_bad_magic() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = x.to_bytes();
        assert_eq!(&bytes[..4], b"CTEN");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 48);
        assert!(matches!(Tensor::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Bounds(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::from_bytes(&bad).is_err());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(t(&[4], &[1.0, 3.0, 3.0, 0.0]).argmax(), 1);
        assert_eq!(Tensor::zeros(&[2, 2]).unwrap().argmax(), 0);
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(-10.0f64..10.0, c * h * w)
                .prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn relu_idempotent(x in tensor_strategy()) {
            let once = x.elementwise_relu();
            prop_assert_eq!(once.elementwise_relu(), once);
        }

        #[test]
        fn channel_mean_linear(x in tensor_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let y = x.map(|v| v.sin() * 4.0).unwrap();
            let combo = x.scale(a).unwrap().add(&y.scale(b).unwrap()).unwrap();
            let lhs = combo.channel_mean().unwrap();
            let (mx, my) = (x.channel_mean().unwrap(), y.channel_mean().unwrap());
            for k in 0..lhs.len() {
                let rhs = a * mx[k] + b * my[k];
                let scale = rhs.abs().max(a.abs() * 10.0 + b.abs() * 4.0).max(1.0);
                prop_assert!((lhs[k] - rhs).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn upsample_preserves_range_and_constants(
            x in tensor_strategy(), dh in 0usize..6, dw in 0usize..6, v in -5.0f64..5.0
        ) {
            let plane = x.channel(0).unwrap();
            let (h, w) = plane.dims2().unwrap();
            let up = plane.bilinear_upsample((h + dh, w + dw)).unwrap();
            prop_assert!(up.min() >= plane.min() && up.max() <= plane.max());
            let c = Tensor::full(&[h, w], v).unwrap();
            let cu = c.bilinear_upsample((h + dh, w + dw)).unwrap();
            prop_assert!(cu.data().iter().all(|&u| u == v));
        }

        #[test]
        fn normalize_in_unit_interval(x in tensor_strategy()) {
            let n = x.min_max_normalize();
            prop_assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn cten_round_trip(x in tensor_strategy()) {
            prop_assert_eq!(Tensor::from_bytes(&x.to_bytes()).unwrap(), x);
        }
    }
}

use std::fs;
use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes an 8-bit RGB or grayscale PNG into a `[C, H, W]` tensor scaled
/// to `[0, 1]`.
pub fn decode_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| match e {
        Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let bad = |e: png::DecodingError| Error::Image(format!("corrupt PNG: {e}"));
    let mut reader = Decoder::new(Cursor::new(bytes)).read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::Image(format!(
            "unsupported bit depth {:?}, expected 8",
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::Rgb => 3,
        other => return Err(Error::Image(format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0.0; channels * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = f64::from(row[x * channels + c]) / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Encodes interleaved 8-bit pixels (`channels` is 1 or 3).
pub fn encode_png(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let color = match channels {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        _ => return Err(Error::Image(format!("cannot encode {channels} channels"))),
    };
    if pixels.len() != width * height * channels {
        return Err(Error::shape(format!(
            "{} bytes for a {width}x{height}x{channels} image",
            pixels.len()
        )));
    }
    let mut out = Vec::new();
    let mut enc = Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    let err = |e: png::EncodingError| Error::Image(format!("PNG encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(pixels).map_err(err)?;
    writer.finish().map_err(err)?;
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[1|3, H, W]` tensor with values in `[0, 1]`.
pub fn encode_tensor_png(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    let d = image.data();
    let mut pixels = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                pixels.push(quantize(d[(ch * h + y) * w + x]));
            }
        }
    }
    encode_png(w, h, c, &pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black_pixels() {
        let white = encode_png(1, 1, 3, &[255, 255, 255]).unwrap();
        assert_eq!(decode_png(&white).unwrap().data(), &[1.0; 3]);
        let black = encode_png(1, 1, 1, &[0]).unwrap();
        let t = decode_png(&black).unwrap();
        assert_eq!(t.shape(), &[1, 1, 1]);
        assert_eq!(t.data(), &[0.0]);
    }

    #[test]
    fn two_by_two_known_pixels() {
        let px = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 255];
        let t = decode_png(&encode_png(2, 2, 3, &px).unwrap()).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        // channel-major: red plane is pixels 0,3,6,9 of the interleaved buffer
        let expect: Vec<f64> = [10, 40, 70, 100, 20, 50, 80, 110, 30, 60, 90, 255]
            .iter()
            .map(|&v| v as f64 / 255.0)
            .collect();
        assert_eq!(t.data(), &expect[..]);
    }

    #[test]
    fn rejects_rgba_and_garbage() {
        let mut out = Vec::new();
        let mut enc = Encoder::new(&mut out, 1, 1);
        enc.set_color(ColorType::Rgba);
        enc.set_depth(BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[1, 2, 3, 4]).unwrap();
        w.finish().unwrap();
        assert!(matches!(decode_png(&out), Err(Error::Image(_))));
        assert!(matches!(decode_png(b"not a png"), Err(Error::Image(_))));
    }

    #[test]
    fn tensor_png_round_trip_is_exact_on_8bit_values() {
        let data: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let t = Tensor::new(vec![3, 2, 2], data).unwrap();
        assert_eq!(decode_png(&encode_tensor_png(&t).unwrap()).unwrap(), t);
    }
}

//! PNG decoding and encoding for images, scribbles, probability maps and masks.

use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::features::{RgbImage, ScribblePair};
use crate::linops::ProbabilityMap;

/// Decoded pixels as 16-bit RGBA, with the original bit depth's maximum.
struct Rgba {
    width: usize,
    height: usize,
    pixels: Vec<[u16; 4]>,
    max: u16,
}

fn decode_err(e: impl std::fmt::Display) -> Error {
    Error::Image { path: "<memory>".into(), reason: e.to_string() }
}

fn decode_rgba(bytes: &[u8]) -> Result<Rgba> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| decode_err("image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(decode_err("unexpanded palette image")),
    };
    let (wide, max) = match info.bit_depth {
        BitDepth::Eight => (false, u8::MAX as u16),
        BitDepth::Sixteen => (true, u16::MAX),
        other => return Err(decode_err(format!("unsupported bit depth {other:?}"))),
    };
    let stride = info.line_size;
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        let row = &buf[y * stride..(y + 1) * stride];
        for x in 0..width {
            let sample = |c: usize| -> u16 {
                let k = x * channels + c;
                if wide {
                    u16::from_be_bytes([row[2 * k], row[2 * k + 1]])
                } else {
                    row[k] as u16
                }
            };
            pixels.push(match channels {
                1 => [sample(0), sample(0), sample(0), max],
                2 => [sample(0), sample(0), sample(0), sample(1)],
                3 => [sample(0), sample(1), sample(2), max],
                _ => [sample(0), sample(1), sample(2), sample(3)],
            });
        }
    }
    Ok(Rgba { width, height, pixels, max })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Image { reason, .. } => Error::Image { path: path.to_path_buf(), reason },
        other => other,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

/// Color image with channels scaled to `[0,1]`; alpha is ignored.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = decode_rgba(bytes)?;
    let scale = img.max as f64;
    let pixels = img
        .pixels
        .iter()
        .map(|p| [p[0] as f64 / scale, p[1] as f64 / scale, p[2] as f64 / scale])
        .collect();
    RgbImage::new(img.width, img.height, pixels)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    with_path(path, decode_rgb(&read_file(path)?))
}

fn check_size(width: usize, height: usize, expected: (usize, usize)) -> Result<()> {
    if (width, height) != expected {
        return Err(Error::Scribbles(format!(
            "scribble image is {width}x{height}, expected {}x{}",
            expected.0, expected.1
        )));
    }
    Ok(())
}

/// Scribbles in the red/green convention: exactly pure red is foreground,
/// exactly pure green is background, everything else (or transparent) is
/// unlabeled.
pub fn decode_scribbles(bytes: &[u8], size: (usize, usize)) -> Result<ScribblePair> {
    let img = decode_rgba(bytes)?;
    check_size(img.width, img.height, size)?;
    let max = img.max;
    let fg = img.pixels.iter().map(|p| p[3] > 0 && *p == [max, 0, 0, p[3]]).collect();
    let bg = img.pixels.iter().map(|p| p[3] > 0 && *p == [0, max, 0, p[3]]).collect();
    ScribblePair::new(img.width, img.height, fg, bg)
}

pub fn read_scribbles(path: &Path, size: (usize, usize)) -> Result<ScribblePair> {
    with_path(path, decode_scribbles(&read_file(path)?, size))
}

/// A label mask: any opaque pixel with a non-zero channel is set.
pub fn decode_mask(bytes: &[u8], size: (usize, usize)) -> Result<Vec<bool>> {
    let img = decode_rgba(bytes)?;
    check_size(img.width, img.height, size)?;
    Ok(img.pixels.iter().map(|p| p[3] > 0 && (p[0] | p[1] | p[2]) > 0).collect())
}

/// Builds a scribble pair from separate foreground and background masks.
pub fn scribbles_from_masks(fg: &[u8], bg: &[u8], size: (usize, usize)) -> Result<ScribblePair> {
    let fg = decode_mask(fg, size)?;
    let bg = decode_mask(bg, size)?;
    ScribblePair::new(size.0, size.1, fg, bg)
}

fn encode(width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(depth);
        let mut writer = encoder.write_header().map_err(decode_err)?;
        writer.write_image_data(data).map_err(decode_err)?;
        writer.finish().map_err(decode_err)?;
    }
    Ok(out)
}

/// `round(u · 65535)` as 16-bit grayscale.
pub fn encode_probability(u: &ProbabilityMap) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(2 * u.len());
    for &v in &u.values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        data.extend_from_slice(&q.to_be_bytes());
    }
    encode(u.width, u.height, ColorType::Grayscale, BitDepth::Sixteen, &data)
}

pub fn decode_probability(bytes: &[u8]) -> Result<ProbabilityMap> {
    let img = decode_rgba(bytes)?;
    let scale = img.max as f64;
    ProbabilityMap::new(img.width, img.height, img.pixels.iter().map(|p| p[0] as f64 / scale).collect())
}

/// 1-bit grayscale, white inside the region.
pub fn encode_mask(mask: &[bool], width: usize, height: usize) -> Result<Vec<u8>> {
    if mask.len() != width * height {
        return Err(Error::dims("mask size"));
    }
    let stride = width.div_ceil(8);
    let mut data = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                data[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    encode(width, height, ColorType::Grayscale, BitDepth::One, &data)
}

/// 8-bit RGB encoding of an image with channels in `[0,1]`.
pub fn encode_rgb(image: &RgbImage) -> Result<Vec<u8>> {
    let data: Vec<u8> = image
        .pixels
        .iter()
        .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    encode(image.width, image.height, ColorType::Rgb, BitDepth::Eight, &data)
}

/// Red/green scribble image; unlabeled pixels are black.
pub fn encode_scribbles(scribbles: &ScribblePair) -> Result<Vec<u8>> {
    let data: Vec<u8> = scribbles
        .fg
        .iter()
        .zip(&scribbles.bg)
        .flat_map(|(&f, &b)| match (f, b) {
            (true, _) => [255, 0, 0],
            (_, true) => [0, 255, 0],
            _ => [0, 0, 0],
        })
        .collect();
    encode(scribbles.width, scribbles.height, ColorType::Rgb, BitDepth::Eight, &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_round_trip_within_quantization() {
        let values: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let u = ProbabilityMap::new(6, 5, values).unwrap();
        let back = decode_probability(&encode_probability(&u).unwrap()).unwrap();
        for (a, b) in u.values.iter().zip(&back.values) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn mask_round_trip() {
        let mask: Vec<bool> = (0..33).map(|i| i % 3 == 0).collect();
        let bytes = encode_mask(&mask, 11, 3).unwrap();
        assert_eq!(decode_mask(&bytes, (11, 3)).unwrap(), mask);
    }

    #[test]
    fn scribble_round_trip_and_exact_colors() {
        let fg = vec![true, false, false, false];
        let bg = vec![false, false, true, false];
        let pair = ScribblePair::new(2, 2, fg, bg).unwrap();
        let bytes = encode_scribbles(&pair).unwrap();
        assert_eq!(decode_scribbles(&bytes, (2, 2)).unwrap(), pair);

        // nearly-red is not red
        let img = RgbImage::new(2, 1, vec![[254.0 / 255.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let s = decode_scribbles(&encode_rgb(&img).unwrap(), (2, 1)).unwrap();
        assert_eq!(s.fg, vec![false, false]);
        assert_eq!(s.bg, vec![false, true]);
    }

    #[test]
    fn corrupt_and_mis_sized_inputs_fail() {
        assert!(matches!(decode_rgb(b"not a png"), Err(Error::Image { .. })));
        let pair = ScribblePair::new(2, 2, vec![true, false, false, false], vec![false; 4]).unwrap();
        let bytes = encode_scribbles(&pair).unwrap();
        assert!(matches!(decode_scribbles(&bytes, (3, 2)), Err(Error::Scribbles(_))));
    }
}

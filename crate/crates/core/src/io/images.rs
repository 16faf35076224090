//! PNG channels. RGB and masks are 8-bit; normal maps are 16-bit RGB with
//! channel value `(n + 1) / 2 · 65535` for camera-space unit normals
//! (x right, y down, z forward). An all-zero pixel marks "no normal".

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::write_atomic;

/// Decoded normals shorter than this are treated as invalid pixels.
pub const MIN_NORMAL_NORM: f64 = 0.5;

fn open(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| Error::format(path, e.to_string()))
}

fn encode(img: DynamicImage, path: &Path) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, buf.get_ref())
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn check_channels(img: &Image, c: usize, path: &Path) -> Result<()> {
    if img.channels != c {
        return Err(Error::Dimension(format!("{}: expected {c} channels, image has {}", path.display(), img.channels)));
    }
    Ok(())
}

/// RGB in `[0, 1]`; any PNG color type is converted.
pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_data(w as usize, h as usize, 3, img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
}

pub fn save_rgb(path: &Path, img: &Image) -> Result<()> {
    check_channels(img, 3, path)?;
    let raw = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size");
    encode(DynamicImage::ImageRgb8(buf), path)
}

/// Single-channel mask in `[0, 1]` (soft values are kept).
pub fn load_mask(path: &Path) -> Result<Image> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Image::from_data(w as usize, h as usize, 1, img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
}

pub fn save_mask(path: &Path, img: &Image) -> Result<()> {
    check_channels(img, 1, path)?;
    let raw = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size");
    encode(DynamicImage::ImageLuma8(buf), path)
}

/// Normal map with statistics about the renormalization applied on load.
#[derive(Debug, Clone)]
pub struct LoadedNormals {
    pub image: Image,
    pub valid_pixels: usize,
    /// Largest `|‖n‖ − 1|` among valid pixels before renormalization.
    pub max_deviation: f64,
}

/// Decode and renormalize valid pixels to unit length; invalid pixels are zero.
pub fn decode_normals(width: usize, height: usize, raw: &[u16]) -> LoadedNormals {
    let mut data = vec![0.0; width * height * 3];
    let (mut valid_pixels, mut max_deviation) = (0, 0.0f64);
    for (out, px) in data.chunks_mut(3).zip(raw.chunks(3)) {
        if px.iter().all(|&v| v == 0) {
            continue;
        }
        let n: Vec<f64> = px.iter().map(|&v| v as f64 / 65535.0 * 2.0 - 1.0).collect();
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if norm < MIN_NORMAL_NORM {
            continue;
        }
        max_deviation = max_deviation.max((norm - 1.0).abs());
        valid_pixels += 1;
        for k in 0..3 {
            out[k] = n[k] / norm;
        }
    }
    LoadedNormals { image: Image::from_data(width, height, 3, data).expect("pixel count"), valid_pixels, max_deviation }
}

pub fn load_normals(path: &Path) -> Result<LoadedNormals> {
    let img = open(path)?.to_rgb16();
    let (w, h) = img.dimensions();
    Ok(decode_normals(w as usize, h as usize, img.as_raw()))
}

pub fn encode_normals_16(img: &Image) -> Vec<u16> {
    img.data
        .chunks(3)
        .flat_map(|p| {
            let zero = p.iter().all(|&v| v == 0.0);
            p.iter().map(move |&v| if zero { 0 } else { quantize((v + 1.0) * 0.5, 65535.0) as u16 }).collect::<Vec<_>>()
        })
        .collect()
}

pub fn save_normals(path: &Path, img: &Image) -> Result<()> {
    check_channels(img, 3, path)?;
    let buf = ImageBuffer::<Rgb<u16>, _>::from_raw(img.width as u32, img.height as u32, encode_normals_16(img)).expect("buffer size");
    encode(DynamicImage::ImageRgb16(buf), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_and_mask_round_trip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Image::from_fn(5, 4, 3, |x, y, c| ((x + 2 * y + c) % 7) as f64 / 6.0);
        save_rgb(&dir.path().join("a.png"), &rgb).unwrap();
        let back = load_rgb(&dir.path().join("a.png")).unwrap();
        assert!(back.data.iter().zip(&rgb.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        let mask = Image::from_fn(5, 4, 1, |x, _, _| (x % 2) as f64);
        save_mask(&dir.path().join("m.png"), &mask).unwrap();
        assert_eq!(load_mask(&dir.path().join("m.png")).unwrap(), mask);
        assert!(save_mask(&dir.path().join("bad.png"), &rgb).is_err());
    }

    #[test]
    fn non_unit_normals_are_renormalized() {
        // Lengths 0.7 and 1.3, plus an invalid pixel.
        let vals = [[0.7, 0.0, 0.0], [0.0, -0.6, 1.17], [0.0, 0.0, 0.0]];
        let img = Image::from_data(3, 1, 3, vals.iter().flatten().copied().collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_normals(&dir.path().join("n.png"), &img).unwrap();
        let loaded = load_normals(&dir.path().join("n.png")).unwrap();
        assert_eq!(loaded.valid_pixels, 2);
        assert!(loaded.max_deviation > 0.2);
        for (i, px) in loaded.image.data.chunks(3).enumerate() {
            let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
            if i < 2 {
                assert!((n - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(n, 0.0);
            }
        }
        assert!(loaded.image.at(0, 0, 0) > 0.999);
    }
}

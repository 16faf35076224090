//! Row-major interleaved float images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "image data has {} values, expected {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image { width, height, channels, data }
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y) + c;
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Extract one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.chunks(self.channels).map(|p| p[c]).collect(),
        }
    }

    /// Multiply every channel of each pixel by a single-channel mask.
    pub fn masked(&self, mask: &Image) -> Image {
        debug_assert_eq!(mask.channels, 1);
        let mut out = self.clone();
        for (px, &m) in out.data.chunks_mut(self.channels).zip(&mask.data) {
            for v in px {
                *v *= m;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Image) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// 2×2 average pooling; odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let s = self.at(2 * x, 2 * y, c)
                        + self.at(2 * x + 1, 2 * y, c)
                        + self.at(2 * x, 2 * y + 1, c)
                        + self.at(2 * x + 1, 2 * y + 1, c);
                    out.set(x, y, c, 0.25 * s);
                }
            }
        }
        out
    }

    /// Adjoint of [`Image::downsample2`] for an image of this (fine) shape.
    pub fn upsample2_adjoint(coarse_grad: &Image, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height, coarse_grad.channels);
        for y in 0..coarse_grad.height {
            for x in 0..coarse_grad.width {
                for c in 0..coarse_grad.channels {
                    let g = 0.25 * coarse_grad.at(x, y, c);
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let i = out.index(2 * x + dx, 2 * y + dy) + c;
                        out.data[i] += g;
                    }
                }
            }
        }
        out
    }
}

/// Binary dilation of a single-channel mask (values > 0.5 are set) with a
/// square structuring element of the given radius.
pub fn dilate_mask(mask: &Image, radius: usize) -> Image {
    let (w, h) = (mask.width, mask.height);
    let set: Vec<bool> = mask.data.iter().map(|&v| v > 0.5).collect();
    // Separable: rows then columns.
    let mut rows = vec![false; w * h];
    for y in 0..h {
        let mut last: Option<usize> = None;
        let mut next = vec![usize::MAX; w];
        let mut upcoming: Option<usize> = None;
        for x in (0..w).rev() {
            if set[y * w + x] {
                upcoming = Some(x);
            }
            next[x] = upcoming.unwrap_or(usize::MAX);
        }
        for x in 0..w {
            if set[y * w + x] {
                last = Some(x);
            }
            let near_left = last.is_some_and(|l| x - l <= radius);
            let near_right = next[x] != usize::MAX && next[x] - x <= radius;
            rows[y * w + x] = near_left || near_right;
        }
    }
    let mut out = Image::new(w, h, 1);
    for x in 0..w {
        let mut last: Option<usize> = None;
        let mut next = vec![usize::MAX; h];
        let mut upcoming: Option<usize> = None;
        for y in (0..h).rev() {
            if rows[y * w + x] {
                upcoming = Some(y);
            }
            next[y] = upcoming.unwrap_or(usize::MAX);
        }
        for y in 0..h {
            if rows[y * w + x] {
                last = Some(y);
            }
            let hit = last.is_some_and(|l| y - l <= radius) || (next[y] != usize::MAX && next[y] - y <= radius);
            out.data[y * w + x] = if hit { 1.0 } else { 0.0 };
        }
    }
    out
}

//! Training objectives. Every loss returns its value and the gradient with
//! respect to the rendered input.

mod perceptual;
mod regularizers;
mod ssim;

pub use perceptual::{load_perceptual, ConvFeatureDistance, ConvLayer, PerceptualDistance, PyramidDistance, PYRAMID_LEVELS};
pub use regularizers::{
    curvature_loss, normal_depth_consistency, offset_loss, scale_loss, NormalDepthGrad, COVERED_OPACITY,
};
pub use ssim::{fitting_window, gaussian_window, ssim, ssim_grad, ssim_window, C1, C2, SIGMA, WINDOW};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{dilate_mask, Image};

/// Pixels of dilation applied to the union of target and rendered masks.
pub const REGION_DILATION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mask: f64,
    pub normal: f64,
    pub normal_depth: f64,
    pub curvature: f64,
    pub offset: f64,
    pub scale: f64,
    /// Geman-McClure width in pixels at 512-pixel resolution.
    pub keypoint_sigma_px: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mask: 1.0, normal: 1.0, normal_depth: 0.05, curvature: 0.01, offset: 0.1, scale: 1.0, keypoint_sigma_px: 50.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("mask", self.mask),
            ("normal", self.normal),
            ("normal_depth", self.normal_depth),
            ("curvature", self.curvature),
            ("offset", self.offset),
            ("scale", self.scale),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.keypoint_sigma_px > 0.0) || !self.keypoint_sigma_px.is_finite() {
            return Err(Error::InvalidArgument(format!("keypoint_sigma_px must be positive, got {}", self.keypoint_sigma_px)));
        }
        Ok(())
    }

    /// Robustifier width for an image of the given size.
    pub fn keypoint_sigma(&self, width: usize, height: usize) -> f64 {
        geman_mcclure_sigma(self.keypoint_sigma_px, width, height)
    }
}

/// Scale a width stated at 512×512 to an image of `width × height`.
pub fn geman_mcclure_sigma(sigma_512: f64, width: usize, height: usize) -> f64 {
    let diag = ((width * width + height * height) as f64).sqrt();
    sigma_512 * diag / (512.0 * std::f64::consts::SQRT_2)
}

/// Differences this small count as ties for L1 subgradients, so roundoff
/// at an exact match does not produce unit-size gradients.
pub const L1_TIE: f64 = 1e-12;

pub(crate) fn sign(v: f64) -> f64 {
    if v > L1_TIE {
        1.0
    } else if v < -L1_TIE {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference and its gradient with respect to `render`.
pub fn l1_loss(target: &Image, render: &Image) -> Result<(f64, Image)> {
    target.check_same_shape(render)?;
    let n = target.data.len().max(1) as f64;
    let value = target.data.iter().zip(&render.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let grad = target.data.iter().zip(&render.data).map(|(a, b)| sign(b - a) / n).collect();
    Ok((value, Image::from_data(target.width, target.height, target.channels, grad)?))
}

/// `0.2·L1 + 0.8·(1 − SSIM)/2 + perceptual`. Images smaller than the SSIM
/// window use the largest odd window that fits.
pub fn rgb_loss(target: &Image, render: &Image, perceptual: &dyn PerceptualDistance) -> Result<(f64, Image)> {
    target.check_same_shape(render)?;
    let (l1, mut grad) = l1_loss(target, render)?;
    grad.scale(0.2);
    let (s, mut gs) = ssim_grad(target, render, fitting_window(target.width, target.height))?;
    gs.scale(-0.4);
    grad.add_assign(&gs);
    let (p, gp) = perceptual.distance_grad(target, render)?;
    grad.add_assign(&gp);
    Ok((0.2 * l1 + 0.4 * (1.0 - s) + p, grad))
}

/// Mean absolute mask difference.
pub fn mask_loss(target: &Image, render: &Image) -> Result<(f64, Image)> {
    if target.channels != 1 {
        return Err(Error::Dimension(format!("mask must have one channel, got {}", target.channels)));
    }
    l1_loss(target, render)
}

/// Cosine and perceptual terms of one normal map.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalTerms {
    pub cosine: f64,
    pub perceptual: f64,
}

impl NormalTerms {
    pub fn total(&self) -> f64 {
        self.cosine + self.perceptual
    }
}

/// Rendered normals shorter than this contribute nothing to the cosine term.
const MIN_NORMAL_LENGTH: f64 = 1e-8;

/// `0.2·(1 − mean cos)` over valid pixels plus the perceptual distance of
/// the `(N+1)/2` encodings of the per-pixel unit normals, restricted to the
/// valid mask.
pub fn normal_map_loss(target: &Image, render: &Image, valid: &Image, perceptual: &dyn PerceptualDistance) -> Result<(NormalTerms, Image)> {
    target.check_same_shape(render)?;
    if target.channels != 3 || valid.channels != 1 || valid.width != target.width || valid.height != target.height {
        return Err(Error::Dimension("normal maps need three channels and a matching one-channel validity mask".into()));
    }
    let mut grad = Image::new(target.width, target.height, 3);
    let count = valid.data.iter().filter(|&&m| m > 0.5).count();
    let mut cos_sum = 0.0;
    if count > 0 {
        let inv = 0.2 / count as f64;
        for p in 0..target.pixels() {
            if valid.data[p] <= 0.5 {
                continue;
            }
            let n = crate::math::Vec3::from_column_slice(&target.data[3 * p..3 * p + 3]);
            let r = crate::math::Vec3::from_column_slice(&render.data[3 * p..3 * p + 3]);
            let (ln, lr) = (n.norm(), r.norm());
            if ln < MIN_NORMAL_LENGTH || lr < MIN_NORMAL_LENGTH {
                continue;
            }
            let c = n.dot(&r) / (ln * lr);
            cos_sum += c;
            let dc = (n / ln - r * (c / lr)) / lr;
            for k in 0..3 {
                grad.data[3 * p + k] = -inv * dc[k];
            }
        }
    }
    let cosine = if count > 0 { 0.2 * (1.0 - cos_sum / count as f64) } else { 0.0 };
    // Perceptual term on (n̂ + 1)/2 with both maps normalized per pixel and
    // zeroed outside the valid mask.
    let unit = |img: &Image| {
        let mut u = Image::new(img.width, img.height, 3);
        for ((dst, src), &m) in u.data.chunks_mut(3).zip(img.data.chunks(3)).zip(&valid.data) {
            let l = (src[0] * src[0] + src[1] * src[1] + src[2] * src[2]).sqrt();
            if m > 0.5 && l >= MIN_NORMAL_LENGTH {
                for k in 0..3 {
                    dst[k] = src[k] / l;
                }
            }
        }
        u
    };
    let encode = |u: &Image| {
        let mut e = u.map(|v| 0.5 * (v + 1.0));
        for (px, &m) in e.data.chunks_mut(3).zip(&valid.data) {
            if m <= 0.5 {
                px.fill(0.0);
            }
        }
        e
    };
    let (ut, ur) = (unit(target), unit(render));
    let (p, gp) = perceptual.distance_grad(&encode(&ut), &encode(&ur))?;
    for (((g, pg), r), &m) in grad.data.chunks_mut(3).zip(gp.data.chunks(3)).zip(render.data.chunks(3)).zip(&valid.data) {
        let r = crate::math::Vec3::from_column_slice(r);
        let l = r.norm();
        if m > 0.5 && l >= MIN_NORMAL_LENGTH {
            let d = crate::math::Vec3::from_column_slice(pg) * 0.5;
            let rh = r / l;
            let dr = (d - rh * rh.dot(&d)) / l;
            for k in 0..3 {
                g[k] += dr[k];
            }
        }
    }
    Ok((NormalTerms { cosine, perceptual: p }, grad))
}

/// Union of target and rendered masks (threshold 0.5), dilated.
pub fn loss_region(target: &Image, rendered: &Image) -> Result<Image> {
    target.check_same_shape(rendered)?;
    let union = Image::from_data(
        target.width,
        target.height,
        1,
        target.data.iter().zip(&rendered.data).map(|(a, b)| if *a > 0.5 || *b > 0.5 { 1.0 } else { 0.0 }).collect(),
    )?;
    Ok(dilate_mask(&union, REGION_DILATION))
}

/// `Σ r²σ²/(r²+σ²)` and its gradient.
pub fn geman_mcclure(residual: &[f64], sigma: f64) -> (f64, Vec<f64>) {
    let s2 = sigma * sigma;
    let mut value = 0.0;
    let grad = residual
        .iter()
        .map(|&r| {
            let r2 = r * r;
            let d = r2 + s2;
            value += r2 * s2 / d;
            2.0 * r * s2 * s2 / (d * d)
        })
        .collect();
    (value, grad)
}

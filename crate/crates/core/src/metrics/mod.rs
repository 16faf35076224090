//! Image quality metrics, masked-region variants and the body occlusion
//! ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{fitting_window, ssim_window, PerceptualDistance};

pub const OCCLUSION_THRESHOLD: f64 = 0.5;

/// PSNR in dB over the pixels where `region > 0.5` (all pixels when `None`),
/// for unit-range images. An exact match returns `f64::INFINITY`.
pub fn psnr(target: &Image, render: &Image, region: Option<&Image>) -> Result<f64> {
    target.check_same_shape(render)?;
    if let Some(m) = region {
        if m.channels != 1 || m.width != target.width || m.height != target.height {
            return Err(Error::Dimension("psnr region must be a single-channel mask of the image size".into()));
        }
    }
    let c = target.channels;
    let (mut sum, mut count) = (0.0, 0usize);
    for p in 0..target.pixels() {
        if region.is_some_and(|m| m.data[p] <= 0.5) {
            continue;
        }
        for k in 0..c {
            let d = target.data[p * c + k] - render.data[p * c + k];
            sum += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("psnr over an empty region is undefined".into()));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean SSIM with the standard 11-tap window, shrunk to fit small images.
pub fn ssim(target: &Image, render: &Image) -> Result<f64> {
    ssim_window(target, render, fitting_window(target.width, target.height))
}

/// Perceptual distance counting only `region`: outside it the render is
/// replaced by the target.
pub fn masked_perceptual(target: &Image, render: &Image, region: &Image, perceptual: &dyn PerceptualDistance) -> Result<f64> {
    target.check_same_shape(render)?;
    let c = target.channels;
    let mut mixed = render.clone();
    for p in 0..target.pixels() {
        if region.data[p] <= 0.5 {
            mixed.data[p * c..(p + 1) * c].copy_from_slice(&target.data[p * c..(p + 1) * c]);
        }
    }
    perceptual.distance(target, &mixed)
}

/// Split the subject mask by the rendered occlusion map: occluded pixels are
/// subject pixels with `Ô > threshold`. Returns `(visible, occluded)`.
pub fn masked_region_masks(occlusion: &Image, subject: &Image, threshold: f64) -> Result<(Image, Image)> {
    occlusion.check_same_shape(subject)?;
    let mut visible = Image::new(subject.width, subject.height, 1);
    let mut occluded = Image::new(subject.width, subject.height, 1);
    for p in 0..subject.pixels() {
        if subject.data[p] > 0.5 {
            if occlusion.data[p] > threshold {
                occluded.data[p] = 1.0;
            } else {
                visible.data[p] = 1.0;
            }
        }
    }
    Ok((visible, occluded))
}

/// Body occlusion ratio: the mean per-surfel τ.
pub fn bor(occlusion: &[f64]) -> f64 {
    if occlusion.is_empty() {
        return 0.0;
    }
    occlusion.iter().sum::<f64>() / occlusion.len() as f64
}

fn count(mask: &Image) -> usize {
    mask.data.iter().filter(|&&m| m > 0.5).count()
}

/// PSNR and perceptual distance over one pixel region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    /// `None` for an empty region. Exact matches serialize as `"inf"`.
    #[serde(with = "psnr_serde")]
    pub psnr: Option<f64>,
    pub perceptual: Option<f64>,
    pub pixels: usize,
}

impl RegionMetrics {
    pub fn measure(target: &Image, render: &Image, region: &Image, perceptual: &dyn PerceptualDistance) -> Result<Self> {
        let pixels = count(region);
        if pixels == 0 {
            return Ok(RegionMetrics { psnr: None, perceptual: None, pixels });
        }
        Ok(RegionMetrics {
            psnr: Some(psnr(target, render, Some(region))?),
            perceptual: Some(masked_perceptual(target, render, region, perceptual)?),
            pixels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub occlusion_threshold: f64,
    /// Full-image metrics over subject pixels only instead of the whole frame.
    pub subject_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { occlusion_threshold: OCCLUSION_THRESHOLD, subject_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: String,
    #[serde(with = "finite_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub visible: RegionMetrics,
    pub occluded: RegionMetrics,
    /// Pixels the full-image metrics ran over.
    pub pixels: usize,
}

/// Evaluate one view. `occlusion` is the occlusion render from the same
/// camera and `subject` the ground-truth mask.
pub fn evaluate_view(
    view: impl Into<String>,
    target: &Image,
    render: &Image,
    subject: &Image,
    occlusion: &Image,
    perceptual: &dyn PerceptualDistance,
    config: &EvalConfig,
) -> Result<ViewMetrics> {
    let (visible, occluded) = masked_region_masks(occlusion, subject, config.occlusion_threshold)?;
    let (psnr_value, perceptual_value, pixels) = if config.subject_only {
        let n = count(subject);
        if n == 0 {
            return Err(Error::InvalidArgument("subject mask is empty".into()));
        }
        (psnr(target, render, Some(subject))?, masked_perceptual(target, render, subject, perceptual)?, n)
    } else {
        (psnr(target, render, None)?, perceptual.distance(target, render)?, target.pixels())
    };
    Ok(ViewMetrics {
        view: view.into(),
        psnr: psnr_value,
        ssim: ssim(target, render)?,
        perceptual: perceptual_value,
        visible: RegionMetrics::measure(target, render, &visible, perceptual)?,
        occluded: RegionMetrics::measure(target, render, &occluded, perceptual)?,
        pixels,
    })
}

/// Pixel-count-weighted aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "finite_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub visible: RegionMetrics,
    pub occluded: RegionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub aggregate: Aggregate,
    pub bor: f64,
}

fn weighted(items: impl Iterator<Item = (Option<f64>, usize)>) -> Option<f64> {
    let (mut sum, mut total) = (0.0, 0usize);
    for (v, n) in items {
        if let Some(v) = v {
            if n > 0 {
                sum += v * n as f64;
                total += n;
            }
        }
    }
    (total > 0).then(|| sum / total as f64)
}

fn aggregate_region(regions: &[&RegionMetrics]) -> RegionMetrics {
    RegionMetrics {
        psnr: weighted(regions.iter().map(|r| (r.psnr, r.pixels))),
        perceptual: weighted(regions.iter().map(|r| (r.perceptual, r.pixels))),
        pixels: regions.iter().map(|r| r.pixels).sum(),
    }
}

impl EvalReport {
    pub fn new(views: Vec<ViewMetrics>, bor: f64) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidArgument("no views to aggregate".into()));
        }
        let full = |f: fn(&ViewMetrics) -> f64| weighted(views.iter().map(|v| (Some(f(v)), v.pixels))).unwrap_or(f64::NAN);
        let aggregate = Aggregate {
            psnr: full(|v| v.psnr),
            ssim: full(|v| v.ssim),
            perceptual: full(|v| v.perceptual),
            visible: aggregate_region(&views.iter().map(|v| &v.visible).collect::<Vec<_>>()),
            occluded: aggregate_region(&views.iter().map(|v| &v.occluded).collect::<Vec<_>>()),
        };
        Ok(EvalReport { views, aggregate, bor })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("report parse: {e}")))
    }
}

/// JSON has no infinity: +∞ is written as the string `"inf"`.
mod finite_or_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            "inf".serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => super::finite_or_inf::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::finite_or_inf")] f64);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

//! Score-distillation refinement: novel orbit views are pulled toward a
//! denoiser's output, on top of the reconstruction losses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::articulation::BoneTransforms;
use crate::avatar::PosedAvatar;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::raster::{render, render_backward, Background, Channels, ChannelGrads, DepthOrder, RenderRequest, SplatGrads};
use crate::scene::Frame;
use crate::surfel::SurfelCloud;

use super::denoise::{check_output, DenoiseKind, DenoiseRequest, Denoiser};
use super::reconstruct::{run_steps, ReconstructionConfig, StepHook, StepLosses, Trainer, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdsPhase {
    pub steps: usize,
    pub lambda_rgb: f64,
    pub lambda_normal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsConfig {
    /// Runs first; normal renders only by default.
    pub shape: SdsPhase,
    pub texture: SdsPhase,
    pub views: usize,
    pub timestep_min: f64,
    pub timestep_max: f64,
    /// Upper timestep bound reached at the end of each phase.
    pub timestep_final_max: f64,
    /// Novel-view elevation range in degrees.
    pub elevation_deg: [f64; 2],
    /// Weight each SDS pixel gradient by the rendered occlusion map.
    pub occlusion_masking: bool,
}

impl Default for SdsConfig {
    fn default() -> Self {
        SdsConfig {
            shape: SdsPhase { steps: 500, lambda_rgb: 0.0, lambda_normal: 1e-4 },
            texture: SdsPhase { steps: 1000, lambda_rgb: 1e-4, lambda_normal: 0.0 },
            views: 4,
            timestep_min: 0.02,
            timestep_max: 0.98,
            timestep_final_max: 0.5,
            elevation_deg: [-10.0, 30.0],
            occlusion_masking: false,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self) -> Result<()> {
        for p in [&self.shape, &self.texture] {
            if !(p.lambda_rgb >= 0.0 && p.lambda_normal >= 0.0) || !p.lambda_rgb.is_finite() || !p.lambda_normal.is_finite() {
                return Err(Error::InvalidArgument("SDS weights must be finite and nonnegative".into()));
            }
        }
        if self.views == 0 {
            return Err(Error::InvalidArgument("SDS needs at least one novel view".into()));
        }
        let t = [self.timestep_min, self.timestep_max, self.timestep_final_max];
        if !(0.0 < t[0] && t[0] <= t[2] && t[2] <= t[1] && t[1] <= 1.0) {
            return Err(Error::InvalidArgument(format!("timestep bounds must satisfy 0 < min ≤ final max ≤ max ≤ 1, got {t:?}")));
        }
        if !(self.elevation_deg[0] <= self.elevation_deg[1]) || self.elevation_deg.iter().any(|e| e.abs() >= 90.0) {
            return Err(Error::InvalidArgument(format!("bad elevation range {:?}", self.elevation_deg)));
        }
        Ok(())
    }
}

/// Orbit cameras around `pelvis`, evenly spaced in azimuth from a random
/// start, each with its own random elevation. The radius keeps the training
/// camera's distance to the pelvis.
pub fn novel_views(training: &Camera, pelvis: &crate::math::Vec3, config: &SdsConfig, rng: &mut ChaCha8Rng) -> Vec<Camera> {
    let radius = (training.center() - pelvis).norm();
    let base = rng.random_range(0.0..std::f64::consts::TAU);
    let [lo, hi] = config.elevation_deg.map(f64::to_radians);
    (0..config.views)
        .map(|k| {
            let azimuth = base + k as f64 * std::f64::consts::TAU / config.views as f64;
            let elevation = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            training.orbit(*pelvis, radius, azimuth, elevation)
        })
        .collect()
}

/// Upper timestep bound after `step` of `steps`, annealed linearly.
pub fn timestep_upper(config: &SdsConfig, step: usize, steps: usize) -> f64 {
    let s = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 1.0 };
    config.timestep_max + (config.timestep_final_max - config.timestep_max) * s.min(1.0)
}

fn noise_image(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(w, h, c, |_, _, _| rng.sample(StandardNormal))
}

/// `(n + O) / 2` per pixel: `(n̂ + 1) / 2` scaled by coverage for raw
/// composites, zero on the background.
pub fn encode_normals(normal: &Image, opacity: &Image) -> Image {
    Image::from_fn(normal.width, normal.height, 3, |x, y, c| 0.5 * (normal.at(x, y, c) + opacity.at(x, y, 0)))
}

/// Adds SDS gradients for every novel view of one training step.
pub struct SdsHook<'a> {
    pub denoiser: &'a mut dyn Denoiser,
    pub phase: SdsPhase,
    pub config: &'a SdsConfig,
    pub frames: &'a [Frame],
    pub prompt: &'a str,
    pub background: Background,
    /// Trainer step at which this phase started.
    pub phase_start: usize,
}

impl SdsHook<'_> {
    fn view_gradient(
        &mut self,
        avatar: &PosedAvatar,
        cam: &Camera,
        kind: DenoiseKind,
        lambda: f64,
        frame: usize,
        view: usize,
        timestep: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, SplatGrads)> {
        let channels = match kind {
            DenoiseKind::Rgb => Channels { rgb: true, ..Default::default() },
            DenoiseKind::Normal => Channels { normal: true, mask: true, ..Default::default() },
        };
        let request = RenderRequest { channels, order: DepthOrder::Ascending, cull_back_faces: false, background: self.background };
        let out = render(&avatar.splats, cam, &request)?;
        let image = match kind {
            DenoiseKind::Rgb => out.rgb.clone().expect("rgb requested"),
            DenoiseKind::Normal => encode_normals(out.normal.as_ref().expect("normal requested"), &out.opacity),
        };
        let noise = noise_image(image.width, image.height, image.channels, rng);
        let req = DenoiseRequest {
            kind,
            render: &image,
            condition: &self.frames[frame].rgb,
            prompt: self.prompt,
            timestep,
            noise: &noise,
            camera: cam,
            frame,
            view,
        };
        let target = self.denoiser.denoise(&req)?;
        check_output(&req, &target, self.denoiser.name())?;
        let weight = if self.config.occlusion_masking {
            let occ = render(&avatar.splats, cam, &RenderRequest::occlusion())?;
            Some(occ.occlusion.expect("occlusion requested"))
        } else {
            None
        };
        let mut value = 0.0;
        let mut g = Image::new(image.width, image.height, 3);
        for p in 0..image.pixels() {
            let w = weight.as_ref().map_or(1.0, |o| o.data[p]);
            for c in 0..3 {
                let r = image.data[3 * p + c] - target.data[3 * p + c];
                value += 0.5 * lambda * w * r * r;
                g.data[3 * p + c] = lambda * w * r;
            }
        }
        let grads = match kind {
            DenoiseKind::Rgb => ChannelGrads { rgb: Some(g), ..Default::default() },
            DenoiseKind::Normal => {
                let mask = Image::from_fn(g.width, g.height, 1, |x, y, _| 0.5 * (g.at(x, y, 0) + g.at(x, y, 1) + g.at(x, y, 2)));
                g.scale(0.5);
                ChannelGrads { normal: Some(g), mask: Some(mask), ..Default::default() }
            }
        };
        Ok((value, render_backward(&out, &grads)?))
    }
}

impl StepHook for SdsHook<'_> {
    fn contribute(&mut self, avatar: &PosedAvatar, bones: &BoneTransforms, frame: usize, step: usize, rng: &mut ChaCha8Rng) -> Result<(f64, Option<SplatGrads>)> {
        let kinds: Vec<(DenoiseKind, f64)> = [(DenoiseKind::Normal, self.phase.lambda_normal), (DenoiseKind::Rgb, self.phase.lambda_rgb)]
            .into_iter()
            .filter(|(_, l)| *l > 0.0)
            .collect();
        if kinds.is_empty() {
            return Ok((0.0, None));
        }
        let local = step.saturating_sub(self.phase_start);
        let pelvis = bones.posed_joints()[0];
        let cams = novel_views(&self.frames[frame].camera, &pelvis, self.config, rng);
        let upper = timestep_upper(self.config, local, self.phase.steps);
        let timestep = rng.random_range(self.config.timestep_min..=upper);
        let mut total = 0.0;
        let mut grads = SplatGrads::zeros(avatar.splats.len());
        for (view, cam) in cams.iter().enumerate() {
            for &(kind, lambda) in &kinds {
                let (v, g) = self.view_gradient(avatar, cam, kind, lambda, frame, view, timestep, rng)?;
                total += v;
                grads.add(&g);
            }
        }
        Ok((total, Some(grads)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdsReport {
    pub shape: Vec<StepLosses>,
    pub texture: Vec<StepLosses>,
}

/// Shape phase then texture phase, continuing `trainer`'s state.
pub fn sds_refine(
    cloud: &mut SurfelCloud,
    trainer: &mut Trainer,
    data: &TrainingData,
    reconstruction: &ReconstructionConfig,
    config: &SdsConfig,
    denoiser: &mut dyn Denoiser,
    prompt: &str,
) -> Result<SdsReport> {
    reconstruction.validate()?;
    config.validate()?;
    data.validate(cloud)?;
    let background = Background { rgb: reconstruction.background.into(), ..Background::default() };
    let mut report = SdsReport { shape: Vec::with_capacity(config.shape.steps), texture: Vec::with_capacity(config.texture.steps) };
    for (phase, history) in [(config.shape, &mut report.shape), (config.texture, &mut report.texture)] {
        let mut hook = SdsHook { denoiser: &mut *denoiser, phase, config, frames: data.frames, prompt, background, phase_start: trainer.step };
        run_steps(cloud, trainer, data, reconstruction, phase.steps, Some(&mut hook), history)?;
    }
    Ok(report)
}

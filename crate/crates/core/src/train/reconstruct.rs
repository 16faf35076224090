//! Photometric/geometric fitting of the canonical cloud to observed frames,
//! with the per-surfel occlusion estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::articulation::{BodyTemplate, BoneTransforms};
use crate::avatar::PosedAvatar;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{
    curvature_loss, loss_region, mask_loss, normal_depth_consistency, normal_map_loss, offset_loss, rgb_loss, scale_loss, LossWeights,
    PerceptualDistance,
};
use crate::math::{retract, Vec3};
use crate::optim::{Adam, AdamConfig};
use crate::raster::{render, render_backward, Background, ChannelGrads, RenderRequest, SplatGrads, Splats};
use crate::scene::{normal_validity, Frame, PoseSequence};
use crate::surfel::SurfelCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Canonical positions, multiplied by the scene extent.
    pub position: f64,
    pub rotation: f64,
    pub field: f64,
    pub occlusion: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { position: 1.6e-4, rotation: 1e-3, field: 1e-3, occlusion: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcclusionMode {
    /// One τ step per reconstruction step.
    Interleaved,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub occlusion: OcclusionMode,
    /// Color composited behind the subject; should match the frames' background.
    pub background: [f64; 3],
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            steps: 500,
            adam: AdamConfig::default(),
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            occlusion: OcclusionMode::Interleaved,
            background: [0.0; 3],
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, v) in [("position", self.lr.position), ("rotation", self.lr.rotation), ("field", self.lr.field), ("occlusion", self.lr.occlusion)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("learning rate {name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("background color must be finite".into()));
        }
        Ok(())
    }

    fn front_request(&self) -> RenderRequest {
        let mut r = RenderRequest::front();
        r.background = Background { rgb: Vec3::from(self.background), ..Background::default() };
        r
    }
}

/// Everything a training step reads besides the cloud itself.
pub struct TrainingData<'a> {
    pub template: &'a BodyTemplate,
    pub sequence: &'a PoseSequence,
    pub frames: &'a [Frame],
    pub perceptual: &'a dyn PerceptualDistance,
}

impl TrainingData<'_> {
    pub fn validate(&self, cloud: &SurfelCloud) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidArgument("no training frames".into()));
        }
        if self.frames.len() != self.sequence.len() {
            return Err(Error::Dimension(format!("{} frames but {} poses", self.frames.len(), self.sequence.len())));
        }
        for (t, f) in self.frames.iter().enumerate() {
            f.validate().map_err(|e| Error::Dimension(format!("frame {t}: {e}")))?;
        }
        cloud.validate()?;
        cloud.binding()?;
        Ok(())
    }

    fn bones(&self, t: usize) -> Result<BoneTransforms> {
        self.sequence.bones(self.template, t)
    }
}

/// Weighted loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub frame: usize,
    pub rgb: f64,
    pub mask: f64,
    pub normal: f64,
    pub back_normal: f64,
    pub normal_depth: f64,
    pub curvature: f64,
    pub offset: f64,
    pub scale: f64,
    pub sds: f64,
    /// Unweighted mean rendered occlusion of the τ step.
    pub occlusion: f64,
}

impl StepLosses {
    /// Image terms only (rgb, mask, front and back normals).
    pub fn data(&self) -> f64 {
        self.rgb + self.mask + self.normal + self.back_normal
    }

    pub fn regularizers(&self) -> f64 {
        self.normal_depth + self.curvature + self.offset + self.scale
    }

    pub fn total(&self) -> f64 {
        self.data() + self.regularizers() + self.sds
    }
}

/// Extra gradient source evaluated on the posed cloud of each step.
pub trait StepHook {
    /// Returns a weighted loss value and splat gradients for `avatar` posed
    /// for `frame`. `step` counts from 0 within the current run.
    fn contribute(&mut self, avatar: &PosedAvatar, bones: &BoneTransforms, frame: usize, step: usize, rng: &mut ChaCha8Rng) -> Result<(f64, Option<SplatGrads>)>;
}

/// Optimizer and random state; serializable so checkpoints resume bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub step: usize,
    pub extent: f64,
    positions: Adam,
    rotations: Adam,
    field: Adam,
    occlusion: Adam,
    frame_rng: ChaCha8Rng,
    aux_rng: ChaCha8Rng,
}

/// RNG stream identifiers derived from the run seed.
const FRAME_STREAM: u64 = 1;
const AUX_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn scene_extent(points: &[Vec3]) -> f64 {
    let (lo, hi) = points
        .iter()
        .fold((Vec3::repeat(f64::MAX), Vec3::repeat(f64::MIN)), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    if points.is_empty() {
        1.0
    } else {
        (hi - lo).norm().max(1e-6)
    }
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|x| x.iter().copied()).collect()
}

impl Trainer {
    pub fn new(cloud: &SurfelCloud, config: &ReconstructionConfig, seed: u64) -> Self {
        let n = cloud.len();
        Trainer {
            step: 0,
            extent: scene_extent(&cloud.init_positions),
            positions: Adam::new(3 * n, config.adam),
            rotations: Adam::new(3 * n, config.adam),
            field: Adam::new(cloud.field.num_params(), config.adam),
            occlusion: Adam::new(n, config.adam),
            frame_rng: stream(seed, FRAME_STREAM),
            aux_rng: stream(seed, AUX_STREAM),
        }
    }

    /// Number of non-finite gradient updates skipped so far, over all groups.
    pub fn skipped_updates(&self) -> u64 {
        self.positions.skipped() + self.rotations.skipped() + self.field.skipped() + self.occlusion.skipped()
    }

    /// One optimization step on a randomly sampled frame.
    pub fn step(&mut self, cloud: &mut SurfelCloud, data: &TrainingData, config: &ReconstructionConfig, hook: Option<&mut dyn StepHook>) -> Result<StepLosses> {
        let t = self.frame_rng.random_range(0..data.frames.len());
        let frame = &data.frames[t];
        let bones = data.bones(t)?;
        let avatar = PosedAvatar::new(cloud, &bones)?;
        let w = &config.weights;
        let mut losses = StepLosses { frame: t, ..Default::default() };
        let mut sg = image_gradients(&avatar.splats, frame, data.perceptual, config, &mut losses)?;

        let (v, gs) = scale_loss(&avatar.splats.scales, &cloud.scale_labels);
        losses.scale = w.scale * v;
        for (a, b) in sg.scales.iter_mut().zip(&gs) {
            *a += w.scale * b;
        }
        if let Some(h) = hook {
            let (v, g) = h.contribute(&avatar, &bones, t, self.step, &mut self.aux_rng)?;
            losses.sds = v;
            if let Some(g) = g {
                sg.add(&g);
            }
        }
        let (mut cg, _) = avatar.backward(cloud, &bones, &sg, false)?;
        if w.curvature > 0.0 {
            let (v, g) = curvature_loss(cloud);
            losses.curvature = w.curvature * v;
            for (a, b) in cg.rotations.iter_mut().zip(&g) {
                *a += b * w.curvature;
            }
        }
        if w.offset > 0.0 {
            let (v, g) = offset_loss(&cloud.positions, &cloud.init_positions);
            losses.offset = w.offset * v;
            for (a, b) in cg.positions.iter_mut().zip(&g) {
                *a += b * w.offset;
            }
        }
        if !losses.total().is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {} (frame {t}): {losses:?}", self.step)));
        }

        if let Some(d) = self.positions.update(&flatten(&cg.positions), config.lr.position * self.extent) {
            for (p, c) in cloud.positions.iter_mut().zip(d.chunks(3)) {
                *p += Vec3::new(c[0], c[1], c[2]);
            }
        }
        if let Some(d) = self.rotations.update(&flatten(&cg.rotations), config.lr.rotation) {
            for (q, c) in cloud.rotations.iter_mut().zip(d.chunks(3)) {
                *q = retract(q, &Vec3::new(c[0], c[1], c[2]));
            }
        }
        self.field.step(&mut cloud.field.params, &cg.field, config.lr.field);

        if config.occlusion == OcclusionMode::Interleaved {
            losses.occlusion = self.occlusion_step(cloud, &avatar.splats, &frame.camera, config.lr.occlusion)?;
        }
        self.step += 1;
        Ok(losses)
    }

    /// One τ update from the L1 norm of the culled occlusion render. Only
    /// `cloud.occlusion` changes.
    pub fn occlusion_step(&mut self, cloud: &mut SurfelCloud, splats: &Splats, camera: &Camera, lr: f64) -> Result<f64> {
        let splats = Splats { occlusion: cloud.occlusion.clone(), ..splats.clone() };
        let out = render(&splats, camera, &RenderRequest::occlusion())?;
        let occ = out.occlusion.as_ref().expect("occlusion requested");
        let p = occ.data.len() as f64;
        let value = occ.data.iter().sum::<f64>() / p;
        let grads = ChannelGrads { occlusion: Some(Image::filled(occ.width, occ.height, 1, 1.0 / p)), ..Default::default() };
        let sg = render_backward(&out, &grads)?;
        if let Some(d) = self.occlusion.update(&sg.occlusion, lr) {
            for (tau, dt) in cloud.occlusion.iter_mut().zip(&d) {
                *tau = (*tau + dt).clamp(0.0, 1.0);
            }
        }
        Ok(value)
    }
}

/// Render the training view and accumulate image-loss gradients.
fn image_gradients(splats: &Splats, frame: &Frame, perceptual: &dyn PerceptualDistance, config: &ReconstructionConfig, losses: &mut StepLosses) -> Result<SplatGrads> {
    let w = &config.weights;
    let cam = &frame.camera;
    let out = render(splats, cam, &config.front_request())?;
    let (rgb, mask, depth, normal) = (
        out.rgb.as_ref().expect("rgb"),
        out.mask.as_ref().expect("mask"),
        out.depth.as_ref().expect("depth"),
        out.normal.as_ref().expect("normal"),
    );
    let region = loss_region(&frame.mask, mask)?;
    let (v, g) = rgb_loss(&frame.rgb.masked(&region), &rgb.masked(&region), perceptual)?;
    losses.rgb = v;
    let g_rgb = g.masked(&region);
    let (v, mut g_mask) = mask_loss(&frame.mask, mask)?;
    losses.mask = w.mask * v;
    g_mask.scale(w.mask);
    let mut g_normal = Image::new(cam.width, cam.height, 3);
    if let Some(target) = &frame.normal {
        let valid = normal_validity(target).masked(&region);
        let (terms, mut g) = normal_map_loss(target, normal, &valid, perceptual)?;
        losses.normal = w.normal * terms.total();
        g.scale(w.normal);
        g_normal.add_assign(&g);
    }
    let mut g_depth = None;
    if w.normal_depth > 0.0 {
        let (v, g) = normal_depth_consistency(depth, mask, normal, cam)?;
        losses.normal_depth = w.normal_depth * v;
        let mut gd = g.depth;
        gd.scale(w.normal_depth);
        g_depth = Some(gd);
        let mut go = g.opacity;
        go.scale(w.normal_depth);
        g_mask.add_assign(&go);
        let mut gn = g.normal;
        gn.scale(w.normal_depth);
        g_normal.add_assign(&gn);
    }
    let mut sg = render_backward(
        &out,
        &ChannelGrads { rgb: Some(g_rgb), mask: Some(g_mask), depth: g_depth, normal: Some(g_normal), ..Default::default() },
    )?;
    if let Some(target) = &frame.back_normal {
        let back = render(splats, cam, &RenderRequest::back_normal())?;
        let valid = normal_validity(target).masked(&region);
        let (terms, mut g) = normal_map_loss(target, back.back_normal.as_ref().expect("back normal"), &valid, perceptual)?;
        losses.back_normal = w.normal * terms.total();
        g.scale(w.normal);
        sg.add(&render_backward(&back, &ChannelGrads { back_normal: Some(g), ..Default::default() })?);
    }
    Ok(sg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub history: Vec<StepLosses>,
    pub skipped_updates: u64,
}

/// Run `config.steps` steps. A numerical failure restores the cloud to its
/// state before the failing step and returns the error.
pub fn run_steps(
    cloud: &mut SurfelCloud,
    trainer: &mut Trainer,
    data: &TrainingData,
    config: &ReconstructionConfig,
    steps: usize,
    mut hook: Option<&mut dyn StepHook>,
    history: &mut Vec<StepLosses>,
) -> Result<()> {
    for _ in 0..steps {
        let backup = (cloud.clone(), trainer.clone());
        match trainer.step(cloud, data, config, hook.as_mut().map(|h| &mut **h as &mut dyn StepHook)) {
            Ok(l) => {
                if trainer.step % 50 == 0 {
                    log::info!("step {}: total {:.6} (data {:.6})", trainer.step, l.total(), l.data());
                }
                history.push(l);
            }
            Err(e) => {
                *cloud = backup.0;
                *trainer = backup.1;
                return Err(e);
            }
        }
    }
    Ok(())
}

/// Fit the cloud to the frames with fresh optimizer state.
pub fn reconstruct(cloud: &mut SurfelCloud, data: &TrainingData, config: &ReconstructionConfig, seed: u64) -> Result<ReconstructionReport> {
    config.validate()?;
    data.validate(cloud)?;
    let mut trainer = Trainer::new(cloud, config, seed);
    let mut history = Vec::with_capacity(config.steps);
    run_steps(cloud, &mut trainer, data, config, config.steps, None, &mut history)?;
    Ok(ReconstructionReport { history, skipped_updates: trainer.skipped_updates() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig { steps: 200, lr: 0.05 }
    }
}

/// Post-hoc τ estimation with fixed geometry: each step renders every frame
/// once. Returns the mean rendered occlusion per step.
pub fn estimate_occlusion(cloud: &mut SurfelCloud, template: &BodyTemplate, sequence: &PoseSequence, cameras: &[Camera], config: &OcclusionConfig, adam: AdamConfig) -> Result<Vec<f64>> {
    if cameras.len() != sequence.len() {
        return Err(Error::Dimension(format!("{} cameras but {} poses", cameras.len(), sequence.len())));
    }
    let posed: Vec<Splats> = (0..sequence.len())
        .map(|t| Ok(PosedAvatar::new(cloud, &sequence.bones(template, t)?)?.splats))
        .collect::<Result<_>>()?;
    let mut trainer = Trainer::new(cloud, &ReconstructionConfig { adam, ..Default::default() }, 0);
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut total = 0.0;
        for (splats, cam) in posed.iter().zip(cameras) {
            total += trainer.occlusion_step(cloud, splats, cam, config.lr)?;
        }
        history.push(total / cameras.len() as f64);
    }
    Ok(history)
}

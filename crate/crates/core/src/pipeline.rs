//! Stage orchestration: layered configuration, checkpoints chained between
//! stages, loss logs, renders and evaluation reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::articulation::{Pose, DEFAULT_BIND_NEIGHBORS};
use crate::avatar::PosedAvatar;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::io::{save_mask, save_normals, save_rgb, write_atomic, Checkpoint, LoadedScene};
use crate::loss::{load_perceptual, PerceptualDistance};
use crate::metrics::{bor, evaluate_view, EvalConfig, EvalReport};
use crate::raster::{render, Background, RenderRequest};
use crate::scene::PoseSequence;
use crate::surfel::{init_from_template, pretrain_field, PretrainConfig};
use crate::train::{
    refine_pose, run_steps, sds_refine, Denoiser, IdentityDenoiser, PoseRefinementConfig, ProcessDenoiser, ReconstructionConfig,
    SdsConfig, StepLosses, Trainer, TrainingData,
};

/// Stages that write a checkpoint, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    RefinePose,
    Init,
    Reconstruct,
    SdsRefine,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::RefinePose, Stage::Init, Stage::Reconstruct, Stage::SdsRefine];

    pub fn name(self) -> &'static str {
        match self {
            Stage::RefinePose => "refine-pose",
            Stage::Init => "init",
            Stage::Reconstruct => "reconstruct",
            Stage::SdsRefine => "sds-refine",
        }
    }

    pub fn checkpoint_file(self) -> &'static str {
        match self {
            Stage::RefinePose => "pose.ckpt",
            Stage::Init => "init.ckpt",
            Stage::Reconstruct => "reconstruct.ckpt",
            Stage::SdsRefine => "sds.ckpt",
        }
    }

    pub fn predecessor(self) -> Option<Stage> {
        match self {
            Stage::RefinePose => None,
            Stage::Init => Some(Stage::RefinePose),
            Stage::Reconstruct => Some(Stage::Init),
            Stage::SdsRefine => Some(Stage::Reconstruct),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Stage(Stage),
    Render,
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Stage(s) => s.name(),
            Command::Render => "render",
            Command::Evaluate => "evaluate",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "render" => Ok(Command::Render),
            "evaluate" => Ok(Command::Evaluate),
            _ => Stage::ALL
                .into_iter()
                .find(|st| st.name() == s)
                .map(Command::Stage)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown command `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub subdivisions: usize,
    pub bind_neighbors: usize,
    pub field: FieldConfig,
    pub pretrain: PretrainConfig,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { subdivisions: 2, bind_neighbors: DEFAULT_BIND_NEIGHBORS, field: FieldConfig::default(), pretrain: PretrainConfig::default() }
    }
}

/// External denoiser process speaking the framed protocol on stdin/stdout.
/// Without a program the identity denoiser is used (zero SDS gradient).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub program: Option<String>,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Checkpoint to render from; defaults to the most advanced one present.
    pub checkpoint: Option<Stage>,
    /// Render every view in the rest pose (zero rotations and translation).
    pub rest_pose: bool,
    /// Orbit cameras around the first frame's pelvis instead of the frame
    /// cameras; 0 uses the frame cameras.
    pub orbit_views: usize,
    pub orbit_elevation_deg: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { checkpoint: None, rest_pose: false, orbit_views: 0, orbit_elevation_deg: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub checkpoint: Option<Stage>,
    pub metrics: EvalConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { checkpoint: None, metrics: EvalConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; `None` leaves the choice to the thread pool.
    pub threads: Option<usize>,
    /// Perceptual adapter weights (safetensors); absent uses the pyramid distance.
    pub perceptual: Option<PathBuf>,
    pub pose: PoseRefinementConfig,
    pub init: InitConfig,
    pub reconstruction: ReconstructionConfig,
    pub sds: SdsConfig,
    pub denoiser: DenoiserConfig,
    pub render: RenderConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            manifest: None,
            out: PathBuf::from("out"),
            seed: 0,
            threads: None,
            perceptual: None,
            pose: PoseRefinementConfig::default(),
            init: InitConfig::default(),
            reconstruction: ReconstructionConfig::default(),
            sds: SdsConfig::default(),
            denoiser: DenoiserConfig::default(),
            render: RenderConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        self.reconstruction.validate()?;
        self.sds.validate()?;
        if self.threads == Some(0) {
            return Err(Error::InvalidArgument("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("config serialization: {e}")))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse a `key.path=value` override; the value is read as TOML and falls
/// back to a bare string.
fn override_table(assignment: &str) -> Result<toml::Table> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("override `{assignment}` has an empty key")));
    }
    let value = value.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut out = toml::Table::new();
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = &mut out;
    for p in &parts[..parts.len() - 1] {
        cur = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())).as_table_mut().expect("fresh table");
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(out)
}

/// Configuration sources above the defaults, lowest priority first:
/// manifest overrides, the config file, then command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct ConfigLayers {
    file: toml::Table,
    overrides: toml::Table,
}

impl ConfigLayers {
    pub fn new(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?
            }
            None => toml::Table::new(),
        };
        let mut layers = ConfigLayers { file, overrides: toml::Table::new() };
        for o in overrides {
            merge(&mut layers.overrides, override_table(o)?);
        }
        Ok(layers)
    }

    pub fn resolve(&self, manifest_overrides: Option<&serde_json::Value>) -> Result<PipelineConfig> {
        let mut table = match manifest_overrides {
            Some(v) => serde_json::from_value::<toml::Table>(v.clone())
                .map_err(|e| Error::Validation(vec![format!("manifest config overrides: {e}")]))?,
            None => toml::Table::new(),
        };
        merge(&mut table, self.file.clone());
        merge(&mut table, self.overrides.clone());
        let config: PipelineConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Validation(vec![format!("config: {e}")]))?;
        config.validate()?;
        Ok(config)
    }
}

/// Files written by one command.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub checkpoint: Option<PathBuf>,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct LossRecord<'a> {
    phase: &'a str,
    step: usize,
    #[serde(flatten)]
    losses: &'a StepLosses,
    total: f64,
}

fn json_lines<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(&r).expect("log record serializes"));
        s.push('\n');
    }
    s
}

fn step_log(phases: &[(&str, &[StepLosses])]) -> String {
    let mut step = 0;
    let mut records = Vec::new();
    for (phase, history) in phases {
        for l in history.iter() {
            records.push(LossRecord { phase, step, losses: l, total: l.total() });
            step += 1;
        }
    }
    json_lines(records)
}

/// A loaded scene with its resolved configuration.
pub struct Pipeline<'a> {
    pub scene: &'a LoadedScene,
    pub config: &'a PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(scene: &'a LoadedScene, config: &'a PipelineConfig) -> Self {
        Pipeline { scene, config }
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.config.out.join(stage.checkpoint_file())
    }

    fn require(&self, command: Command, stage: Stage) -> Result<Checkpoint> {
        let path = self.checkpoint_path(stage);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint { stage: command.name().to_string(), path });
        }
        Checkpoint::load(&path)
    }

    /// The requested checkpoint, or the most advanced one holding a cloud.
    fn latest(&self, command: Command, requested: Option<Stage>) -> Result<Checkpoint> {
        if let Some(s) = requested {
            return self.require(command, s);
        }
        for s in [Stage::SdsRefine, Stage::Reconstruct, Stage::Init] {
            if self.checkpoint_path(s).is_file() {
                return self.require(command, s);
            }
        }
        self.require(command, Stage::Init)
    }

    fn write(&self, name: &str, text: &str, artifacts: &mut Artifacts) -> Result<()> {
        let path = self.config.out.join(name);
        write_atomic(&path, text.as_bytes())?;
        artifacts.files.push(path);
        Ok(())
    }

    fn finish(&self, ckpt: Checkpoint, mut artifacts: Artifacts) -> Result<Artifacts> {
        let path = self.checkpoint_path(ckpt.stage);
        self.write(&format!("{}.config.toml", ckpt.stage), &self.config.to_toml()?, &mut artifacts)?;
        ckpt.save(&path)?;
        artifacts.checkpoint = Some(path);
        Ok(artifacts)
    }

    fn perceptual(&self) -> Result<Box<dyn PerceptualDistance>> {
        load_perceptual(self.config.perceptual.as_deref())
    }

    pub fn run(&self, command: Command) -> Result<Artifacts> {
        log::info!("running {}", command.name());
        match command {
            Command::Stage(Stage::RefinePose) => self.refine_pose(),
            Command::Stage(Stage::Init) => self.init(),
            Command::Stage(Stage::Reconstruct) => self.reconstruct(),
            Command::Stage(Stage::SdsRefine) => self.sds_refine(),
            Command::Render => self.render(),
            Command::Evaluate => self.evaluate(),
        }
    }

    fn refine_pose(&self) -> Result<Artifacts> {
        let s = self.scene;
        let report = refine_pose(&s.template, &s.frames, &s.initial, &self.config.pose)?;
        let mut artifacts = Artifacts::default();
        #[derive(Serialize)]
        struct Record {
            iteration: usize,
            energy: f64,
        }
        let log = json_lines(report.history.iter().enumerate().map(|(iteration, &energy)| Record { iteration, energy }));
        self.write("refine-pose.losses.jsonl", &log, &mut artifacts)?;
        log::info!("pose energy {:.6} -> {:.6} ({:?})", report.initial.total(), report.last.total(), report.status);
        let ckpt = Checkpoint { stage: Stage::RefinePose, seed: self.config.seed, sequence: report.sequence, cloud: None, trainer: None };
        self.finish(ckpt, artifacts)
    }

    fn init(&self) -> Result<Artifacts> {
        let prev = self.require(Command::Stage(Stage::Init), Stage::RefinePose)?;
        let c = &self.config.init;
        let mut cloud =
            init_from_template(&self.scene.template, &prev.sequence.betas, c.subdivisions, c.field.clone(), c.bind_neighbors, self.config.seed)?;
        let positions = cloud.positions.clone();
        let labels = cloud.scale_labels.clone();
        let report = pretrain_field(&mut cloud.field, &positions, &labels, &c.pretrain)?;
        log::info!("{} surfels; scale pretraining mean relative error {:.4}", cloud.len(), report.mean_relative_error);
        #[derive(Serialize)]
        struct Record {
            step: usize,
            loss: f64,
        }
        let mut artifacts = Artifacts::default();
        self.write("init.losses.jsonl", &json_lines(report.losses.iter().enumerate().map(|(step, &loss)| Record { step, loss })), &mut artifacts)?;
        let ckpt = Checkpoint { stage: Stage::Init, seed: self.config.seed, sequence: prev.sequence, cloud: Some(cloud), trainer: None };
        self.finish(ckpt, artifacts)
    }

    fn reconstruct(&self) -> Result<Artifacts> {
        let prev = self.require(Command::Stage(Stage::Reconstruct), Stage::Init)?;
        let mut cloud = prev.cloud()?.clone();
        let cfg = &self.config.reconstruction;
        let perceptual = self.perceptual()?;
        let data = TrainingData { template: &self.scene.template, sequence: &prev.sequence, frames: &self.scene.frames, perceptual: perceptual.as_ref() };
        data.validate(&cloud)?;
        let mut trainer = Trainer::new(&cloud, cfg, self.config.seed);
        let mut history = Vec::with_capacity(cfg.steps);
        run_steps(&mut cloud, &mut trainer, &data, cfg, cfg.steps, None, &mut history)?;
        let mut artifacts = Artifacts::default();
        self.write("reconstruct.losses.jsonl", &step_log(&[("reconstruct", &history)]), &mut artifacts)?;
        let ckpt = Checkpoint { stage: Stage::Reconstruct, seed: self.config.seed, sequence: prev.sequence, cloud: Some(cloud), trainer: Some(trainer) };
        self.finish(ckpt, artifacts)
    }

    fn sds_refine(&self) -> Result<Artifacts> {
        let prev = self.require(Command::Stage(Stage::SdsRefine), Stage::Reconstruct)?;
        let mut cloud = prev.cloud()?.clone();
        let mut trainer = prev.trainer.clone().ok_or_else(|| Error::InvalidArgument("reconstruct checkpoint carries no optimizer state".into()))?;
        let perceptual = self.perceptual()?;
        let data = TrainingData { template: &self.scene.template, sequence: &prev.sequence, frames: &self.scene.frames, perceptual: perceptual.as_ref() };
        let mut denoiser: Box<dyn Denoiser> = match &self.config.denoiser.program {
            Some(p) => Box::new(ProcessDenoiser::spawn(p, &self.config.denoiser.args)?),
            None => {
                log::warn!("no denoiser program configured; the identity denoiser contributes no gradient");
                Box::new(IdentityDenoiser)
            }
        };
        let report =
            sds_refine(&mut cloud, &mut trainer, &data, &self.config.reconstruction, &self.config.sds, denoiser.as_mut(), &self.scene.manifest.prompt)?;
        drop(denoiser);
        let mut artifacts = Artifacts::default();
        self.write("sds-refine.losses.jsonl", &step_log(&[("shape", &report.shape), ("texture", &report.texture)]), &mut artifacts)?;
        let ckpt = Checkpoint { stage: Stage::SdsRefine, seed: self.config.seed, sequence: prev.sequence, cloud: Some(cloud), trainer: Some(trainer) };
        self.finish(ckpt, artifacts)
    }

    /// Cameras and poses for the `render` command.
    pub fn render_views(&self, sequence: &PoseSequence) -> Result<Vec<(Camera, Pose)>> {
        let s = self.scene;
        let r = &self.config.render;
        let pose_for = |t: usize| if r.rest_pose { Pose::rest(s.template.num_joints()) } else { sequence.poses[t].clone() };
        if r.orbit_views == 0 {
            return Ok(s.frames.iter().enumerate().map(|(t, f)| (f.camera.clone(), pose_for(t))).collect());
        }
        let pose = pose_for(0);
        let pelvis = crate::articulation::bone_transforms(&s.template, &sequence.betas, &pose)?.posed_joints()[0];
        let cam = &s.frames[0].camera;
        let radius = (cam.center() - pelvis).norm();
        let elev = r.orbit_elevation_deg.to_radians();
        Ok((0..r.orbit_views)
            .map(|k| (cam.orbit(pelvis, radius, 2.0 * std::f64::consts::PI * k as f64 / r.orbit_views as f64, elev), pose.clone()))
            .collect())
    }

    fn render(&self) -> Result<Artifacts> {
        let ckpt = self.latest(Command::Render, self.config.render.checkpoint)?;
        let cloud = ckpt.cloud()?;
        let mut artifacts = Artifacts::default();
        let mut front = RenderRequest::front();
        front.background = Background { rgb: self.config.reconstruction.background.into(), ..Background::default() };
        for (v, (camera, pose)) in self.render_views(&ckpt.sequence)?.into_iter().enumerate() {
            let bones = crate::articulation::bone_transforms(&self.scene.template, &ckpt.sequence.betas, &pose)?;
            let splats = PosedAvatar::new(cloud, &bones)?.splats;
            let out = render(&splats, &camera, &front)?;
            let back = render(&splats, &camera, &RenderRequest::back_normal())?;
            let occ = render(&splats, &camera, &RenderRequest::occlusion())?;
            let dir = self.config.out.join("render");
            let name = |c: &str| dir.join(format!("view_{v:03}_{c}.png"));
            save_rgb(&name("rgb"), out.rgb.as_ref().expect("rgb channel"))?;
            save_mask(&name("mask"), out.mask.as_ref().expect("mask channel"))?;
            save_normals(&name("normal"), &out.unit_normals(false).expect("normal channel"))?;
            save_normals(&name("back_normal"), &back.unit_normals(true).expect("back normal channel"))?;
            save_mask(&name("occlusion"), occ.occlusion.as_ref().expect("occlusion channel"))?;
            artifacts.files.extend(["rgb", "mask", "normal", "back_normal", "occlusion"].map(name));
        }
        Ok(artifacts)
    }

    /// Metrics of the chosen checkpoint against the manifest frames.
    pub fn evaluation(&self) -> Result<EvalReport> {
        let ckpt = self.latest(Command::Evaluate, self.config.evaluate.checkpoint)?;
        let cloud = ckpt.cloud()?;
        let perceptual = self.perceptual()?;
        let mut front = RenderRequest::front();
        front.background = Background { rgb: self.config.reconstruction.background.into(), ..Background::default() };
        let mut views = Vec::with_capacity(self.scene.frames.len());
        for (t, frame) in self.scene.frames.iter().enumerate() {
            let splats = PosedAvatar::new(cloud, &ckpt.sequence.bones(&self.scene.template, t)?)?.splats;
            let out = render(&splats, &frame.camera, &front)?;
            let occ = render(&splats, &frame.camera, &RenderRequest::occlusion())?;
            views.push(evaluate_view(
                format!("frame {t}"),
                &frame.rgb,
                out.rgb.as_ref().expect("rgb channel"),
                &frame.mask,
                occ.occlusion.as_ref().expect("occlusion channel"),
                perceptual.as_ref(),
                &self.config.evaluate.metrics,
            )?);
        }
        EvalReport::new(views, bor(&cloud.occlusion))
    }

    fn evaluate(&self) -> Result<Artifacts> {
        let report = self.evaluation()?;
        let mut artifacts = Artifacts::default();
        self.write("eval.json", &report.to_json()?, &mut artifacts)?;
        Ok(artifacts)
    }
}

/// Environment variable read for the worker thread count.
pub const THREADS_ENV: &str = "SOAR_THREADS";

/// Size the global thread pool from `threads`, falling back to
/// [`THREADS_ENV`]. Without either the pool's default applies.
pub fn init_thread_pool(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV}=`{v}` is not a thread count")))?),
            Err(_) => None,
        },
    };
    match n {
        Some(0) => Err(Error::InvalidArgument("thread count must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}"))),
        None => Ok(()),
    }
}

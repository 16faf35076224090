//! Synthetic subjects for tests, benchmarks and the bundled fixture: a
//! capsule-built body template, a smooth ground-truth color pattern, and
//! frames rendered from known poses.

use std::f64::consts::PI;

use crate::articulation::{bone_transforms, regress_keypoints, skin_surfels, BodyTemplate, Pose, SparseRows};
use crate::camera::Camera;
use crate::error::Result;
use crate::field::FieldConfig;
use crate::image::Image;
use crate::math::Vec3;
use crate::mesh::TriMesh;
use crate::raster::{render, RenderOutput, RenderRequest, Splats};
use crate::scene::{Frame, Keypoint, PoseSequence};
use crate::shapes;
use crate::surfel::{init_from_template, pretrain_field, PretrainConfig, SurfelCloud};

/// One rigid capsule attached to a joint.
struct Part {
    mesh: TriMesh,
    joint: usize,
    /// Vertices below this height blend toward `blend_to`.
    blend: Option<(usize, f64, f64)>,
}

fn assemble(parts: Vec<Part>, joints: Vec<Vec3>, parents: Vec<Option<usize>>, keypoint_stride: usize) -> BodyTemplate {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut rows = Vec::new();
    for part in parts {
        let offset = vertices.len() as u32;
        for v in &part.mesh.vertices {
            let row = match part.blend {
                Some((other, lo, hi)) => {
                    let s = ((v.y - lo) / (hi - lo)).clamp(0.0, 1.0);
                    let s = s * s * (3.0 - 2.0 * s);
                    let mut r = Vec::new();
                    if 1.0 - s > 0.0 {
                        r.push((other as u32, 1.0 - s));
                    }
                    if s > 0.0 {
                        r.push((part.joint as u32, s));
                    }
                    r
                }
                None => vec![(part.joint as u32, 1.0)],
            };
            rows.push(row);
        }
        vertices.extend(part.mesh.vertices.iter().copied());
        faces.extend(part.mesh.faces.iter().map(|f| f.map(|i| i + offset)));
    }
    // Two linear shape directions: β₀ stretches height, β₁ widens.
    let dirs = |p: &Vec3| [Vec3::new(0.0, 0.1 * p.y, 0.0), Vec3::new(0.1 * p.x, 0.0, 0.1 * p.z)];
    let shape_dirs = vertices.iter().flat_map(|p| dirs(p)).collect();
    let joint_shape_dirs = joints.iter().flat_map(|p| dirs(p)).collect();
    let regressor = SparseRows::from_rows((0..vertices.len()).step_by(keypoint_stride).map(|v| vec![(v as u32, 1.0)]));
    BodyTemplate {
        weights: SparseRows::from_rows(rows),
        vertices,
        faces,
        parents,
        joints,
        num_betas: 2,
        shape_dirs,
        joint_shape_dirs,
        regressor,
    }
}

/// Four-joint body: pelvis (root), chest, and two arms hanging beside a
/// capsule torso. Roughly 0.8 m tall, centered at the origin.
pub fn capsule_avatar() -> BodyTemplate {
    let torso = shapes::capsule(Vec3::zeros(), 0.15, 0.4, 20, 4, 6);
    let left = shapes::capsule(Vec3::new(-0.24, -0.02, 0.0), 0.06, 0.3, 12, 3, 4);
    let right = shapes::capsule(Vec3::new(0.24, -0.02, 0.0), 0.06, 0.3, 12, 3, 4);
    let joints = vec![Vec3::new(0.0, -0.2, 0.0), Vec3::new(0.0, 0.1, 0.0), Vec3::new(-0.24, 0.17, 0.0), Vec3::new(0.24, 0.17, 0.0)];
    let parents = vec![None, Some(0), Some(1), Some(1)];
    assemble(
        vec![
            Part { mesh: torso, joint: 1, blend: Some((0, -0.15, 0.15)) },
            Part { mesh: left, joint: 2, blend: None },
            Part { mesh: right, joint: 3, blend: None },
        ],
        joints,
        parents,
        6,
    )
}

/// A single capsule bound to one root joint.
pub fn single_capsule(radius: f64, length: f64) -> BodyTemplate {
    let mesh = shapes::capsule(Vec3::zeros(), radius, length, 24, 5, 6);
    assemble(vec![Part { mesh, joint: 0, blend: None }], vec![Vec3::zeros()], vec![None], 4)
}

/// Template with the vertex and face counts of the SMPL-X body, bound to a
/// single joint.
pub fn smplx_resolution_template() -> BodyTemplate {
    let mesh = shapes::smplx_resolution_mesh();
    assemble(vec![Part { mesh, joint: 0, blend: None }], vec![Vec3::zeros()], vec![None], 76)
}

/// Smooth color pattern over canonical space, different front and back.
pub fn truth_color(p: &Vec3) -> Vec3 {
    Vec3::new(
        0.5 + 0.35 * (5.0 * p.y + 1.0).sin(),
        0.5 + 0.3 * (4.0 * p.x + 3.0 * p.z).cos(),
        0.5 + 0.35 * (6.0 * p.z).sin(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySceneConfig {
    pub frames: usize,
    pub size: usize,
    pub subdivisions: usize,
    /// Camera distance from the subject center.
    pub distance: f64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        ToySceneConfig { frames: 20, size: 64, subdivisions: 1, distance: 2.2 }
    }
}

/// Ground truth the frames were rendered from.
#[derive(Debug, Clone)]
pub struct ToyTruth {
    pub positions: Vec<Vec3>,
    pub cloud: SurfelCloud,
    pub colors: Vec<Vec3>,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyScene {
    pub template: BodyTemplate,
    pub sequence: PoseSequence,
    pub frames: Vec<Frame>,
    pub truth: ToyTruth,
    pub config: ToySceneConfig,
}

pub fn toy_camera(config: &ToySceneConfig, azimuth: f64, elevation: f64) -> Camera {
    let focal = 1.9 * config.size as f64;
    let base = Camera::look_at(Vec3::new(0.0, 0.0, config.distance), Vec3::zeros(), Vec3::y(), focal, config.size, config.size);
    base.orbit(Vec3::zeros(), config.distance, azimuth, elevation)
}

/// Pose at normalized time `s ∈ [0, 1)`: the body turns a full circle about
/// +y while the arms swing.
pub fn toy_pose(s: f64) -> Pose {
    let mut p = Pose::rest(4);
    p.axis_angles[0] = Vec3::new(0.0, 2.0 * PI * s, 0.0);
    p.axis_angles[1] = Vec3::new(0.1 * (2.0 * PI * s).sin(), 0.0, 0.0);
    p.axis_angles[2] = Vec3::new(0.3 * (4.0 * PI * s).sin(), 0.0, -0.25);
    p.axis_angles[3] = Vec3::new(-0.3 * (4.0 * PI * s).sin(), 0.0, 0.25);
    p
}

pub const TOY_BETAS: [f64; 2] = [0.3, -0.2];

impl ToyScene {
    /// Capsule avatar seen by a fixed camera while it turns.
    pub fn new(config: ToySceneConfig) -> Result<Self> {
        let template = capsule_avatar();
        let sequence = PoseSequence { betas: TOY_BETAS.to_vec(), poses: (0..config.frames).map(|t| toy_pose(t as f64 / config.frames as f64)).collect() };
        let cameras = vec![toy_camera(&config, 0.0, 0.0); config.frames];
        ToyScene::with_cameras(template, sequence, &cameras, config)
    }

    pub fn with_cameras(template: BodyTemplate, sequence: PoseSequence, cameras: &[Camera], config: ToySceneConfig) -> Result<Self> {
        template.validate()?;
        let cloud = init_from_template(&template, &sequence.betas, config.subdivisions, FieldConfig::small(), 8, 0)?;
        let colors = cloud.positions.iter().map(truth_color).collect();
        let truth = ToyTruth { positions: cloud.positions.clone(), scales: cloud.scale_labels.clone(), colors, cloud };
        let mut scene = ToyScene { template, sequence, frames: Vec::new(), truth, config };
        scene.frames = (0..scene.sequence.len()).map(|t| scene.observe(&scene.sequence.poses[t], &cameras[t])).collect::<Result<_>>()?;
        Ok(scene)
    }

    pub fn truth_splats(&self, pose: &Pose) -> Result<Splats> {
        let bones = bone_transforms(&self.template, &self.sequence.betas, pose)?;
        let rots = self.truth.cloud.rotation_matrices();
        let posed = skin_surfels(&self.truth.positions, &rots, self.truth.cloud.binding()?, &bones);
        Ok(Splats {
            positions: posed.positions,
            rotations: posed.rotations,
            scales: self.truth.scales.clone(),
            colors: self.truth.colors.clone(),
            occlusion: vec![1.0; self.truth.positions.len()],
        })
    }

    pub fn render_truth(&self, pose: &Pose, camera: &Camera, request: &RenderRequest) -> Result<RenderOutput> {
        render(&self.truth_splats(pose)?, camera, request)
    }

    /// Observation of the truth: rgb, binary mask, unit front/back normals
    /// inside the mask, and exact keypoints.
    pub fn observe(&self, pose: &Pose, camera: &Camera) -> Result<Frame> {
        let front = self.render_truth(pose, camera, &RenderRequest::front())?;
        let back = self.render_truth(pose, camera, &RenderRequest::back_normal())?;
        let mask = front.opacity.map(|o| if o > 0.5 { 1.0 } else { 0.0 });
        let normal = front.unit_normals(false).expect("front normals").masked(&mask);
        let mut back_unit = back.unit_normals(true).expect("back normals");
        back_unit = back_unit.masked(&mask);
        let kp = regress_keypoints(&self.template, &self.sequence.betas, pose, camera)?;
        Ok(Frame {
            camera: camera.clone(),
            rgb: front.rgb.expect("rgb"),
            mask,
            normal: Some(normal),
            back_normal: Some(back_unit),
            keypoints: kp
                .iter()
                .map(|k| match k {
                    Some((x, y)) => Keypoint { x: *x, y: *y, confidence: 1.0 },
                    None => Keypoint { x: 0.0, y: 0.0, confidence: 0.0 },
                })
                .collect(),
        })
    }

    /// Fresh cloud for fitting: same geometry as the truth, field pretrained
    /// on the scale labels, colors untrained.
    pub fn initial_cloud(&self, seed: u64) -> Result<SurfelCloud> {
        let mut cloud = init_from_template(&self.template, &self.sequence.betas, self.config.subdivisions, FieldConfig::small(), 8, seed)?;
        let labels = cloud.scale_labels.clone();
        let positions = cloud.positions.clone();
        pretrain_field(&mut cloud.field, &positions, &labels, &PretrainConfig { steps: 300, lr: 1e-2 })?;
        Ok(cloud)
    }
}

/// Binary silhouette of a triangle mesh by point-in-triangle tests at pixel
/// centers; an oracle for rendered masks.
pub fn mesh_silhouette(mesh: &TriMesh, camera: &Camera) -> Image {
    let (w, h) = (camera.width, camera.height);
    let mut out = Image::new(w, h, 1);
    let projected: Vec<Option<(f64, f64)>> = mesh.vertices.iter().map(|v| camera.project(v)).collect();
    for f in &mesh.faces {
        let (Some(a), Some(b), Some(c)) = (projected[f[0] as usize], projected[f[1] as usize], projected[f[2] as usize]) else { continue };
        let x0 = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let x1 = (a.0.max(b.0).max(c.0).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let y0 = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let y1 = (a.1.max(b.1).max(c.1).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        let edge = |p: (f64, f64), q: (f64, f64), x: f64, y: f64| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64, y as f64);
                let e0 = edge(a, b, px, py);
                let e1 = edge(b, c, px, py);
                let e2 = edge(c, a, px, py);
                if (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0) {
                    out.set(x, y, 0, 1.0);
                }
            }
        }
    }
    out
}

/// Intersection over union of two binary masks (threshold 0.5).
pub fn mask_iou(a: &Image, b: &Image) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (p, q) = (*x > 0.5, *y > 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Resolution of the bundled two-frame fixture.
pub const GOLDEN_SIZE: usize = 128;

/// The bundled fixture: two frames of the capsule avatar from two cameras,
/// initial poses perturbed from the truth, and pipeline settings sized for a
/// quick end-to-end run.
#[derive(Debug, Clone)]
pub struct GoldenScene {
    pub scene: ToyScene,
    pub initial: PoseSequence,
    pub prompt: String,
    pub config: serde_json::Value,
}

pub fn golden_scene() -> Result<GoldenScene> {
    let config = ToySceneConfig { frames: 2, size: GOLDEN_SIZE, subdivisions: 2, distance: 2.2 };
    let sequence = PoseSequence { betas: TOY_BETAS.to_vec(), poses: vec![toy_pose(0.0), toy_pose(0.1)] };
    let cameras = [toy_camera(&config, 0.0, 0.1), toy_camera(&config, 0.7, 0.0)];
    let scene = ToyScene::with_cameras(capsule_avatar(), sequence, &cameras, config)?;
    let mut initial = scene.sequence.clone();
    initial.betas = vec![0.0; 2];
    for (t, p) in initial.poses.iter_mut().enumerate() {
        let s = if t % 2 == 0 { 1.0 } else { -1.0 };
        p.axis_angles[2] += Vec3::new(0.08 * s, 0.0, 0.05);
        p.axis_angles[3] += Vec3::new(-0.06, 0.04 * s, 0.0);
        p.translation += Vec3::new(0.01 * s, -0.01, 0.0);
    }
    let field = FieldConfig::small();
    let config = serde_json::json!({
        "pose": { "epochs": 10 },
        "init": { "subdivisions": 2, "bind_neighbors": 8, "field": field, "pretrain": { "steps": 300, "lr": 1e-2 } },
        "reconstruction": { "steps": 150 },
        "sds": {
            "shape": { "steps": 10, "lambda_rgb": 0.0, "lambda_normal": 1e-4 },
            "texture": { "steps": 10, "lambda_rgb": 1e-4, "lambda_normal": 0.0 }
        }
    });
    Ok(GoldenScene { scene, initial, prompt: "a person built from smooth capsules".into(), config })
}

//! Keypoint-driven refinement of shape and per-frame poses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::articulation::{regress_keypoints_3d, regress_keypoints_3d_backward, BodyTemplate};
use crate::error::{Error, Result};
use crate::loss::{geman_mcclure, geman_mcclure_sigma};
use crate::math::{rodrigues, rodrigues_backward, Mat3, Vec3};
use crate::optim::{lbfgs_minimize, LbfgsConfig, LbfgsStatus};
use crate::scene::{Frame, PoseSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseRefinementConfig {
    pub lambda_data: f64,
    pub lambda_smooth: f64,
    pub lambda_preserve: f64,
    /// Geman-McClure width in pixels at 512-pixel resolution.
    pub sigma_px: f64,
    /// Outer epochs `K`; each runs up to `iterations_per_epoch` L-BFGS
    /// iterations with curvature history carried across epochs.
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Line-search and history settings; `max_iterations` is ignored.
    pub lbfgs: LbfgsConfig,
}

impl Default for PoseRefinementConfig {
    fn default() -> Self {
        PoseRefinementConfig {
            lambda_data: 100.0,
            lambda_smooth: 10000.0,
            lambda_preserve: 60.0,
            sigma_px: 50.0,
            epochs: 40,
            iterations_per_epoch: 20,
            lbfgs: LbfgsConfig { lr: 1.0, ..LbfgsConfig::default() },
        }
    }
}

impl PoseRefinementConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_data", self.lambda_data),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_preserve", self.lambda_preserve),
            ("sigma_px", self.sigma_px),
            ("lr", self.lbfgs.lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("pose refinement {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Energy terms, already multiplied by their weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseEnergy {
    pub data: f64,
    pub smooth: f64,
    pub preserve: f64,
}

impl PoseEnergy {
    pub fn total(&self) -> f64 {
        self.data + self.smooth + self.preserve
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRefinementReport {
    pub sequence: PoseSequence,
    pub initial: PoseEnergy,
    pub last: PoseEnergy,
    pub iterations: usize,
    pub status: LbfgsStatus,
    pub history: Vec<f64>,
}

fn check_inputs(template: &BodyTemplate, frames: &[Frame], init: &PoseSequence) -> Result<()> {
    if frames.len() != init.len() {
        return Err(Error::Dimension(format!("{} frames but {} poses", frames.len(), init.len())));
    }
    if init.betas.len() != template.num_betas {
        return Err(Error::Dimension(format!("{} betas, template has {}", init.betas.len(), template.num_betas)));
    }
    for (t, (f, p)) in frames.iter().zip(&init.poses).enumerate() {
        if f.keypoints.len() != template.num_keypoints() {
            return Err(Error::Dimension(format!("frame {t}: {} keypoints, template regresses {}", f.keypoints.len(), template.num_keypoints())));
        }
        if p.axis_angles.len() != template.num_joints() {
            return Err(Error::Dimension(format!("frame {t}: pose has {} joints, template has {}", p.axis_angles.len(), template.num_joints())));
        }
    }
    Ok(())
}

/// Width of the smoothed norm `√(‖x‖² + ε²) − ε` used for the smoothness
/// and preservation terms.
pub const NORM_SMOOTHING: f64 = 1e-3;

/// Smoothed `‖x‖` and its derivative factor `1/√(‖x‖² + ε²)`.
fn smooth_norm(sq: f64) -> (f64, f64) {
    let r = (sq + NORM_SMOOTHING * NORM_SMOOTHING).sqrt();
    (r - NORM_SMOOTHING, 1.0 / r)
}

fn smooth_norm_grad(x: &[f64]) -> (f64, Vec<f64>) {
    let (n, k) = smooth_norm(x.iter().map(|v| v * v).sum());
    (n, x.iter().map(|v| v * k).collect())
}

/// Weighted energy over `seq` and its gradient in the layout of
/// [`PoseSequence::to_vec`]. `init` supplies the preservation anchors.
pub fn pose_energy(
    template: &BodyTemplate,
    frames: &[Frame],
    init: &PoseSequence,
    seq: &PoseSequence,
    config: &PoseRefinementConfig,
) -> Result<(PoseEnergy, Vec<f64>)> {
    check_inputs(template, frames, seq)?;
    let nb = template.num_betas;
    let nj = template.num_joints();
    let per = 3 * nj + 3;
    let mut grad = vec![0.0; nb + per * seq.len()];

    // Data term, one frame per task; reduced in frame order.
    let per_frame: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = frames
        .par_iter()
        .zip(&seq.poses)
        .map(|(frame, pose)| {
            let bones = crate::articulation::bone_transforms(template, &seq.betas, pose)?;
            let cam = &frame.camera;
            let sigma = geman_mcclure_sigma(config.sigma_px, cam.width, cam.height);
            let k3 = regress_keypoints_3d(template, &seq.betas, &bones);
            let mut value = 0.0;
            let mut dk = vec![Vec3::zeros(); k3.len()];
            for ((p, obs), d) in k3.iter().zip(&frame.keypoints).zip(dk.iter_mut()) {
                if !(obs.confidence > 0.0) {
                    continue;
                }
                let pc = cam.to_camera(p);
                let Some((u, v)) = cam.project_camera(&pc) else { continue };
                let (rho, g) = geman_mcclure(&[u - obs.x, v - obs.y], sigma);
                let w = config.lambda_data * obs.confidence;
                value += w * rho;
                let (ju, jv) = cam.project_camera_jacobian(&pc);
                *d = cam.rotation.transpose() * (ju * (w * g[0]) + jv * (w * g[1]));
            }
            let (bg, direct) = regress_keypoints_3d_backward(template, &seq.betas, &bones, &dk);
            let pg = bones.backward(template, &bg);
            let mut d_pose: Vec<f64> = pg.axis_angles.iter().flat_map(|v| v.iter().copied()).collect();
            d_pose.extend(pg.translation.iter());
            let d_beta = pg.betas.iter().zip(&direct).map(|(a, b)| a + b).collect();
            Ok((value, d_beta, d_pose))
        })
        .collect();
    let mut energy = PoseEnergy::default();
    for (t, r) in per_frame.into_iter().enumerate() {
        let (v, db, dp) = r?;
        energy.data += v;
        for (g, d) in grad[..nb].iter_mut().zip(&db) {
            *g += d;
        }
        for (g, d) in grad[nb + t * per..nb + (t + 1) * per].iter_mut().zip(&dp) {
            *g += d;
        }
    }

    // Smoothness: Σ_t Σ_j ‖R_{t−1,j} − R_{t,j}‖_F, smoothed at the origin.
    let rots: Vec<Vec<Mat3>> = seq.poses.iter().map(|p| p.axis_angles.iter().map(rodrigues).collect()).collect();
    let mut d_rot = vec![vec![Mat3::zeros(); nj]; seq.len()];
    for t in 1..seq.len() {
        for j in 0..nj {
            let d = rots[t - 1][j] - rots[t][j];
            let (n, k) = smooth_norm(d.norm_squared());
            energy.smooth += config.lambda_smooth * n;
            let g = d * (config.lambda_smooth * k);
            d_rot[t - 1][j] += g;
            d_rot[t][j] -= g;
        }
    }
    for (t, pose) in seq.poses.iter().enumerate() {
        for j in 0..nj {
            if d_rot[t][j] != Mat3::zeros() {
                let g = rodrigues_backward(&pose.axis_angles[j], &d_rot[t][j]);
                for k in 0..3 {
                    grad[nb + t * per + 3 * j + k] += g[k];
                }
            }
        }
    }

    // Preservation: ‖β − β⁽⁰⁾‖ + Σ_t ‖θ_t − θ_t⁽⁰⁾‖, smoothed likewise.
    let db: Vec<f64> = seq.betas.iter().zip(&init.betas).map(|(a, b)| a - b).collect();
    let (n, g) = smooth_norm_grad(&db);
    energy.preserve += config.lambda_preserve * n;
    for (a, b) in grad[..nb].iter_mut().zip(g) {
        *a += config.lambda_preserve * b;
    }
    for (t, (p, p0)) in seq.poses.iter().zip(&init.poses).enumerate() {
        let d: Vec<f64> = p.axis_angles.iter().zip(&p0.axis_angles).flat_map(|(a, b)| (a - b).iter().copied().collect::<Vec<_>>()).collect();
        let (n, g) = smooth_norm_grad(&d);
        energy.preserve += config.lambda_preserve * n;
        for (a, b) in grad[nb + t * per..nb + t * per + 3 * nj].iter_mut().zip(g) {
            *a += config.lambda_preserve * b;
        }
    }
    Ok((energy, grad))
}

/// Minimize the keypoint energy over `β`, every `θ_t` and every root
/// translation `b_t`, starting from `init`.
pub fn refine_pose(template: &BodyTemplate, frames: &[Frame], init: &PoseSequence, config: &PoseRefinementConfig) -> Result<PoseRefinementReport> {
    config.validate()?;
    check_inputs(template, frames, init)?;
    for (t, f) in frames.iter().enumerate() {
        if f.keypoints.iter().all(|k| !(k.confidence > 0.0)) {
            log::warn!("frame {t} has no confident keypoints; only smoothness and preservation constrain it");
        }
    }
    let nb = template.num_betas;
    let nj = template.num_joints();
    let (initial, _) = pose_energy(template, frames, init, init, config)?;
    let mut failure: Option<Error> = None;
    let report = lbfgs_minimize(
        |x| {
            let seq = PoseSequence::from_slice(x, nb, nj);
            match pose_energy(template, frames, init, &seq, config) {
                Ok((e, g)) => (e.total(), g),
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, vec![0.0; x.len()])
                }
            }
        },
        &init.to_vec(),
        &LbfgsConfig { max_iterations: config.epochs * config.iterations_per_epoch, ..config.lbfgs },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    if !report.value.is_finite() {
        return Err(Error::Numerical("pose energy became non-finite".into()));
    }
    let sequence = PoseSequence::from_slice(&report.x, nb, nj);
    let (last, _) = pose_energy(template, frames, init, &sequence, config)?;
    log::info!(
        "pose refinement: energy {:.6e} -> {:.6e} in {} iterations ({:?})",
        initial.total(),
        last.total(),
        report.iterations,
        report.status
    );
    Ok(PoseRefinementReport { sequence, initial, last, iterations: report.iterations, status: report.status, history: report.history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::articulation::tests::chain_template;
    use crate::articulation::{regress_keypoints, Pose};
    use crate::camera::Camera;
    use crate::image::Image;
    use crate::math::geodesic_distance;
    use crate::scene::Keypoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frames_for(template: &BodyTemplate, seq: &PoseSequence, cam: &Camera) -> Vec<Frame> {
        seq.poses
            .iter()
            .map(|p| {
                let kp = regress_keypoints(template, &seq.betas, p, cam).unwrap();
                Frame {
                    camera: cam.clone(),
                    rgb: Image::new(cam.width, cam.height, 3),
                    mask: Image::new(cam.width, cam.height, 1),
                    normal: None,
                    back_normal: None,
                    keypoints: kp.iter().map(|k| {
                        let (x, y) = k.unwrap();
                        Keypoint { x, y, confidence: 1.0 }
                    }).collect(),
                }
            })
            .collect()
    }

    fn camera() -> Camera {
        Camera::look_at(Vec3::new(0.4, 0.0, 3.0), Vec3::new(0.4, 0.0, 0.0), Vec3::y(), 1000.0, 512, 512)
    }

    fn sequence(rng: &mut ChaCha8Rng, n: usize) -> PoseSequence {
        PoseSequence {
            betas: vec![0.2, -0.1],
            poses: (0..n)
                .map(|t| Pose {
                    axis_angles: (0..3).map(|j| Vec3::new(0.1 * j as f64, 0.02 * t as f64, 0.3 + 0.01 * t as f64) + Vec3::new(rng.random_range(-0.01..0.01), 0.0, 0.0)).collect(),
                    translation: Vec3::new(0.0, 0.01 * t as f64, 0.0),
                })
                .collect(),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let template = chain_template();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = sequence(&mut rng, 3);
        let frames = frames_for(&template, &gt, &camera());
        let mut init = gt.clone();
        for p in &mut init.poses {
            for a in &mut p.axis_angles {
                *a += Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            }
        }
        let mut cur = init.clone();
        cur.betas[0] += 0.05;
        cur.poses[1].translation.x += 0.02;
        for p in &mut cur.poses {
            p.axis_angles[2].y += 0.03;
        }
        let cfg = PoseRefinementConfig::default();
        let (_, g) = pose_energy(&template, &frames, &init, &cur, &cfg).unwrap();
        let x = cur.to_vec();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let e = |v: &[f64]| pose_energy(&template, &frames, &init, &PoseSequence::from_slice(v, 2, 3), &cfg).unwrap().0.total();
            let fd = (e(&xp) - e(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-3 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let template = chain_template();
        let gt = PoseSequence { betas: vec![0.2, -0.1], poses: vec![Pose { axis_angles: vec![Vec3::new(0.0, 0.0, 0.3); 3], translation: Vec3::zeros() }; 3] };
        let frames = frames_for(&template, &gt, &camera());
        let cfg = PoseRefinementConfig::default();
        let (e, g) = pose_energy(&template, &frames, &gt, &gt, &cfg).unwrap();
        assert!(e.total() < 1e-12);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
        let r = refine_pose(&template, &frames, &gt, &cfg).unwrap();
        assert_eq!(r.iterations, 0);
        for (a, b) in r.sequence.to_vec().iter().zip(gt.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn recovers_perturbed_poses() {
        let mut template = chain_template();
        template.regressor = crate::articulation::SparseRows::from_rows((0..12).map(|v| vec![(v as u32, 1.0)]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Twist about the chain axis is barely observable here, so the
        // ground truth holds still and only the initialization varies.
        let mut gt = sequence(&mut rng, 1);
        gt.poses = vec![gt.poses[0].clone(); 4];
        // Oblique view so twists about the chain axis move keypoints on screen.
        let cam = Camera::look_at(Vec3::new(0.4, 1.8, 2.4), Vec3::new(0.4, 0.0, 0.0), Vec3::y(), 1000.0, 512, 512);
        let frames = frames_for(&template, &gt, &cam);
        let mut init = gt.clone();
        let normal = rand_distr::Normal::new(0.0, 0.05).unwrap();
        for p in &mut init.poses {
            for a in &mut p.axis_angles {
                *a += Vec3::from_fn(|_, _| rng.sample(normal));
            }
        }
        let r = refine_pose(&template, &frames, &init, &PoseRefinementConfig::default()).unwrap();
        assert!(r.last.total() < r.initial.total());
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        let mut worst: f64 = 0.0;
        for (p, q) in r.sequence.poses.iter().zip(&gt.poses) {
            for (a, b) in p.axis_angles.iter().zip(&q.axis_angles) {
                worst = worst.max(geodesic_distance(&rodrigues(a), &rodrigues(b)));
            }
        }
        assert!(worst < 0.01, "worst joint error {worst} after {} iterations ({:?})", r.iterations, r.status);
    }

    #[test]
    fn huge_smoothness_ties_frames_together() {
        let template = chain_template();
        let mut gt = PoseSequence { betas: vec![0.0, 0.0], poses: vec![Pose::rest(3), Pose::rest(3)] };
        gt.poses[0].axis_angles[1] = Vec3::new(0.0, 0.0, 0.2);
        gt.poses[1].axis_angles[1] = Vec3::new(0.0, 0.0, -0.2);
        let frames = frames_for(&template, &gt, &camera());
        let init = PoseSequence { betas: vec![0.0, 0.0], poses: vec![Pose::rest(3), Pose::rest(3)] };
        let cfg = PoseRefinementConfig { lambda_smooth: 1e8, ..Default::default() };
        let r = refine_pose(&template, &frames, &init, &cfg).unwrap();
        for j in 0..3 {
            let d = geodesic_distance(&rodrigues(&r.sequence.poses[0].axis_angles[j]), &rodrigues(&r.sequence.poses[1].axis_angles[j]));
            assert!(d < 1e-3, "joint {j}: {d} {:?} {} {:?}", r.status, r.iterations, r.last);
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let template = chain_template();
        let gt = PoseSequence { betas: vec![0.0, 0.0], poses: vec![Pose::rest(3)] };
        let mut frames = frames_for(&template, &gt, &camera());
        frames[0].keypoints.pop();
        assert!(refine_pose(&template, &frames, &gt, &PoseRefinementConfig::default()).is_err());
    }
}

//! Kinematic body model: forward kinematics, linear blend skinning of
//! surfels and template vertices, and keypoint regression.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{gram_schmidt, gram_schmidt_backward, rodrigues, rodrigues_backward, Mat3, Vec3};
use crate::mesh::TriMesh;
use crate::spatial::KdTree;

/// Compressed sparse rows of `(column, value)` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SparseRows {
    pub offsets: Vec<usize>,
    pub columns: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseRows {
    pub fn from_rows(rows: impl IntoIterator<Item = Vec<(u32, f64)>>) -> Self {
        let mut out = SparseRows { offsets: vec![0], ..Default::default() };
        for row in rows {
            for (c, v) in row {
                out.columns.push(c);
                out.values.push(v);
            }
            out.offsets.push(out.columns.len());
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.columns[a..b].iter().zip(&self.values[a..b]).map(|(&c, &v)| (c as usize, v))
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }
}

/// Rest-pose body: mesh, skeleton, skinning weights, shape basis and
/// keypoint regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyTemplate {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Parent joint per joint; the root has `None`.
    pub parents: Vec<Option<usize>>,
    pub joints: Vec<Vec3>,
    /// Per-vertex skinning weights over joints.
    pub weights: SparseRows,
    /// Number of shape components `B`.
    pub num_betas: usize,
    /// Vertex offsets per shape component, `V × B` row-major.
    pub shape_dirs: Vec<Vec3>,
    /// Joint offsets per shape component, `J × B` row-major.
    pub joint_shape_dirs: Vec<Vec3>,
    /// Keypoint regressor over template vertices.
    pub regressor: SparseRows,
}

impl BodyTemplate {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.regressor.rows()
    }

    pub fn mesh(&self) -> TriMesh {
        TriMesh::new(self.vertices.clone(), self.faces.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let (nv, nj) = (self.num_vertices(), self.num_joints());
        let bad = |m: String| Err(Error::Template(m));
        if nj == 0 {
            return bad("template has no joints".into());
        }
        if self.parents.len() != nj {
            return bad(format!("{} parents for {nj} joints", self.parents.len()));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return bad(format!("kinematic tree must have exactly one root, found {roots}"));
        }
        for (j, p) in self.parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= nj {
                    return bad(format!("joint {j} has parent {p} out of range"));
                }
            }
        }
        // Every joint must reach the root without revisiting a joint.
        for start in 0..nj {
            let (mut j, mut steps) = (start, 0);
            while let Some(p) = self.parents[j] {
                j = p;
                steps += 1;
                if steps > nj {
                    return bad(format!("kinematic tree has a cycle through joint {start}"));
                }
            }
        }
        if self.weights.rows() != nv {
            return bad(format!("{} skinning-weight rows for {nv} vertices", self.weights.rows()));
        }
        for v in 0..nv {
            let mut sum = 0.0;
            for (j, w) in self.weights.row(v) {
                if j >= nj || !(w >= 0.0) {
                    return bad(format!("vertex {v} has an invalid skinning weight ({j}, {w})"));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return bad(format!("skinning weights of vertex {v} sum to {sum}"));
            }
        }
        if self.shape_dirs.len() != nv * self.num_betas || self.joint_shape_dirs.len() != nj * self.num_betas {
            return bad("shape basis does not match vertex/joint counts".into());
        }
        for k in 0..self.regressor.rows() {
            if self.regressor.row(k).any(|(v, _)| v >= nv) {
                return bad(format!("keypoint regressor row {k} references a vertex out of range"));
            }
            let sum = self.regressor.row_sum(k);
            if (sum - 1.0).abs() > 1e-6 {
                return bad(format!("keypoint regressor row {k} sums to {sum}"));
            }
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&v| v as usize >= nv)) {
            return bad(format!("face {f:?} references a vertex out of range"));
        }
        Ok(())
    }

    fn check_betas(&self, betas: &[f64]) -> Result<()> {
        if betas.len() != self.num_betas {
            return Err(Error::Dimension(format!("{} shape coefficients, template has {}", betas.len(), self.num_betas)));
        }
        Ok(())
    }

    pub fn shaped_vertex(&self, v: usize, betas: &[f64]) -> Vec3 {
        let b = self.num_betas;
        let mut p = self.vertices[v];
        for (k, beta) in betas.iter().enumerate() {
            p += self.shape_dirs[v * b + k] * *beta;
        }
        p
    }

    pub fn shaped_joints(&self, betas: &[f64]) -> Vec<Vec3> {
        let b = self.num_betas;
        (0..self.num_joints())
            .map(|j| {
                let mut p = self.joints[j];
                for (k, beta) in betas.iter().enumerate() {
                    p += self.joint_shape_dirs[j * b + k] * *beta;
                }
                p
            })
            .collect()
    }

    /// The rest-pose mesh with shape offsets applied.
    pub fn shaped_mesh(&self, betas: &[f64]) -> Result<TriMesh> {
        self.check_betas(betas)?;
        let vertices = (0..self.num_vertices()).map(|v| self.shaped_vertex(v, betas)).collect();
        Ok(TriMesh::new(vertices, self.faces.clone()))
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let nj = self.num_joints();
        let mut children = vec![Vec::new(); nj];
        let mut order = Vec::with_capacity(nj);
        for (j, p) in self.parents.iter().enumerate() {
            match p {
                Some(p) => children[*p].push(j),
                None => order.push(j),
            }
        }
        let mut i = 0;
        while i < order.len() {
            let j = order[i];
            order.extend(children[j].iter().copied());
            i += 1;
        }
        order
    }
}

/// Per-joint axis-angle rotations and a global translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub axis_angles: Vec<Vec3>,
    pub translation: Vec3,
}

impl Pose {
    pub fn rest(joints: usize) -> Self {
        Pose { axis_angles: vec![Vec3::zeros(); joints], translation: Vec3::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.axis_angles.iter().all(|v| v.iter().all(|x| x.is_finite())) && self.translation.iter().all(|x| x.is_finite())
    }

    /// Flatten to `[θ_0, θ_1, …, b]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.axis_angles.iter().flat_map(|v| v.iter().copied()).collect();
        out.extend(self.translation.iter());
        out
    }

    pub fn from_slice(values: &[f64]) -> Self {
        let j = (values.len() - 3) / 3;
        Pose {
            axis_angles: (0..j).map(|i| Vec3::new(values[3 * i], values[3 * i + 1], values[3 * i + 2])).collect(),
            translation: Vec3::new(values[3 * j], values[3 * j + 1], values[3 * j + 2]),
        }
    }
}

/// Bone transforms `B_j = [A_j | d_j]` mapping canonical to posed space,
/// plus the forward-kinematics intermediates needed for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneTransforms {
    pub rotations: Vec<Mat3>,
    pub translations: Vec<Vec3>,
    local: Vec<Mat3>,
    posed_joints: Vec<Vec3>,
    rest_joints: Vec<Vec3>,
    axis_angles: Vec<Vec3>,
}

/// Gradients with respect to shape, pose rotations and translation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrad {
    pub betas: Vec<f64>,
    pub axis_angles: Vec<Vec3>,
    pub translation: Vec3,
}

impl PoseGrad {
    pub fn zeros(joints: usize, betas: usize) -> Self {
        PoseGrad { betas: vec![0.0; betas], axis_angles: vec![Vec3::zeros(); joints], translation: Vec3::zeros() }
    }

    pub fn add(&mut self, other: &PoseGrad) {
        for (a, b) in self.betas.iter_mut().zip(&other.betas) {
            *a += b;
        }
        for (a, b) in self.axis_angles.iter_mut().zip(&other.axis_angles) {
            *a += b;
        }
        self.translation += other.translation;
    }
}

/// Accumulated gradients with respect to `(A_j, d_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneGrad {
    pub rotations: Vec<Mat3>,
    pub translations: Vec<Vec3>,
}

impl BoneGrad {
    pub fn zeros(joints: usize) -> Self {
        BoneGrad { rotations: vec![Mat3::zeros(); joints], translations: vec![Vec3::zeros(); joints] }
    }

    pub fn add(&mut self, other: &BoneGrad) {
        for (a, b) in self.rotations.iter_mut().zip(&other.rotations) {
            *a += b;
        }
        for (a, b) in self.translations.iter_mut().zip(&other.translations) {
            *a += b;
        }
    }
}

impl BoneTransforms {
    pub fn identity(joints: usize) -> Self {
        BoneTransforms {
            rotations: vec![Mat3::identity(); joints],
            translations: vec![Vec3::zeros(); joints],
            local: vec![Mat3::identity(); joints],
            posed_joints: vec![Vec3::zeros(); joints],
            rest_joints: vec![Vec3::zeros(); joints],
            axis_angles: vec![Vec3::zeros(); joints],
        }
    }

    /// Bones given directly as rigid transforms (no kinematic tree behind them).
    pub fn from_rigid(rotations: Vec<Mat3>, translations: Vec<Vec3>) -> Self {
        let j = rotations.len();
        BoneTransforms { rotations, translations, ..Self::identity(j) }
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    /// World-space joint locations after posing.
    pub fn posed_joints(&self) -> &[Vec3] {
        &self.posed_joints
    }

    /// Apply a rigid transform `x ↦ R x + t` after every bone.
    pub fn compose_rigid(&self, r: &Mat3, t: &Vec3) -> Self {
        BoneTransforms {
            rotations: self.rotations.iter().map(|a| r * a).collect(),
            translations: self.translations.iter().map(|d| r * d + t).collect(),
            ..self.clone()
        }
    }

    /// Chain `(dA_j, dd_j)` back to `(β, θ, b)`.
    pub fn backward(&self, template: &BodyTemplate, grad: &BoneGrad) -> PoseGrad {
        let nj = template.num_joints();
        let mut d_a = grad.rotations.clone();
        let mut d_t = vec![Vec3::zeros(); nj];
        let mut d_joint = vec![Vec3::zeros(); nj];
        // d_j = t_j − A_j J_j
        for j in 0..nj {
            let dd = grad.translations[j];
            d_t[j] += dd;
            d_a[j] -= dd * self.rest_joints[j].transpose();
            d_joint[j] -= self.rotations[j].transpose() * dd;
        }
        let mut out = PoseGrad::zeros(nj, template.num_betas);
        let order = template.topological_order();
        for &j in order.iter().rev() {
            match template.parents[j] {
                Some(p) => {
                    let a_p = self.rotations[p];
                    // A_j = A_p R_j
                    let d_local = a_p.transpose() * d_a[j];
                    let dap = d_a[j] * self.local[j].transpose();
                    d_a[p] += dap;
                    // t_j = A_p (J_j − J_p) + t_p
                    let rel = self.rest_joints[j] - self.rest_joints[p];
                    let dtj = d_t[j];
                    d_a[p] += dtj * rel.transpose();
                    let back = a_p.transpose() * dtj;
                    d_joint[j] += back;
                    d_joint[p] -= back;
                    d_t[p] += dtj;
                    out.axis_angles[j] = rodrigues_backward(&self.axis_angles[j], &d_local);
                }
                None => {
                    out.axis_angles[j] = rodrigues_backward(&self.axis_angles[j], &d_a[j]);
                    // t_0 = J_0 + b
                    d_joint[j] += d_t[j];
                    out.translation = d_t[j];
                }
            }
        }
        let b = template.num_betas;
        for (j, dj) in d_joint.iter().enumerate() {
            for k in 0..b {
                out.betas[k] += dj.dot(&template.joint_shape_dirs[j * b + k]);
            }
        }
        out
    }
}

/// Forward kinematics relative to the shaped rest pose.
pub fn bone_transforms(template: &BodyTemplate, betas: &[f64], pose: &Pose) -> Result<BoneTransforms> {
    template.check_betas(betas)?;
    let nj = template.num_joints();
    if pose.axis_angles.len() != nj {
        return Err(Error::Dimension(format!("pose has {} joints, template has {nj}", pose.axis_angles.len())));
    }
    if !pose.is_finite() {
        return Err(Error::Numerical("pose contains non-finite values".into()));
    }
    let rest = template.shaped_joints(betas);
    let local: Vec<Mat3> = pose.axis_angles.iter().map(rodrigues).collect();
    let mut world_r = vec![Mat3::identity(); nj];
    let mut world_t = vec![Vec3::zeros(); nj];
    for j in template.topological_order() {
        match template.parents[j] {
            Some(p) => {
                world_r[j] = world_r[p] * local[j];
                world_t[j] = world_r[p] * (rest[j] - rest[p]) + world_t[p];
            }
            None => {
                world_r[j] = local[j];
                world_t[j] = rest[j] + pose.translation;
            }
        }
    }
    let translations = (0..nj).map(|j| world_t[j] - world_r[j] * rest[j]).collect();
    Ok(BoneTransforms {
        rotations: world_r,
        translations,
        local,
        posed_joints: world_t,
        rest_joints: rest,
        axis_angles: pose.axis_angles.clone(),
    })
}

/// Sparse per-surfel skinning weights.
pub type Binding = SparseRows;

pub const DEFAULT_BIND_NEIGHBORS: usize = 30;
const BIND_EPS: f64 = 1e-8;

/// Skinning weights for each point: inverse-distance average of the weight
/// rows of its `k` nearest template vertices (in `vertices`, which must share
/// the points' canonical space).
pub fn bind_weights(points: &[Vec3], vertices: &[Vec3], weights: &SparseRows, k: usize) -> Result<Binding> {
    if k == 0 || k > vertices.len() {
        return Err(Error::InvalidArgument(format!("cannot bind to {k} nearest of {} template vertices", vertices.len())));
    }
    let tree = KdTree::build(vertices);
    let nj = weights.columns.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let rows: Vec<Vec<(u32, f64)>> = points
        .par_iter()
        .map(|p| {
            let nn = tree.knn(p, k, None);
            let a: Vec<f64> = nn.iter().map(|n| 1.0 / (n.dist_sq.sqrt() + BIND_EPS)).collect();
            let total: f64 = a.iter().sum();
            let mut dense = vec![0.0; nj];
            for (n, ak) in nn.iter().zip(&a) {
                for (j, w) in weights.row(n.index) {
                    dense[j] += w * ak / total;
                }
            }
            dense
                .into_iter()
                .enumerate()
                .filter(|(_, w)| *w > 0.0)
                .map(|(j, w)| (j as u32, w))
                .collect()
        })
        .collect();
    Ok(SparseRows::from_rows(rows))
}

/// Blended transform `M = Σ w_j A_j`, `d = Σ w_j d_j` for one binding row.
#[inline]
fn blend(binding: &Binding, i: usize, bones: &BoneTransforms) -> (Mat3, Vec3) {
    let mut m = Mat3::zeros();
    let mut d = Vec3::zeros();
    for (j, w) in binding.row(i) {
        m += bones.rotations[j] * w;
        d += bones.translations[j] * w;
    }
    (m, d)
}

/// Posed surfel state.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedSurfels {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
}

/// Apply blended bone transforms to canonical positions and orientations.
pub fn skin_surfels(positions: &[Vec3], rotations: &[Mat3], binding: &Binding, bones: &BoneTransforms) -> PosedSurfels {
    let (positions, rotations) = positions
        .par_iter()
        .zip(rotations.par_iter())
        .enumerate()
        .map(|(i, (mu, r0))| {
            let (m, d) = blend(binding, i, bones);
            (m * mu + d, gram_schmidt(&m) * r0)
        })
        .unzip();
    PosedSurfels { positions, rotations }
}

/// Gradients of skinning with respect to canonical state and bones.
pub struct SkinGrad {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub bones: BoneGrad,
}

/// Backward pass of [`skin_surfels`]. Bone gradients are reduced in a fixed
/// chunk order, so the result does not depend on the thread count.
pub fn skin_surfels_backward(
    positions: &[Vec3],
    rotations: &[Mat3],
    binding: &Binding,
    bones: &BoneTransforms,
    d_positions: &[Vec3],
    d_rotations: &[Mat3],
    want_bones: bool,
) -> SkinGrad {
    const CHUNK: usize = 1024;
    let nj = bones.len();
    let n = positions.len();
    let parts: Vec<(Vec<Vec3>, Vec<Mat3>, BoneGrad)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(n);
            let mut dmu = Vec::with_capacity(range.len());
            let mut dr = Vec::with_capacity(range.len());
            let mut bg = BoneGrad::zeros(if want_bones { nj } else { 0 });
            for i in range {
                let (m, _) = blend(binding, i, bones);
                let q = gram_schmidt(&m);
                let (gp, gr) = (d_positions[i], d_rotations[i]);
                dmu.push(m.transpose() * gp);
                dr.push(q.transpose() * gr);
                if want_bones {
                    let dm = gp * positions[i].transpose() + gram_schmidt_backward(&m, &(gr * rotations[i].transpose()));
                    for (j, w) in binding.row(i) {
                        bg.rotations[j] += dm * w;
                        bg.translations[j] += gp * w;
                    }
                }
            }
            (dmu, dr, bg)
        })
        .collect();
    let mut out = SkinGrad {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        bones: BoneGrad::zeros(if want_bones { nj } else { 0 }),
    };
    for (dmu, dr, bg) in parts {
        out.positions.extend(dmu);
        out.rotations.extend(dr);
        out.bones.add(&bg);
    }
    out
}

/// 3D keypoints regressed from LBS-posed template vertices.
pub fn regress_keypoints_3d(template: &BodyTemplate, betas: &[f64], bones: &BoneTransforms) -> Vec<Vec3> {
    let reg = &template.regressor;
    (0..reg.rows())
        .map(|k| {
            let mut p = Vec3::zeros();
            for (v, r) in reg.row(k) {
                let vs = template.shaped_vertex(v, betas);
                let (m, d) = blend(&template.weights, v, bones);
                p += (m * vs + d) * r;
            }
            p
        })
        .collect()
}

/// Projected keypoints; `None` marks keypoints behind the camera.
pub fn regress_keypoints(template: &BodyTemplate, betas: &[f64], pose: &Pose, camera: &Camera) -> Result<Vec<Option<(f64, f64)>>> {
    let bones = bone_transforms(template, betas, pose)?;
    Ok(regress_keypoints_3d(template, betas, &bones).iter().map(|p| camera.project(p)).collect())
}

/// Backward pass of [`regress_keypoints_3d`] given `dL/dk` per keypoint.
/// Returns bone gradients and the direct shape gradient from vertex offsets.
pub fn regress_keypoints_3d_backward(
    template: &BodyTemplate,
    betas: &[f64],
    bones: &BoneTransforms,
    d_keypoints: &[Vec3],
) -> (BoneGrad, Vec<f64>) {
    let reg = &template.regressor;
    let nb = template.num_betas;
    let mut bg = BoneGrad::zeros(bones.len());
    let mut d_beta = vec![0.0; nb];
    for (k, dk) in d_keypoints.iter().enumerate() {
        if dk.iter().all(|&x| x == 0.0) {
            continue;
        }
        for (v, r) in reg.row(k) {
            let g = dk * r;
            let vs = template.shaped_vertex(v, betas);
            let mut dvs = Vec3::zeros();
            for (j, w) in template.weights.row(v) {
                bg.rotations[j] += g * vs.transpose() * w;
                bg.translations[j] += g * w;
                dvs += bones.rotations[j].transpose() * g * w;
            }
            for (b, db) in d_beta.iter_mut().enumerate() {
                *db += dvs.dot(&template.shape_dirs[v * nb + b]);
            }
        }
    }
    (bg, d_beta)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::math::rodrigues_log;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Three-joint chain along +x with two betas and one-hot keypoints.
    pub(crate) fn chain_template() -> BodyTemplate {
        let vertices: Vec<Vec3> = (0..12).map(|i| Vec3::new(i as f64 * 0.1, 0.05 * (i % 3) as f64, 0.02 * (i % 2) as f64)).collect();
        let joints = vec![Vec3::zeros(), Vec3::new(0.4, 0.0, 0.0), Vec3::new(0.8, 0.0, 0.0)];
        let weights = SparseRows::from_rows((0..12).map(|i| {
            let x = i as f64 * 0.1;
            if x < 0.35 {
                vec![(0, 1.0)]
            } else if x < 0.75 {
                vec![(0, 0.3), (1, 0.7)]
            } else {
                vec![(1, 0.4), (2, 0.6)]
            }
        }));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rv = || Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let shape_dirs = (0..24).map(|_| rv()).collect();
        let joint_shape_dirs = (0..6).map(|_| rv()).collect();
        let regressor = SparseRows::from_rows([vec![(0, 1.0)], vec![(5, 0.5), (6, 0.5)], vec![(11, 1.0)], vec![(3, 0.2), (9, 0.8)]]);
        BodyTemplate {
            vertices,
            faces: vec![[0, 1, 2]],
            parents: vec![None, Some(0), Some(1)],
            joints,
            weights,
            num_betas: 2,
            shape_dirs,
            joint_shape_dirs,
            regressor,
        }
    }

    #[test]
    fn validation_catches_broken_templates() {
        let t = chain_template();
        t.validate().unwrap();
        let mut bad = t.clone();
        bad.parents = vec![Some(2), Some(0), Some(1)];
        assert!(bad.validate().is_err());
        let mut bad = t.clone();
        bad.parents = vec![None, None, Some(1)];
        assert!(bad.validate().is_err());
        let mut bad = t.clone();
        bad.weights.values[0] = 0.9;
        assert!(bad.validate().is_err());
        let mut bad = t;
        bad.regressor.values[1] = 0.6;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rest_pose_is_identity() {
        let t = chain_template();
        let bones = bone_transforms(&t, &[0.3, -0.2], &Pose::rest(3)).unwrap();
        for (r, d) in bones.rotations.iter().zip(&bones.translations) {
            assert!((r - Mat3::identity()).norm() < 1e-15);
            assert!(d.norm() < 1e-15);
        }
    }

    #[test]
    fn two_link_root_rotation() {
        let mut t = chain_template();
        t.parents.truncate(2);
        t.joints.truncate(2);
        t.joint_shape_dirs.truncate(4);
        let mut pose = Pose::rest(2);
        pose.axis_angles[0] = Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let bones = bone_transforms(&t, &[0.0, 0.0], &pose).unwrap();
        // Child at (0.4, 0, 0) rotates about the root at the origin to (0, 0.4, 0).
        assert!((bones.posed_joints()[1] - Vec3::new(0.0, 0.4, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn zero_betas_ignore_basis() {
        let t = chain_template();
        let mut zeroed = t.clone();
        zeroed.shape_dirs.iter_mut().for_each(|v| *v = Vec3::zeros());
        zeroed.joint_shape_dirs.iter_mut().for_each(|v| *v = Vec3::zeros());
        let mut pose = Pose::rest(3);
        pose.axis_angles[1] = Vec3::new(0.2, -0.4, 0.1);
        pose.translation = Vec3::new(0.1, 0.0, 1.0);
        let a = bone_transforms(&t, &[0.0, 0.0], &pose).unwrap();
        let b = bone_transforms(&zeroed, &[0.0, 0.0], &pose).unwrap();
        assert_eq!(a.rotations, b.rotations);
        assert_eq!(a.translations, b.translations);
    }

    fn random_pose(rng: &mut ChaCha8Rng, joints: usize, scale: f64) -> Pose {
        Pose {
            axis_angles: (0..joints)
                .map(|_| Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale)))
                .collect(),
            translation: Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
        }
    }

    #[test]
    fn bone_backward_matches_finite_differences() {
        let t = chain_template();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng, 3, 0.8);
        let betas = vec![0.4, -0.7];
        let ga: Vec<Mat3> = (0..3).map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let gd: Vec<Vec3> = (0..3).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let loss = |betas: &[f64], pose: &Pose| {
            let b = bone_transforms(&t, betas, pose).unwrap();
            (0..3).map(|j| b.rotations[j].component_mul(&ga[j]).sum() + b.translations[j].dot(&gd[j])).sum::<f64>()
        };
        let bones = bone_transforms(&t, &betas, &pose).unwrap();
        let g = bones.backward(&t, &BoneGrad { rotations: ga.clone(), translations: gd.clone() });
        let h = 1e-6;
        let x = pose.to_vec();
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&betas, &Pose::from_slice(&xp)) - loss(&betas, &Pose::from_slice(&xm))) / (2.0 * h);
            let an = if i < 9 { g.axis_angles[i / 3][i % 3] } else { g.translation[i - 9] };
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "pose {i}: {fd} vs {an}");
        }
        for k in 0..2 {
            let (mut bp, mut bm) = (betas.clone(), betas.clone());
            bp[k] += h;
            bm[k] -= h;
            let fd = (loss(&bp, &pose) - loss(&bm, &pose)) / (2.0 * h);
            assert!((fd - g.betas[k]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn bind_on_vertex_reproduces_its_weights() {
        let t = chain_template();
        let binding = bind_weights(&[t.vertices[6]], &t.vertices, &t.weights, 5).unwrap();
        let mut dense = [0.0; 3];
        for (j, w) in binding.row(0) {
            dense[j] += w;
        }
        for (j, w) in t.weights.row(6) {
            dense[j] -= w;
        }
        assert!(dense.iter().all(|d| d.abs() < 1e-3), "{dense:?}");
        assert!(bind_weights(&[Vec3::zeros()], &t.vertices, &t.weights, 13).is_err());
    }

    #[test]
    fn skinning_backward_matches_finite_differences() {
        let t = chain_template();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..6).map(|_| Vec3::new(rng.random_range(0.0..1.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).collect();
        let rots: Vec<Mat3> = (0..6).map(|_| rodrigues(&Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0)))).collect();
        let binding = bind_weights(&pts, &t.vertices, &t.weights, 4).unwrap();
        let pose = random_pose(&mut rng, 3, 0.7);
        let betas = vec![0.2, 0.5];
        let gp: Vec<Vec3> = (0..6).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let gr: Vec<Mat3> = (0..6).map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let loss = |pose: &Pose, pts: &[Vec3]| {
            let bones = bone_transforms(&t, &betas, pose).unwrap();
            let posed = skin_surfels(pts, &rots, &binding, &bones);
            (0..6).map(|i| posed.positions[i].dot(&gp[i]) + posed.rotations[i].component_mul(&gr[i]).sum()).sum::<f64>()
        };
        let bones = bone_transforms(&t, &betas, &pose).unwrap();
        let sg = skin_surfels_backward(&pts, &rots, &binding, &bones, &gp, &gr, true);
        let pg = bones.backward(&t, &sg.bones);
        let h = 1e-5;
        let x = pose.to_vec();
        for i in 0..9 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&Pose::from_slice(&xp), &pts) - loss(&Pose::from_slice(&xm), &pts)) / (2.0 * h);
            let an = pg.axis_angles[i / 3][i % 3];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-2), "theta {i}: {fd} vs {an}");
        }
        for i in 0..6 {
            for d in 0..3 {
                let mut e = Vec3::zeros();
                e[d] = h;
                let mut pp = pts.clone();
                pp[i] += e;
                let mut pm = pts.clone();
                pm[i] -= e;
                let fd = (loss(&pose, &pp) - loss(&pose, &pm)) / (2.0 * h);
                assert!((fd - sg.positions[i][d]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn keypoint_backward_matches_finite_differences() {
        let t = chain_template();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pose = random_pose(&mut rng, 3, 0.6);
        let betas = vec![-0.3, 0.8];
        let gk: Vec<Vec3> = (0..4).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let loss = |betas: &[f64], pose: &Pose| {
            let bones = bone_transforms(&t, betas, pose).unwrap();
            regress_keypoints_3d(&t, betas, &bones).iter().zip(&gk).map(|(k, g)| k.dot(g)).sum::<f64>()
        };
        let bones = bone_transforms(&t, &betas, &pose).unwrap();
        let (bg, direct) = regress_keypoints_3d_backward(&t, &betas, &bones, &gk);
        let mut pg = bones.backward(&t, &bg);
        for (a, b) in pg.betas.iter_mut().zip(direct) {
            *a += b;
        }
        let h = 1e-6;
        for k in 0..2 {
            let (mut bp, mut bm) = (betas.clone(), betas.clone());
            bp[k] += h;
            bm[k] -= h;
            let fd = (loss(&bp, &pose) - loss(&bm, &pose)) / (2.0 * h);
            assert!((fd - pg.betas[k]).abs() < 1e-6 * (1.0 + fd.abs()), "beta {k}: {fd} vs {}", pg.betas[k]);
        }
        let x = pose.to_vec();
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&betas, &Pose::from_slice(&xp)) - loss(&betas, &Pose::from_slice(&xm))) / (2.0 * h);
            let an = if i < 9 { pg.axis_angles[i / 3][i % 3] } else { pg.translation[i - 9] };
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn keypoint_projection_examples() {
        let mut t = chain_template();
        t.vertices[0] = Vec3::new(0.0, 0.0, 2.0);
        t.weights = SparseRows::from_rows((0..12).map(|_| vec![(0u32, 1.0)]));
        t.regressor = SparseRows::from_rows([vec![(0u32, 1.0)]]);
        let cam = Camera::new(
            Mat3::new(1000.0, 0.0, 500.0, 0.0, 1000.0, 500.0, 0.0, 0.0, 1.0),
            Mat3::identity(),
            Vec3::zeros(),
            1000,
            1000,
        )
        .unwrap();
        let betas = vec![0.0, 0.0];
        let kp = regress_keypoints(&t, &betas, &Pose::rest(3), &cam).unwrap();
        let (u, v) = kp[0].unwrap();
        assert!((u - 500.0).abs() < 1e-9 && (v - 500.0).abs() < 1e-9);
        let mut pose = Pose::rest(3);
        pose.translation = Vec3::new(0.1, 0.0, 0.0);
        let (u2, _) = regress_keypoints(&t, &betas, &pose, &cam).unwrap()[0].unwrap();
        assert!((u2 - 550.0).abs() < 1e-9);
        pose.translation = Vec3::new(0.0, 0.0, -3.0);
        assert!(regress_keypoints(&t, &betas, &pose, &cam).unwrap()[0].is_none());
    }

    #[test]
    fn root_keypoint_ignores_arm_rotation() {
        let t = chain_template();
        let betas = vec![0.1, 0.1];
        let bones0 = bone_transforms(&t, &betas, &Pose::rest(3)).unwrap();
        let mut pose = Pose::rest(3);
        pose.axis_angles[2] = Vec3::new(0.5, 0.3, -0.2);
        let bones1 = bone_transforms(&t, &betas, &pose).unwrap();
        // Keypoint 0 sits on a vertex driven only by the root joint.
        let a = regress_keypoints_3d(&t, &betas, &bones0)[0];
        let b = regress_keypoints_3d(&t, &betas, &bones1)[0];
        assert_eq!(a, b);
        assert!(rodrigues_log(&bones1.rotations[2]).norm() > 0.1);
    }
}

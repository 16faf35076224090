//! Canonical surfel cloud: explicit positions, orientations and occlusion,
//! with scale and color read through the neural field.

use serde::{Deserialize, Serialize};

use crate::articulation::{bind_weights, BodyTemplate, Binding};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldSample, NeuralField};
use crate::math::{quat_from_matrix, softplus_inverse, tangent_frame, Mat3, Quat, Vec3};
use crate::mesh::TriMesh;
use crate::optim::{Adam, AdamConfig};
use crate::spatial::KdTree;

pub const MAX_SUBDIVISIONS: usize = 3;
pub const CURVATURE_NEIGHBORS: usize = 5;
const MIN_SCALE_LABEL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfelCloud {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub occlusion: Vec<f64>,
    pub field: NeuralField,
    pub binding: Option<Binding>,
    /// Positions at initialization, anchoring the offset regularizer.
    pub init_positions: Vec<Vec3>,
    /// 3-NN scale labels, anchoring the scale regularizer.
    pub scale_labels: Vec<f64>,
    /// Canonical 5-NN graph cached at initialization for the curvature term.
    pub neighbors: Vec<[u32; CURVATURE_NEIGHBORS]>,
}

impl SurfelCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn rotation_matrices(&self) -> Vec<Mat3> {
        self.rotations.iter().map(|q| q.to_rotation_matrix().into_inner()).collect()
    }

    /// Canonical normal readout: third column of `R₀`.
    pub fn normal(&self, i: usize) -> Vec3 {
        self.rotations[i].to_rotation_matrix().matrix().column(2).into_owned()
    }

    /// Scale and color of every surfel, evaluated through the field.
    pub fn attributes(&self) -> Vec<FieldSample> {
        self.field.query_batch(&self.positions)
    }

    pub fn binding(&self) -> Result<&Binding> {
        self.binding
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("surfel cloud has no skinning binding".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [self.rotations.len(), self.occlusion.len(), self.init_positions.len(), self.scale_labels.len(), self.neighbors.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Dimension(format!("surfel arrays have inconsistent lengths: {n} positions vs {lens:?}")));
        }
        if let Some(b) = &self.binding {
            if b.rows() != n {
                return Err(Error::Dimension(format!("binding has {} rows for {n} surfels", b.rows())));
            }
        }
        Ok(())
    }
}

/// Mean distance from each point to its three nearest other points; zero
/// means (duplicates) are clamped to 1e-6 with a warning.
pub fn initial_scale_labels(points: &[Vec3]) -> Result<Vec<f64>> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 points for 3-NN scale labels, got {}", points.len())));
    }
    Ok(scale_labels_k(points, 3))
}

fn scale_labels_k(points: &[Vec3], k: usize) -> Vec<f64> {
    let tree = KdTree::build(points);
    let mut clamped = 0usize;
    let labels = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.knn(p, k, Some(i));
            let mean = nn.iter().map(|n| n.dist_sq.sqrt()).sum::<f64>() / k as f64;
            if mean < MIN_SCALE_LABEL {
                clamped += 1;
                MIN_SCALE_LABEL
            } else {
                mean
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} scale labels collapsed to duplicates and were clamped to {MIN_SCALE_LABEL}");
    }
    labels
}

fn knn_graph(points: &[Vec3]) -> Vec<[u32; CURVATURE_NEIGHBORS]> {
    let tree = KdTree::build(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.knn(p, CURVATURE_NEIGHBORS, Some(i));
            let mut out = [i as u32; CURVATURE_NEIGHBORS];
            for (slot, n) in out.iter_mut().zip(nn) {
                *slot = n.index as u32;
            }
            out
        })
        .collect()
}

/// Surfels at the vertices of `mesh` after `subdivisions` rounds of midpoint
/// subdivision, oriented by the area-weighted vertex normals.
pub fn init_from_mesh(mesh: &TriMesh, subdivisions: usize, field: FieldConfig, seed: u64) -> Result<SurfelCloud> {
    if subdivisions > MAX_SUBDIVISIONS {
        return Err(Error::InvalidArgument(format!("{subdivisions} subdivisions requested, at most {MAX_SUBDIVISIONS} allowed")));
    }
    mesh.validate()?;
    let mut mesh = mesh.clone();
    for _ in 0..subdivisions {
        mesh = mesh.subdivide_midpoint();
    }
    let normals = mesh.vertex_normals();
    SurfelCloud::from_oriented_points(mesh.vertices, &normals, field, seed)
}

impl SurfelCloud {
    /// Surfels at `positions` with normals `normals`, τ = 1, an unbound
    /// field over the point bounds and fresh scale labels and neighbors.
    pub fn from_oriented_points(positions: Vec<Vec3>, normals: &[Vec3], field: FieldConfig, seed: u64) -> Result<SurfelCloud> {
        if normals.len() != positions.len() {
            return Err(Error::Dimension(format!("{} points but {} normals", positions.len(), normals.len())));
        }
        let rotations = normals.iter().map(|n| quat_from_matrix(&tangent_frame(n))).collect();
        // Clouds with fewer than four points fall back to all other points.
        let scale_labels = match positions.len() {
            0 | 1 => return Err(Error::Mesh("need at least two surfels".into())),
            n => scale_labels_k(&positions, 3.min(n - 1)),
        };
        let (lo, hi) = mesh_bounds(&positions);
        let n = positions.len();
        Ok(SurfelCloud {
            neighbors: knn_graph(&positions),
            init_positions: positions.clone(),
            positions,
            rotations,
            occlusion: vec![1.0; n],
            field: NeuralField::new(field, lo, hi, seed),
            binding: None,
            scale_labels,
        })
    }
}

fn mesh_bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    points
        .iter()
        .fold((Vec3::repeat(f64::MAX), Vec3::repeat(f64::MIN)), |(lo, hi), p| (lo.inf(p), hi.sup(p)))
}

/// Initialize from the shaped template and bind to its skinning weights.
pub fn init_from_template(
    template: &BodyTemplate,
    betas: &[f64],
    subdivisions: usize,
    field: FieldConfig,
    bind_neighbors: usize,
    seed: u64,
) -> Result<SurfelCloud> {
    let mesh = template.shaped_mesh(betas)?;
    let mut cloud = init_from_mesh(&mesh, subdivisions, field, seed)?;
    cloud.binding = Some(bind_weights(&cloud.positions, &mesh.vertices, &template.weights, bind_neighbors)?);
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 1000, lr: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub mean_relative_error: f64,
}

pub fn mean_relative_error(field: &NeuralField, positions: &[Vec3], labels: &[f64]) -> f64 {
    let pred = field.query_batch(positions);
    pred.iter().zip(labels).map(|(p, l)| ((p.scale - l) / l).abs()).sum::<f64>() / labels.len().max(1) as f64
}

/// Fit the scale head to the labels under a mean squared relative error.
/// The scale output bias is first set to match the mean label.
pub fn pretrain_field(field: &mut NeuralField, positions: &[Vec3], labels: &[f64], config: &PretrainConfig) -> Result<PretrainReport> {
    if positions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension(format!("{} positions vs {} labels", positions.len(), labels.len())));
    }
    let mut losses = Vec::with_capacity(config.steps);
    if config.steps == 0 {
        return Ok(PretrainReport { losses, mean_relative_error: mean_relative_error(field, positions, labels) });
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let bias = field.scale_output_bias();
    field.params[bias] = softplus_inverse(mean);

    let n = labels.len() as f64;
    let zero_color = vec![Vec3::zeros(); labels.len()];
    let mut adam = Adam::new(field.num_params(), AdamConfig::default());
    let mut rising = 0usize;
    for step in 0..config.steps {
        let pred = field.query_batch(positions);
        let mut loss = 0.0;
        let d_scale: Vec<f64> = pred
            .iter()
            .zip(labels)
            .map(|(p, l)| {
                let r = p.scale / l - 1.0;
                loss += r * r / n;
                2.0 * r / (l * n)
            })
            .collect();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("field pretraining produced a non-finite loss at step {step}")));
        }
        if losses.last().is_some_and(|&prev| loss > prev) {
            rising += 1;
            if rising >= 100 {
                return Err(Error::Numerical(format!("field pretraining diverged: loss rose for 100 consecutive steps (step {step}, loss {loss})")));
            }
        } else {
            rising = 0;
        }
        losses.push(loss);
        let (grad, _) = field.backward_batch(positions, &d_scale, &zero_color);
        adam.step(&mut field.params, &grad, config.lr);
    }
    Ok(PretrainReport { losses, mean_relative_error: mean_relative_error(field, positions, labels) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;
    use crate::spatial::knn_brute_force;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_triangle_normals_match_face() {
        let cloud = init_from_mesh(&shapes::unit_triangle(), 0, FieldConfig::small(), 0).unwrap();
        assert_eq!(cloud.len(), 3);
        for i in 0..3 {
            assert!((cloud.normal(i) - Vec3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn icosahedron_subdivision_is_outward() {
        let ico = shapes::icosahedron(1.0);
        let cloud = init_from_mesh(&ico, 1, FieldConfig::small(), 0).unwrap();
        assert_eq!(cloud.len(), 42);
        for i in 0..cloud.len() {
            assert!(cloud.positions[i].dot(&cloud.normal(i)) > 0.0);
            assert!((cloud.normal(i).norm() - 1.0).abs() < 1e-6);
            assert_eq!(cloud.occlusion[i], 1.0);
        }
        assert!(init_from_mesh(&ico, 4, FieldConfig::small(), 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let ico = shapes::icosahedron(1.0);
        let a = init_from_mesh(&ico, 2, FieldConfig::small(), 7).unwrap();
        let b = init_from_mesh(&ico, 2, FieldConfig::small(), 7).unwrap();
        assert_eq!(bincode::serialize(&a).unwrap(), bincode::serialize(&b).unwrap());
    }

    #[test]
    fn scale_label_examples() {
        let k = 1.0 / (2.0 * 2f64.sqrt());
        let tetra: Vec<Vec3> = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
            .iter()
            .map(|p| Vec3::new(p[0], p[1], p[2]) * k)
            .collect();
        for l in initial_scale_labels(&tetra).unwrap() {
            assert!((l - 1.0).abs() < 1e-12, "{l}");
        }
        let line: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!((initial_scale_labels(&line).unwrap()[0] - 2.0).abs() < 1e-12);
        let dup = vec![Vec3::zeros(); 5];
        assert!(initial_scale_labels(&dup).unwrap().iter().all(|&l| l == 1e-6));
    }

    #[test]
    fn scale_labels_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..1000).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let labels = initial_scale_labels(&pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let nn = knn_brute_force(&pts, p, 3, Some(i));
            let oracle = nn.iter().map(|n| n.dist_sq.sqrt()).sum::<f64>() / 3.0;
            assert_eq!(labels[i], oracle);
        }
    }

    #[test]
    fn pretrain_constant_and_icosahedron_labels() {
        let cloud = init_from_mesh(&shapes::icosahedron(1.0), 1, FieldConfig::small(), 1).unwrap();
        let mut field = cloud.field.clone();
        let constant = vec![0.01; cloud.len()];
        let report = pretrain_field(&mut field, &cloud.positions, &constant, &PretrainConfig { steps: 200, lr: 1e-2 }).unwrap();
        assert!(report.mean_relative_error < 0.05);
        for p in field.query_batch(&cloud.positions) {
            assert!((p.scale / 0.01 - 1.0).abs() < 0.05);
        }

        let mut field = cloud.field.clone();
        let report = pretrain_field(&mut field, &cloud.positions, &cloud.scale_labels, &PretrainConfig { steps: 300, lr: 1e-2 }).unwrap();
        assert!(report.mean_relative_error < 0.05, "{}", report.mean_relative_error);

        let mut field = cloud.field.clone();
        pretrain_field(&mut field, &cloud.positions, &cloud.scale_labels, &PretrainConfig { steps: 0, lr: 1e-2 }).unwrap();
        assert_eq!(field, cloud.field);
    }
}

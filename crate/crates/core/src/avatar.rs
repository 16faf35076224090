//! End-to-end posing of a surfel cloud (field query + skinning) and the
//! matching backward pass to canonical parameters and pose.

use crate::articulation::{skin_surfels, skin_surfels_backward, BoneGrad, BoneTransforms};
use crate::error::Result;
use crate::field::FieldSample;
use crate::math::{rotation_tangent_grad, Mat3, Vec3};
use crate::raster::{SplatGrads, Splats};
use crate::surfel::SurfelCloud;

/// A cloud posed by one set of bone transforms.
#[derive(Debug, Clone)]
pub struct PosedAvatar {
    pub splats: Splats,
    pub attributes: Vec<FieldSample>,
    canonical_rotations: Vec<Mat3>,
}

/// Gradients with respect to the cloud's trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrad {
    pub positions: Vec<Vec3>,
    /// Right-multiplied tangent gradients of `R₀`.
    pub rotations: Vec<Vec3>,
    pub field: Vec<f64>,
    pub occlusion: Vec<f64>,
}

impl CloudGrad {
    pub fn zeros(cloud: &SurfelCloud) -> Self {
        let n = cloud.len();
        CloudGrad {
            positions: vec![Vec3::zeros(); n],
            rotations: vec![Vec3::zeros(); n],
            field: vec![0.0; cloud.field.num_params()],
            occlusion: vec![0.0; n],
        }
    }

    pub fn add(&mut self, o: &CloudGrad) {
        for (a, b) in self.positions.iter_mut().zip(&o.positions) {
            *a += b;
        }
        for (a, b) in self.rotations.iter_mut().zip(&o.rotations) {
            *a += b;
        }
        for (a, b) in self.field.iter_mut().zip(&o.field) {
            *a += b;
        }
        for (a, b) in self.occlusion.iter_mut().zip(&o.occlusion) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.field.iter().all(|x| x.is_finite())
    }
}

impl PosedAvatar {
    pub fn new(cloud: &SurfelCloud, bones: &BoneTransforms) -> Result<Self> {
        cloud.validate()?;
        let canonical_rotations = cloud.rotation_matrices();
        let posed = skin_surfels(&cloud.positions, &canonical_rotations, cloud.binding()?, bones);
        let attributes = cloud.attributes();
        let splats = Splats {
            positions: posed.positions,
            rotations: posed.rotations,
            scales: attributes.iter().map(|a| a.scale).collect(),
            colors: attributes.iter().map(|a| a.color).collect(),
            occlusion: cloud.occlusion.clone(),
        };
        Ok(PosedAvatar { splats, attributes, canonical_rotations })
    }

    /// Chain splat gradients back through skinning and the field. Bone
    /// gradients are returned when `want_bones` is set.
    pub fn backward(&self, cloud: &SurfelCloud, bones: &BoneTransforms, grads: &SplatGrads, want_bones: bool) -> Result<(CloudGrad, Option<BoneGrad>)> {
        let skin = skin_surfels_backward(
            &cloud.positions,
            &self.canonical_rotations,
            cloud.binding()?,
            bones,
            &grads.positions,
            &grads.rotations,
            want_bones,
        );
        let (field, field_dx) = cloud.field.backward_batch(&cloud.positions, &grads.scales, &grads.colors);
        let positions = skin.positions.iter().zip(&field_dx).map(|(a, b)| a + b).collect();
        let rotations = self
            .canonical_rotations
            .iter()
            .zip(&skin.rotations)
            .map(|(r, g)| rotation_tangent_grad(r, g))
            .collect();
        Ok((
            CloudGrad { positions, rotations, field, occlusion: grads.occlusion.clone() },
            want_bones.then_some(skin.bones),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::articulation::{bind_weights, bone_transforms, Pose};
    use crate::camera::Camera;
    use crate::field::FieldConfig;
    use crate::image::Image;
    use crate::math::retract;
    use crate::raster::{render, render_backward, ChannelGrads, RenderRequest};
    use crate::shapes;
    use crate::articulation::tests::chain_template;
    use crate::surfel::init_from_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_through_field_skinning_and_render() {
        let template = chain_template();
        let mesh = shapes::icosahedron(0.3);
        let mut cloud = init_from_mesh(&mesh, 0, FieldConfig::small(), 2).unwrap();
        for p in &mut cloud.positions {
            *p += Vec3::new(0.5, 0.0, 0.0);
        }
        cloud.binding = Some(bind_weights(&cloud.positions, &template.vertices, &template.weights, 4).unwrap());
        let bias = cloud.field.scale_output_bias();
        cloud.field.params[bias] = crate::math::softplus_inverse(0.12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pose = Pose::rest(3);
        pose.axis_angles[1] = Vec3::new(0.1, 0.2, -0.1);
        let betas = vec![0.1, -0.2];
        let cam = Camera::look_at(Vec3::new(0.5, 0.0, 2.5), Vec3::new(0.5, 0.0, 0.0), Vec3::y(), 50.0, 32, 32);
        let req = RenderRequest::front();
        let out0 = render(&PosedAvatar::new(&cloud, &bone_transforms(&template, &betas, &pose).unwrap()).unwrap().splats, &cam, &req).unwrap();
        let w_rgb = Image::from_fn(32, 32, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let w_mask = Image::from_fn(32, 32, 1, |_, _, _| rng.random_range(-1.0..1.0));
        let loss = |cloud: &SurfelCloud, pose: &Pose| {
            let bones = bone_transforms(&template, &betas, pose).unwrap();
            let out = render(&PosedAvatar::new(cloud, &bones).unwrap().splats, &cam, &req).unwrap();
            let a: f64 = out.rgb.unwrap().data.iter().zip(&w_rgb.data).map(|(x, y)| x * y).sum();
            let b: f64 = out.mask.unwrap().data.iter().zip(&w_mask.data).map(|(x, y)| x * y).sum();
            a + b
        };
        assert!(out0.opacity.data.iter().any(|&o| o > 0.5));

        let bones = bone_transforms(&template, &betas, &pose).unwrap();
        let avatar = PosedAvatar::new(&cloud, &bones).unwrap();
        let out = render(&avatar.splats, &cam, &req).unwrap();
        let sg = render_backward(&out, &ChannelGrads { rgb: Some(w_rgb.clone()), mask: Some(w_mask.clone()), ..Default::default() }).unwrap();
        let (cg, bg) = avatar.backward(&cloud, &bones, &sg, true).unwrap();
        let pg = bones.backward(&template, &bg.unwrap());

        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        // Field parameters: output biases and a few touched table entries.
        let n_params = cloud.field.num_params();
        for i in [n_params - 1, n_params - 2, bias, bias - 1] {
            let (mut cp, mut cm) = (cloud.clone(), cloud.clone());
            cp.field.params[i] += h;
            cm.field.params[i] -= h;
            let fd = (loss(&cp, &pose) - loss(&cm, &pose)) / (2.0 * h);
            assert!(rel(fd, cg.field[i]) < 1e-3, "field {i}: {fd} vs {}", cg.field[i]);
        }
        // Rotation tangents.
        for i in 0..cloud.len() {
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let (mut cp, mut cm) = (cloud.clone(), cloud.clone());
                cp.rotations[i] = retract(&cloud.rotations[i], &e);
                cm.rotations[i] = retract(&cloud.rotations[i], &(-e));
                let fd = (loss(&cp, &pose) - loss(&cm, &pose)) / (2.0 * h);
                assert!(rel(fd, cg.rotations[i][k]) < 1e-3, "rot {i},{k}: {fd} vs {}", cg.rotations[i][k]);
            }
        }
        // Positions.
        for i in 0..cloud.len() {
            for k in 0..3 {
                let (mut cp, mut cm) = (cloud.clone(), cloud.clone());
                cp.positions[i][k] += h;
                cm.positions[i][k] -= h;
                let fd = (loss(&cp, &pose) - loss(&cm, &pose)) / (2.0 * h);
                assert!(rel(fd, cg.positions[i][k]) < 1e-2, "pos {i},{k}: {fd} vs {}", cg.positions[i][k]);
            }
        }
        // Pose.
        let x = pose.to_vec();
        for i in 0..9 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&cloud, &Pose::from_slice(&xp)) - loss(&cloud, &Pose::from_slice(&xm))) / (2.0 * h);
            let an = pg.axis_angles[i / 3][i % 3];
            assert!(rel(fd, an) < 1e-3, "theta {i}: {fd} vs {an}");
        }
    }

}

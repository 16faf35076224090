//! In-memory observations of a subject: per-frame images, keypoints,
//! cameras, and the shared shape plus per-frame poses.

use serde::{Deserialize, Serialize};

use crate::articulation::{bone_transforms, BodyTemplate, BoneTransforms, Pose};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// One observed frame. Normal maps are camera-space, unit length on valid
/// pixels and zero elsewhere.
#[derive(Debug, Clone)]
pub struct Frame {
    pub camera: Camera,
    pub rgb: Image,
    pub mask: Image,
    pub normal: Option<Image>,
    pub back_normal: Option<Image>,
    pub keypoints: Vec<Keypoint>,
}

impl Frame {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.camera.width, self.camera.height);
        let check = |name: &str, img: &Image, c: usize| {
            if img.width != w || img.height != h || img.channels != c {
                Err(Error::Dimension(format!(
                    "{name} is {}x{}x{}, camera expects {w}x{h}x{c}",
                    img.width, img.height, img.channels
                )))
            } else {
                Ok(())
            }
        };
        check("rgb", &self.rgb, 3)?;
        check("mask", &self.mask, 1)?;
        if let Some(n) = &self.normal {
            check("normal", n, 3)?;
        }
        if let Some(n) = &self.back_normal {
            check("back normal", n, 3)?;
        }
        Ok(())
    }
}

/// Pixels of a normal map that carry a direction.
pub fn normal_validity(normal: &Image) -> Image {
    let data = normal
        .data
        .chunks(3)
        .map(|p| if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > 0.25 { 1.0 } else { 0.0 })
        .collect();
    Image::from_data(normal.width, normal.height, 1, data).expect("pixel count matches")
}

/// Shared shape `β` and per-frame poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub betas: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl PoseSequence {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn bones(&self, template: &BodyTemplate, t: usize) -> Result<BoneTransforms> {
        let pose = self.poses.get(t).ok_or_else(|| Error::InvalidArgument(format!("frame {t} out of range ({} poses)", self.poses.len())))?;
        bone_transforms(template, &self.betas, pose)
    }

    /// Flatten to `[β, θ_0, b_0, θ_1, b_1, …]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.betas.clone();
        for p in &self.poses {
            out.extend(p.to_vec());
        }
        out
    }

    pub fn from_slice(values: &[f64], betas: usize, joints: usize) -> Self {
        let per = 3 * joints + 3;
        PoseSequence {
            betas: values[..betas].to_vec(),
            poses: values[betas..].chunks(per).map(Pose::from_slice).collect(),
        }
    }
}

//! Pinhole cameras (OpenCV convention: x right, y down, z forward).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

/// Intrinsics `K` (pixels), world→camera extrinsics `[R | t]`, image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: Mat3, rotation: Mat3, translation: Vec3, width: usize, height: usize) -> Result<Self> {
        let cam = Camera { intrinsics, rotation, translation, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        let intrinsics = Mat3::new(
            focal,
            0.0,
            width as f64 * 0.5,
            0.0,
            focal,
            height as f64 * 0.5,
            0.0,
            0.0,
            1.0,
        );
        Camera { intrinsics, rotation, translation, width, height }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidArgument("intrinsics must be upper triangular with K[2][2] = 1".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        let r = &self.rotation;
        if (r.transpose() * r - Mat3::identity()).norm() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("extrinsic rotation is not orthonormal".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image has zero area".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    #[inline]
    pub fn focal_min(&self) -> f64 {
        self.intrinsics[(0, 0)].min(self.intrinsics[(1, 1)])
    }

    /// Project a camera-space point; `None` when it is not in front of the camera.
    #[inline]
    pub fn project_camera(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 1e-9 {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k[(0, 0)] * p.x + k[(0, 1)] * p.y) / p.z + k[(0, 2)];
        let v = k[(1, 1)] * p.y / p.z + k[(1, 2)];
        Some((u, v))
    }

    /// Jacobian of [`Camera::project_camera`] as two rows `(du/dp, dv/dp)`.
    pub fn project_camera_jacobian(&self, p: &Vec3) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let iz = 1.0 / p.z;
        let du = Vec3::new(k[(0, 0)] * iz, k[(0, 1)] * iz, -(k[(0, 0)] * p.x + k[(0, 1)] * p.y) * iz * iz);
        let dv = Vec3::new(0.0, k[(1, 1)] * iz, -k[(1, 1)] * p.y * iz * iz);
        (du, dv)
    }

    pub fn project(&self, x: &Vec3) -> Option<(f64, f64)> {
        self.project_camera(&self.to_camera(x))
    }

    /// Camera-space ray direction through pixel coordinates `(u, v)`, scaled to `z = 1`.
    #[inline]
    pub fn ray_dir(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Vec3::new(x, y, 1.0)
    }

    /// Same intrinsics, new pose.
    pub fn with_pose(&self, rotation: Mat3, translation: Vec3) -> Camera {
        Camera { rotation, translation, ..self.clone() }
    }

    /// Camera orbiting `target` at `radius` with azimuth about world +y and
    /// elevation above the horizontal plane (radians). Azimuth 0 sits on +z.
    pub fn orbit(&self, target: Vec3, radius: f64, azimuth: f64, elevation: f64) -> Camera {
        let dir = Vec3::new(
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
            elevation.cos() * azimuth.cos(),
        );
        let eye = target + dir * radius;
        let look = Camera::look_at(eye, target, Vec3::y(), 1.0, self.width, self.height);
        self.with_pose(look.rotation, look.translation)
    }
}

//! Ray–surfel intersection and its derivatives.

use crate::camera::Camera;
use crate::math::{Mat3, Vec3};

pub const ALPHA_MAX: f64 = 0.999;
pub const MIN_WEIGHT: f64 = 1.0 / 255.0;
pub const NEAR_PLANE: f64 = 0.01;
pub const EDGE_ON_EPS: f64 = 1e-8;

/// Disk radius, in units of the Gaussian width, beyond which `G < 1/255`.
pub fn cutoff_radius() -> f64 {
    (2.0 * 255f64.ln()).sqrt()
}

/// Squared cutoff radius (2 ln 255) rounded up; hits beyond it are
/// rejected before the exponential is taken.
const CUTOFF_SQ: f64 = 11.0825271;

/// A surfel in camera space with its effective Gaussian width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamSurfel {
    pub center: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub normal: Vec3,
    pub sigma: f64,
    /// True when the one-pixel footprint floor sets `sigma` instead of the scale.
    pub floored: bool,
}

impl CamSurfel {
    /// `rotation` is the camera-space orientation `R_c R_t`.
    pub fn new(center: Vec3, rotation: &Mat3, scale: f64, focal_min: f64) -> Self {
        let floor = center.z / focal_min;
        let (sigma, floored) = if scale >= floor { (scale, false) } else { (floor, true) };
        CamSurfel {
            center,
            tangent_u: rotation.column(0).into_owned(),
            tangent_v: rotation.column(1).into_owned(),
            normal: rotation.column(2).into_owned(),
            sigma,
            floored,
        }
    }

    pub fn from_world(camera: &Camera, position: &Vec3, rotation: &Mat3, scale: f64) -> Self {
        CamSurfel::new(camera.to_camera(position), &(camera.rotation * rotation), scale, camera.focal_min())
    }

    /// Faces away from a camera at the origin.
    #[inline]
    pub fn back_facing(&self) -> bool {
        self.normal.dot(&self.center) >= 0.0
    }
}

/// One accepted ray–surfel intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub alpha: f64,
    pub weight: f64,
    /// Camera-space depth of the intersection (the ray parameter for `d_z = 1`).
    pub depth: f64,
    /// Intersection point minus surfel center.
    pub offset: Vec3,
    pub local: (f64, f64),
    pub denom: f64,
}

/// Intersect the camera ray `dir` (with `dir.z = 1`) with the surfel plane.
#[inline]
pub fn intersect(s: &CamSurfel, dir: &Vec3) -> Option<Hit> {
    let denom = s.normal.dot(dir);
    if denom.abs() < EDGE_ON_EPS {
        return None;
    }
    let depth = s.normal.dot(&s.center) / denom;
    if depth < NEAR_PLANE {
        return None;
    }
    let offset = dir * depth - s.center;
    let local = (s.tangent_u.dot(&offset), s.tangent_v.dot(&offset));
    let rho = local.0 * local.0 + local.1 * local.1;
    if rho > CUTOFF_SQ * s.sigma * s.sigma {
        return None;
    }
    let weight = (-rho / (2.0 * s.sigma * s.sigma)).exp();
    if weight < MIN_WEIGHT {
        return None;
    }
    Some(Hit { alpha: weight.min(ALPHA_MAX), weight, depth, offset, local, denom })
}

/// α and intersection depth for one surfel (world state) and pixel.
pub fn splat_weight(camera: &Camera, position: &Vec3, rotation: &Mat3, scale: f64, pixel: (f64, f64)) -> Option<(f64, f64)> {
    let s = CamSurfel::from_world(camera, position, rotation, scale);
    intersect(&s, &camera.ray_dir(pixel.0, pixel.1)).map(|h| (h.alpha, h.depth))
}

/// Gradient of a scalar with respect to a camera-space surfel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CamSurfelGrad {
    pub center: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub normal: Vec3,
    pub scale: f64,
}

impl std::ops::AddAssign for CamSurfelGrad {
    fn add_assign(&mut self, o: Self) {
        self.center += o.center;
        self.tangent_u += o.tangent_u;
        self.tangent_v += o.tangent_v;
        self.normal += o.normal;
        self.scale += o.scale;
    }
}

impl CamSurfelGrad {
    pub fn rotation(&self) -> Mat3 {
        Mat3::from_columns(&[self.tangent_u, self.tangent_v, self.normal])
    }
}

/// Chain `dL/dα` and `dL/d depth` of one hit back to the surfel.
#[inline]
pub fn intersect_backward(s: &CamSurfel, f_min: f64, dir: &Vec3, hit: &Hit, d_alpha: f64, d_depth: f64, g: &mut CamSurfelGrad) {
    let d_weight = if hit.weight > ALPHA_MAX { 0.0 } else { d_alpha };
    let sigma2 = s.sigma * s.sigma;
    let rho = hit.local.0 * hit.local.0 + hit.local.1 * hit.local.1;
    let d_rho = -hit.weight / (2.0 * sigma2) * d_weight;
    let d_sigma = hit.weight * rho / (sigma2 * s.sigma) * d_weight;
    let (du, dv) = (2.0 * hit.local.0 * d_rho, 2.0 * hit.local.1 * d_rho);
    g.tangent_u += hit.offset * du;
    g.tangent_v += hit.offset * dv;
    let d_offset = s.tangent_u * du + s.tangent_v * dv;
    let d_depth_total = d_depth + d_offset.dot(dir);
    g.center += s.normal * (d_depth_total / hit.denom) - d_offset;
    g.normal -= hit.offset * (d_depth_total / hit.denom);
    if s.floored {
        g.center.z += d_sigma / f_min;
    } else {
        g.scale += d_sigma;
    }
}

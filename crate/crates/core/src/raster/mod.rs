//! Differentiable tile-based surfel splatting.

mod composite;
mod render;
mod splat;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

pub use composite::{composite_pixel, MIN_TRANSMITTANCE};
pub use render::{render, render_backward, ChannelGrads, RenderOutput, SplatGrads, TILE_SIZE};
pub use splat::{
    cutoff_radius, intersect, intersect_backward, splat_weight, CamSurfel, CamSurfelGrad, Hit, ALPHA_MAX, EDGE_ON_EPS, MIN_WEIGHT, NEAR_PLANE,
};

/// Which images a render produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Channels {
    pub rgb: bool,
    pub mask: bool,
    pub depth: bool,
    pub normal: bool,
    pub back_normal: bool,
    pub occlusion: bool,
}

impl Channels {
    pub fn all_front() -> Self {
        Channels { rgb: true, mask: true, depth: true, normal: true, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthOrder {
    Ascending,
    Descending,
}

/// Value composited behind the last hit, per channel. The mask background is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub rgb: Vec3,
    pub depth: f64,
    pub normal: Vec3,
    pub back_normal: Vec3,
    pub occlusion: f64,
}

impl Default for Background {
    fn default() -> Self {
        Background { rgb: Vec3::zeros(), depth: 0.0, normal: Vec3::zeros(), back_normal: Vec3::zeros(), occlusion: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub channels: Channels,
    pub order: DepthOrder,
    pub cull_back_faces: bool,
    pub background: Background,
}

impl RenderRequest {
    /// RGB, mask, depth and front normals, nearest first.
    pub fn front() -> Self {
        RenderRequest {
            channels: Channels::all_front(),
            order: DepthOrder::Ascending,
            cull_back_faces: false,
            background: Background::default(),
        }
    }

    /// Back normals, farthest first.
    pub fn back_normal() -> Self {
        RenderRequest {
            channels: Channels { back_normal: true, ..Default::default() },
            order: DepthOrder::Descending,
            cull_back_faces: false,
            background: Background::default(),
        }
    }

    /// Occlusion (payload τ) and mask with back-face culling.
    pub fn occlusion() -> Self {
        RenderRequest {
            channels: Channels { occlusion: true, mask: true, ..Default::default() },
            order: DepthOrder::Ascending,
            cull_back_faces: true,
            background: Background::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.back_normal && self.order != DepthOrder::Descending {
            return Err(Error::InvalidArgument("back_normal rendering requires descending depth order".into()));
        }
        if self.channels.occlusion && !self.cull_back_faces {
            return Err(Error::InvalidArgument("occlusion rendering requires back-face culling".into()));
        }
        Ok(())
    }
}

/// Offsets of each requested channel inside a per-surfel payload vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layout {
    pub rgb: Option<usize>,
    pub mask: Option<usize>,
    pub depth: Option<usize>,
    pub normal: Option<usize>,
    pub back_normal: Option<usize>,
    pub occlusion: Option<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(c: &Channels) -> Self {
        let mut len = 0;
        let mut take = |on: bool, n: usize| {
            on.then(|| {
                len += n;
                len - n
            })
        };
        let rgb = take(c.rgb, 3);
        let mask = take(c.mask, 1);
        let depth = take(c.depth, 1);
        let normal = take(c.normal, 3);
        let back_normal = take(c.back_normal, 3);
        let occlusion = take(c.occlusion, 1);
        Layout { rgb, mask, depth, normal, back_normal, occlusion, len }
    }

    pub fn background(&self, bg: &Background) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        if let Some(o) = self.rgb {
            out[o..o + 3].copy_from_slice(bg.rgb.as_slice());
        }
        if let Some(o) = self.depth {
            out[o] = bg.depth;
        }
        if let Some(o) = self.normal {
            out[o..o + 3].copy_from_slice(bg.normal.as_slice());
        }
        if let Some(o) = self.back_normal {
            out[o..o + 3].copy_from_slice(bg.back_normal.as_slice());
        }
        if let Some(o) = self.occlusion {
            out[o] = bg.occlusion;
        }
        out
    }

    /// Payload of one hit: color, 1, intersection depth, camera-space normal
    /// (negated for back normals) and τ.
    #[inline]
    pub fn fill(&self, out: &mut [f64], color: &Vec3, depth: f64, normal: &Vec3, occlusion: f64) {
        if let Some(o) = self.rgb {
            out[o..o + 3].copy_from_slice(color.as_slice());
        }
        if let Some(o) = self.mask {
            out[o] = 1.0;
        }
        if let Some(o) = self.depth {
            out[o] = depth;
        }
        if let Some(o) = self.normal {
            out[o..o + 3].copy_from_slice(normal.as_slice());
        }
        if let Some(o) = self.back_normal {
            for k in 0..3 {
                out[o + k] = -normal[k];
            }
        }
        if let Some(o) = self.occlusion {
            out[o] = occlusion;
        }
    }
}

/// Posed, world-space surfels ready to splat.
#[derive(Debug, Clone, PartialEq)]
pub struct Splats {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub scales: Vec<f64>,
    pub colors: Vec<Vec3>,
    pub occlusion: Vec<f64>,
}

impl Splats {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n || self.scales.len() != n || self.colors.len() != n || self.occlusion.len() != n {
            return Err(Error::Dimension("splat arrays have inconsistent lengths".into()));
        }
        Ok(())
    }
}

//! Geometric regularizers on rendered depth/normals and on the canonical cloud.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{rotation_tangent_grad, Mat3, Vec3};
use crate::surfel::SurfelCloud;

/// Opacity above which a pixel counts as covered.
pub const COVERED_OPACITY: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct NormalDepthGrad {
    pub depth: Image,
    pub opacity: Image,
    pub normal: Image,
}

/// Mean `1 − cos` between the rendered normal and the normal obtained from
/// central differences of the back-projected depth map, over covered pixels
/// whose four neighbors are covered too. Depth is the composited camera z,
/// so the surface point is `(D / O) · ray`.
pub fn normal_depth_consistency(depth: &Image, opacity: &Image, normal: &Image, camera: &Camera) -> Result<(f64, NormalDepthGrad)> {
    let (w, h) = (depth.width, depth.height);
    if depth.channels != 1 || !depth.same_shape(opacity) || normal.channels != 3 || normal.width != w || normal.height != h {
        return Err(Error::Dimension("normal-depth consistency needs matching depth, opacity and normal images".into()));
    }
    let mut grad = NormalDepthGrad { depth: Image::new(w, h, 1), opacity: Image::new(w, h, 1), normal: Image::new(w, h, 3) };
    if w < 3 || h < 3 {
        return Ok((0.0, grad));
    }
    let covered = |x: usize, y: usize| opacity.at(x, y, 0) > COVERED_OPACITY;
    let point = |x: usize, y: usize| camera.ray_dir(x as f64, y as f64) * (depth.at(x, y, 0) / opacity.at(x, y, 0));
    struct Term {
        x: usize,
        y: usize,
        n: Vec3,
        dx: Vec3,
        dy: Vec3,
        c: Vec3,
    }
    let mut terms = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if !(covered(x, y) && covered(x - 1, y) && covered(x + 1, y) && covered(x, y - 1) && covered(x, y + 1)) {
                continue;
            }
            let n = Vec3::from_column_slice(normal.pixel(x, y));
            let dx = point(x + 1, y) - point(x - 1, y);
            let dy = point(x, y + 1) - point(x, y - 1);
            let c = dx.cross(&dy);
            if n.norm() < 1e-8 || c.norm() < 1e-12 {
                continue;
            }
            terms.push(Term { x, y, n, dx, dy, c });
        }
    }
    if terms.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / terms.len() as f64;
    let mut value = 0.0;
    let mut d_point = vec![Vec3::zeros(); w * h];
    for t in &terms {
        let ln = t.n.norm();
        let lc = t.c.norm();
        let c_hat = t.c / lc;
        let nd = -c_hat;
        let cos = t.n.dot(&nd) / ln;
        value += (1.0 - cos) * inv;
        let dn = -(nd - t.n * (cos / ln)) / ln * inv;
        for k in 0..3 {
            let v = grad.normal.at(t.x, t.y, k) + dn[k];
            grad.normal.set(t.x, t.y, k, v);
        }
        let g_nd = -t.n / ln * inv;
        let g_chat = -g_nd;
        let g_c = (g_chat - c_hat * c_hat.dot(&g_chat)) / lc;
        let g_dx = t.dy.cross(&g_c);
        let g_dy = g_c.cross(&t.dx);
        d_point[t.y * w + t.x + 1] += g_dx;
        d_point[t.y * w + t.x - 1] -= g_dx;
        d_point[(t.y + 1) * w + t.x] += g_dy;
        d_point[(t.y - 1) * w + t.x] -= g_dy;
    }
    for y in 0..h {
        for x in 0..w {
            let g = d_point[y * w + x];
            if g == Vec3::zeros() {
                continue;
            }
            let dz = camera.ray_dir(x as f64, y as f64).dot(&g);
            let (d, o) = (depth.at(x, y, 0), opacity.at(x, y, 0));
            grad.depth.set(x, y, 0, dz / o);
            grad.opacity.set(x, y, 0, -dz * d / (o * o));
        }
    }
    Ok((value, grad))
}

/// Mean `1 − n_i·n_j` over each surfel's recorded canonical neighbors, with
/// gradients as right-multiplied rotation tangents.
pub fn curvature_loss(cloud: &SurfelCloud) -> (f64, Vec<Vec3>) {
    let n = cloud.len();
    let rots = cloud.rotation_matrices();
    let normals: Vec<Vec3> = rots.iter().map(|r| r.column(2).into_owned()).collect();
    let pairs: usize = cloud.neighbors.iter().map(|nb| nb.len()).sum();
    if pairs == 0 {
        return (0.0, vec![Vec3::zeros(); n]);
    }
    let inv = 1.0 / pairs as f64;
    let mut value = 0.0;
    let mut dn = vec![Vec3::zeros(); n];
    for (i, nb) in cloud.neighbors.iter().enumerate() {
        for &j in nb {
            let j = j as usize;
            value += (1.0 - normals[i].dot(&normals[j])) * inv;
            dn[i] -= normals[j] * inv;
            dn[j] -= normals[i] * inv;
        }
    }
    let grads = rots
        .iter()
        .zip(&dn)
        .map(|(r, g)| {
            let mut gr = Mat3::zeros();
            gr.set_column(2, g);
            rotation_tangent_grad(r, &gr)
        })
        .collect();
    (value, grads)
}

/// Mean squared displacement from the initial canonical positions.
pub fn offset_loss(positions: &[Vec3], initial: &[Vec3]) -> (f64, Vec<Vec3>) {
    let n = positions.len().max(1) as f64;
    let mut value = 0.0;
    let grads = positions
        .iter()
        .zip(initial)
        .map(|(p, q)| {
            let d = p - q;
            value += d.norm_squared() / n;
            d * (2.0 / n)
        })
        .collect();
    (value, grads)
}

/// Mean squared deviation of predicted scales from their labels.
pub fn scale_loss(scales: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let n = scales.len().max(1) as f64;
    let mut value = 0.0;
    let grads = scales
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            value += (s - l).powi(2) / n;
            2.0 * (s - l) / n
        })
        .collect();
    (value, grads)
}

//! Procedural meshes and point sets used for toy avatars, fixtures and tests.

use std::f64::consts::PI;

use crate::math::Vec3;
use crate::mesh::TriMesh;

pub fn unit_triangle() -> TriMesh {
    TriMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]])
}

/// Regular icosahedron with circumradius `radius`, outward-oriented.
pub fn icosahedron(radius: f64) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let vertices = raw
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]).normalize() * radius)
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    TriMesh::new(vertices, faces)
}

/// Surface of revolution about the +y axis through `center`.
///
/// `rings` lists `(y, radius)` pairs from bottom to top; poles are added
/// below the first and above the last ring when requested. Faces are
/// oriented so their normals point away from the axis.
pub fn revolve(center: Vec3, rings: &[(f64, f64)], segments: usize, bottom_pole: Option<f64>, top_pole: Option<f64>) -> TriMesh {
    let n = segments as u32;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let pole_bottom = bottom_pole.map(|y| {
        vertices.push(center + Vec3::new(0.0, y, 0.0));
        (vertices.len() - 1) as u32
    });
    let base = vertices.len() as u32;
    for &(y, r) in rings {
        for k in 0..segments {
            let a = 2.0 * PI * k as f64 / segments as f64;
            vertices.push(center + Vec3::new(r * a.cos(), y, -r * a.sin()));
        }
    }
    let idx = |ring: u32, k: u32| base + ring * n + (k % n);
    for i in 0..rings.len().saturating_sub(1) as u32 {
        for k in 0..n {
            let (a, b, c, d) = (idx(i, k), idx(i, k + 1), idx(i + 1, k + 1), idx(i + 1, k));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    if let Some(p) = pole_bottom {
        for k in 0..n {
            faces.push([p, idx(0, k + 1), idx(0, k)]);
        }
    }
    if let Some(y) = top_pole {
        vertices.push(center + Vec3::new(0.0, y, 0.0));
        let q = (vertices.len() - 1) as u32;
        let last = rings.len() as u32 - 1;
        for k in 0..n {
            faces.push([q, idx(last, k), idx(last, k + 1)]);
        }
    }
    let mut mesh = TriMesh::new(vertices, faces);
    orient_outward_from_axis(&mut mesh, center);
    mesh
}

fn orient_outward_from_axis(mesh: &mut TriMesh, center: Vec3) {
    // Faces are consistently wound; test the face farthest from the axis.
    let Some((fi, _)) = mesh
        .faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let c = f.iter().map(|&v| mesh.vertices[v as usize]).sum::<Vec3>() / 3.0 - center;
            (i, c.x * c.x + c.z * c.z)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
    else {
        return;
    };
    let f = mesh.faces[fi];
    let c = f.iter().map(|&v| mesh.vertices[v as usize]).sum::<Vec3>() / 3.0 - center;
    let radial = Vec3::new(c.x, 0.0, c.z);
    if mesh.face_normal(fi).dot(&radial) < 0.0 {
        for f in &mut mesh.faces {
            f.swap(1, 2);
        }
    }
}

pub fn uv_sphere(center: Vec3, radius: f64, segments: usize, rings: usize) -> TriMesh {
    let profile: Vec<(f64, f64)> = (1..=rings)
        .map(|i| {
            let phi = PI * i as f64 / (rings + 1) as f64;
            (-radius * phi.cos(), radius * phi.sin())
        })
        .collect();
    revolve(center, &profile, segments, Some(-radius), Some(radius))
}

/// Closed capsule along +y: a cylinder of `length` between two hemispheres.
pub fn capsule(center: Vec3, radius: f64, length: f64, segments: usize, cap_rings: usize, body_rings: usize) -> TriMesh {
    let half = 0.5 * length;
    let mut profile = Vec::new();
    for i in 1..=cap_rings {
        let phi = 0.5 * PI * i as f64 / cap_rings as f64;
        profile.push((-half - radius * phi.cos(), radius * phi.sin()));
    }
    for i in 1..body_rings {
        let y = -half + length * i as f64 / body_rings as f64;
        profile.push((y, radius));
    }
    for i in (1..=cap_rings).rev() {
        let phi = 0.5 * PI * i as f64 / cap_rings as f64;
        profile.push((half + radius * phi.cos(), radius * phi.sin()));
    }
    // The equator rings of both caps are included; drop the duplicate if body_rings == 0.
    profile.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-12);
    revolve(center, &profile, segments, Some(-half - radius), Some(half + radius))
}

/// A mesh with the vertex, edge and face counts of the SMPL-X body template
/// (V=10475, F=20908, E=31378, 32 boundary edges): an open body of revolution
/// plus two closed eyeballs.
pub fn smplx_resolution_mesh() -> TriMesh {
    let rings = 321;
    let profile: Vec<(f64, f64)> = (0..rings)
        .map(|i| {
            let t = (i + 1) as f64 / rings as f64;
            let y = 1.6 * t;
            let r = 0.18 * (PI * t).sin().sqrt().max(0.02) + 0.02;
            (y, r)
        })
        .collect();
    let mut body = revolve(Vec3::zeros(), &profile, 32, Some(0.0), None);
    for center in [Vec3::new(-0.04, 1.5, 0.15), Vec3::new(0.04, 1.5, 0.15)] {
        let eye = uv_sphere(center, 0.012, 11, 9);
        let offset = body.vertices.len() as u32;
        body.vertices.extend(eye.vertices);
        body.faces.extend(eye.faces.iter().map(|f| f.map(|v| v + offset)));
    }
    body
}

/// `n` nearly uniform points on a sphere (golden-angle spiral).
pub fn fibonacci_sphere(center: Vec3, radius: f64, n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let a = golden * i as f64;
            center + radius * Vec3::new(r * a.cos(), y, r * a.sin())
        })
        .collect()
}

/// Regular grid of points on the plane `z = depth` spanning `[-half, half]²`.
pub fn plane_grid(half: f64, depth: f64, per_side: usize) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(per_side * per_side);
    for j in 0..per_side {
        for i in 0..per_side {
            let x = -half + 2.0 * half * i as f64 / (per_side - 1) as f64;
            let y = -half + 2.0 * half * j as f64 / (per_side - 1) as f64;
            pts.push(Vec3::new(x, y, depth));
        }
    }
    pts
}

//! Triangle meshes: validation, midpoint subdivision and vertex normals.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

/// Edge statistics of a validated mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshTopology {
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    pub boundary_edges: usize,
}

impl MeshTopology {
    pub fn is_closed(&self) -> bool {
        self.boundary_edges == 0
    }
}

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Self {
        TriMesh { vertices, faces }
    }

    /// Check that every edge is shared by at most two consistently oriented
    /// faces and that faces are non-degenerate.
    pub fn validate(&self) -> Result<MeshTopology> {
        let nv = self.vertices.len() as u32;
        let mut directed: HashMap<(u32, u32), usize> = HashMap::with_capacity(self.faces.len() * 3);
        let mut undirected: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.faces.len() * 2);
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= nv) {
                return Err(Error::Mesh(format!("face {fi} references a vertex out of range ({f:?}, {nv} vertices)")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Mesh(format!("face {fi} is degenerate ({f:?})")));
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                if let Some(other) = directed.insert((a, b), fi) {
                    return Err(Error::Mesh(format!(
                        "non-manifold edge ({a}, {b}): same orientation in faces {other} and {fi}"
                    )));
                }
                let count = undirected.entry(edge_key(a, b)).or_insert(0);
                *count += 1;
                if *count > 2 {
                    return Err(Error::Mesh(format!("non-manifold edge ({a}, {b}): shared by more than two faces")));
                }
            }
        }
        let boundary_edges = undirected.values().filter(|&&c| c == 1).count();
        Ok(MeshTopology {
            vertices: self.vertices.len(),
            edges: undirected.len(),
            faces: self.faces.len(),
            boundary_edges,
        })
    }

    /// One round of 1-to-4 midpoint subdivision. Original vertices keep their
    /// indices; edge midpoints are appended in first-encounter order.
    pub fn subdivide_midpoint(&self) -> TriMesh {
        let mut vertices = self.vertices.clone();
        let mut mids: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.faces.len() * 2);
        let mut faces = Vec::with_capacity(self.faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
            *mids.entry(edge_key(a, b)).or_insert_with(|| {
                vertices.push((vertices[a as usize] + vertices[b as usize]) * 0.5);
                (vertices.len() - 1) as u32
            })
        };
        for &[a, b, c] in &self.faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            faces.push([a, ab, ca]);
            faces.push([ab, b, bc]);
            faces.push([ca, bc, c]);
            faces.push([ab, bc, ca]);
        }
        TriMesh { vertices, faces }
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a))
    }

    /// Area-weighted vertex normals (unit length; isolated vertices get +z).
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_normal(fi);
            for &v in f {
                acc[v as usize] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::z()
                }
            })
            .collect()
    }

    pub fn centroid(&self) -> Vec3 {
        self.vertices.iter().sum::<Vec3>() / self.vertices.len().max(1) as f64
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        self.vertices.iter().fold(
            (Vec3::repeat(f64::MAX), Vec3::repeat(f64::MIN)),
            |(lo, hi), v| (lo.inf(v), hi.sup(v)),
        )
    }
}

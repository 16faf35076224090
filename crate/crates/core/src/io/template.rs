//! Body template binary format.
//!
//! All values little-endian:
//!
//! ```text
//! magic      8 bytes  "SOARTPL1"
//! counts     5 × u32  V, F, J, K (keypoints), B (shape components)
//! vertices   V × 3 f64
//! faces      F × 3 u32
//! parents    J i32    (-1 for the root)
//! joints     J × 3 f64
//! weights    V rows:  u32 n, then n × (u32 joint, f64 weight)
//! shape      V × B × 3 f64
//! joint shape J × B × 3 f64
//! regressor  K rows:  u32 n, then n × (u32 vertex, f64 weight)
//! ```

use std::path::Path;

use crate::articulation::{BodyTemplate, SparseRows};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::math::Vec3;

pub const TEMPLATE_MAGIC: &[u8; 8] = b"SOARTPL1";

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vec3) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn rows(&mut self, rows: &SparseRows) {
        for i in 0..rows.rows() {
            let row: Vec<(usize, f64)> = rows.row(i).collect();
            self.u32(row.len() as u32);
            for (c, v) in row {
                self.u32(c as u32);
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        let end = self.pos + N;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        self.pos = end;
        Ok(s.try_into().expect("slice length"))
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn i32(&mut self) -> std::result::Result<i32, String> {
        Ok(i32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn vec3(&mut self) -> std::result::Result<Vec3, String> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn vec3s(&mut self, n: usize) -> std::result::Result<Vec<Vec3>, String> {
        self.check_remaining(n, 24)?;
        (0..n).map(|_| self.vec3()).collect()
    }
    fn check_remaining(&self, n: usize, size: usize) -> std::result::Result<(), String> {
        if n.saturating_mul(size) > self.bytes.len() - self.pos {
            return Err(format!("declared {n} records of {size} bytes at byte {}, file too short", self.pos));
        }
        Ok(())
    }
    fn rows(&mut self, n: usize, columns: usize, what: &str) -> std::result::Result<SparseRows, String> {
        self.check_remaining(n, 4)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let k = self.u32()? as usize;
            self.check_remaining(k, 12)?;
            let mut row = Vec::with_capacity(k);
            for _ in 0..k {
                let c = self.u32()?;
                if c as usize >= columns {
                    return Err(format!("{what} row {i} references column {c} of {columns}"));
                }
                row.push((c, self.f64()?));
            }
            rows.push(row);
        }
        Ok(SparseRows::from_rows(rows))
    }
}

pub fn encode_template(t: &BodyTemplate) -> Result<Vec<u8>> {
    t.validate()?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(TEMPLATE_MAGIC);
    for n in [t.num_vertices(), t.faces.len(), t.num_joints(), t.num_keypoints(), t.num_betas] {
        w.u32(u32::try_from(n).map_err(|_| Error::Template(format!("count {n} exceeds u32")))?);
    }
    t.vertices.iter().for_each(|v| w.vec3(v));
    for f in &t.faces {
        f.iter().for_each(|&i| w.u32(i));
    }
    for p in &t.parents {
        w.i32(p.map_or(-1, |p| p as i32));
    }
    t.joints.iter().for_each(|v| w.vec3(v));
    w.rows(&t.weights);
    t.shape_dirs.iter().for_each(|v| w.vec3(v));
    t.joint_shape_dirs.iter().for_each(|v| w.vec3(v));
    w.rows(&t.regressor);
    Ok(w.0)
}

pub fn decode_template(bytes: &[u8]) -> std::result::Result<BodyTemplate, String> {
    if bytes.len() < 8 || &bytes[..8] != TEMPLATE_MAGIC {
        return Err("not a template file (bad magic)".into());
    }
    let mut r = Reader { bytes, pos: 8 };
    let (nv, nf, nj, nk, nb) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let vertices = r.vec3s(nv)?;
    r.check_remaining(nf, 12)?;
    let faces = (0..nf).map(|_| Ok([r.u32()?, r.u32()?, r.u32()?])).collect::<std::result::Result<Vec<_>, String>>()?;
    r.check_remaining(nj, 4)?;
    let parents = (0..nj)
        .map(|j| {
            let p = r.i32()?;
            match p {
                -1 => Ok(None),
                p if p >= 0 && (p as usize) < nj => Ok(Some(p as usize)),
                p => Err(format!("joint {j} has parent {p} outside 0..{nj}")),
            }
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    let joints = r.vec3s(nj)?;
    let weights = r.rows(nv, nj, "weight")?;
    let shape_dirs = r.vec3s(nv.saturating_mul(nb))?;
    let joint_shape_dirs = r.vec3s(nj.saturating_mul(nb))?;
    let regressor = r.rows(nk, nv, "regressor")?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(BodyTemplate { vertices, faces, parents, joints, weights, num_betas: nb, shape_dirs, joint_shape_dirs, regressor })
}

pub fn save_template(path: &Path, t: &BodyTemplate) -> Result<()> {
    write_atomic(path, &encode_template(t)?)
}

pub fn load_template(path: &Path) -> Result<BodyTemplate> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = decode_template(&bytes).map_err(|m| Error::format(path, m))?;
    t.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(t)
}

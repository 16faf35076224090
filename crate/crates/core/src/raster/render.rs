use rayon::prelude::*;

use super::composite::MIN_TRANSMITTANCE;
use super::splat::{cutoff_radius, intersect, intersect_backward, CamSurfel, CamSurfelGrad, Hit, NEAR_PLANE};
use super::{DepthOrder, Layout, RenderRequest, Splats};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{Mat3, Vec3};

pub const TILE_SIZE: usize = 16;

/// Payload length with every channel requested.
const MAX_PAYLOAD: usize = 12;

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    #[inline]
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Conservative screen footprint of the disk of radius `cutoff · σ`.
fn footprint(s: &CamSurfel, camera: &Camera) -> Option<Rect> {
    let (w, h) = (camera.width, camera.height);
    let r = cutoff_radius() * s.sigma * (1.0 + 1e-9);
    let half = Vec3::from_fn(|k, _| r * (s.tangent_u[k].powi(2) + s.tangent_v[k].powi(2)).sqrt());
    let full = Rect { x0: 0, y0: 0, x1: w - 1, y1: h - 1 };
    if s.center.z - half.z < NEAR_PLANE {
        return Some(full);
    }
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for c in 0..8 {
        let corner = Vec3::new(
            s.center.x + if c & 1 == 0 { -half.x } else { half.x },
            s.center.y + if c & 2 == 0 { -half.y } else { half.y },
            s.center.z + if c & 4 == 0 { -half.z } else { half.z },
        );
        let (u, v) = camera.project_camera(&corner)?;
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    // One pixel of slack against rounding.
    let x0 = (umin - 1.0).ceil().max(0.0);
    let y0 = (vmin - 1.0).ceil().max(0.0);
    let x1 = (umax + 1.0).floor().min((w - 1) as f64);
    let y1 = (vmax + 1.0).floor().min((h - 1) as f64);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some(Rect { x0: x0 as usize, y0: y0 as usize, x1: x1 as usize, y1: y1 as usize })
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
struct RenderState {
    request: RenderRequest,
    camera: Camera,
    layout: Layout,
    surfels: Vec<Option<CamSurfel>>,
    colors: Vec<Vec3>,
    occlusion: Vec<f64>,
    tiles: Vec<Vec<u32>>,
    /// Screen footprint per surfel, conservative for `intersect`.
    rects: Vec<Option<Rect>>,
    tiles_x: usize,
    /// Per pixel: number of tile-list entries visited before compositing stopped.
    visited: Vec<u32>,
    transmittance: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rgb: Option<Image>,
    pub mask: Option<Image>,
    pub depth: Option<Image>,
    pub normal: Option<Image>,
    pub back_normal: Option<Image>,
    pub occlusion: Option<Image>,
    /// Accumulated opacity `1 − T_final`.
    pub opacity: Image,
    state: RenderState,
}

impl RenderOutput {
    /// Normal image rescaled to unit length where opacity exceeds 0.5
    /// (zero elsewhere).
    pub fn unit_normals(&self, back: bool) -> Option<Image> {
        let src = if back { self.back_normal.as_ref()? } else { self.normal.as_ref()? };
        let mut out = src.clone();
        for (px, &o) in out.data.chunks_mut(3).zip(&self.opacity.data) {
            let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
            if o > 0.5 && n > 0.0 {
                px.iter_mut().for_each(|v| *v /= n);
            } else {
                px.fill(0.0);
            }
        }
        Some(out)
    }

    pub fn camera(&self) -> &Camera {
        &self.state.camera
    }

    pub fn request(&self) -> &RenderRequest {
        &self.state.request
    }
}

fn tile_pixels(t: usize, tiles_x: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let (tx, ty) = (t % tiles_x, t / tiles_x);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, y0, (x0 + TILE_SIZE).min(w), (y0 + TILE_SIZE).min(h))
}

/// Render posed surfels into the requested channels.
pub fn render(splats: &Splats, camera: &Camera, request: &RenderRequest) -> Result<RenderOutput> {
    camera.validate()?;
    request.validate()?;
    splats.validate()?;
    let (w, h) = (camera.width, camera.height);
    let layout = Layout::new(&request.channels);
    let f_min = camera.focal_min();

    let surfels: Vec<Option<CamSurfel>> = (0..splats.len())
        .into_par_iter()
        .map(|i| {
            let s = CamSurfel::new(
                camera.to_camera(&splats.positions[i]),
                &(camera.rotation * splats.rotations[i]),
                splats.scales[i],
                f_min,
            );
            if s.center.z < NEAR_PLANE || (request.cull_back_faces && s.back_facing()) {
                None
            } else {
                Some(s)
            }
        })
        .collect();

    let mut order: Vec<u32> = (0..splats.len() as u32).filter(|&i| surfels[i as usize].is_some()).collect();
    let depth = |i: u32| surfels[i as usize].as_ref().map_or(0.0, |s| s.center.z);
    match request.order {
        DepthOrder::Ascending => order.sort_by(|&a, &b| depth(a).total_cmp(&depth(b)).then(a.cmp(&b))),
        DepthOrder::Descending => order.sort_by(|&a, &b| depth(b).total_cmp(&depth(a)).then(a.cmp(&b))),
    }

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let rects: Vec<Option<Rect>> = surfels.par_iter().map(|s| s.as_ref().and_then(|s| footprint(s, camera))).collect();
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let Some(r) = rects[i as usize] else { continue };
        for ty in r.y0 / TILE_SIZE..=r.y1 / TILE_SIZE {
            for tx in r.x0 / TILE_SIZE..=r.x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }

    let bg = layout.background(&request.background);
    let p = layout.len;
    struct TileOut {
        values: Vec<f64>,
        visited: Vec<u32>,
        transmittance: Vec<f64>,
    }
    let tile_outs: Vec<TileOut> = (0..tiles.len())
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tile_pixels(t, tiles_x, w, h);
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TileOut { values: vec![0.0; n * p], visited: vec![0; n], transmittance: vec![1.0; n] };
            let mut payload = vec![0.0; p];
            let list = &tiles[t];
            for y in y0..y1 {
                for x in x0..x1 {
                    let k = (y - y0) * (x1 - x0) + (x - x0);
                    let dir = camera.ray_dir(x as f64, y as f64);
                    let acc = &mut out.values[k * p..(k + 1) * p];
                    let mut tr = 1.0;
                    let mut visited = list.len();
                    for (li, &si) in list.iter().enumerate() {
                        if !rects[si as usize].expect("binned surfel").contains(x, y) {
                            continue;
                        }
                        let s = surfels[si as usize].as_ref().expect("binned surfel");
                        let Some(hit) = intersect(s, &dir) else { continue };
                        let si = si as usize;
                        layout.fill(&mut payload, &splats.colors[si], hit.depth, &s.normal, splats.occlusion[si]);
                        let wgt = tr * hit.alpha;
                        for (a, v) in acc.iter_mut().zip(&payload) {
                            *a += wgt * v;
                        }
                        tr *= 1.0 - hit.alpha;
                        if tr < MIN_TRANSMITTANCE {
                            visited = li + 1;
                            break;
                        }
                    }
                    for (a, b) in acc.iter_mut().zip(&bg) {
                        *a += tr * b;
                    }
                    out.visited[k] = visited as u32;
                    out.transmittance[k] = tr;
                }
            }
            out
        })
        .collect();

    let mut values = vec![0.0; w * h * p];
    let mut visited = vec![0u32; w * h];
    let mut transmittance = vec![1.0; w * h];
    for (t, out) in tile_outs.iter().enumerate() {
        let (x0, y0, x1, y1) = tile_pixels(t, tiles_x, w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let k = (y - y0) * (x1 - x0) + (x - x0);
                let g = y * w + x;
                values[g * p..(g + 1) * p].copy_from_slice(&out.values[k * p..(k + 1) * p]);
                visited[g] = out.visited[k];
                transmittance[g] = out.transmittance[k];
            }
        }
    }

    let plane = |offset: Option<usize>, c: usize| {
        offset.map(|o| Image {
            width: w,
            height: h,
            channels: c,
            data: values.chunks(p).flat_map(|px| px[o..o + c].iter().copied()).collect(),
        })
    };
    let opacity = Image { width: w, height: h, channels: 1, data: transmittance.iter().map(|t| 1.0 - t).collect() };
    Ok(RenderOutput {
        width: w,
        height: h,
        rgb: plane(layout.rgb, 3),
        mask: plane(layout.mask, 1),
        depth: plane(layout.depth, 1),
        normal: plane(layout.normal, 3),
        back_normal: plane(layout.back_normal, 3),
        occlusion: plane(layout.occlusion, 1),
        opacity,
        state: RenderState {
            request: *request,
            camera: camera.clone(),
            layout,
            surfels,
            colors: splats.colors.clone(),
            occlusion: splats.occlusion.clone(),
            tiles,
            rects,
            tiles_x,
            visited,
            transmittance,
        },
    })
}

/// Upstream gradients `dL/d image` per channel.
#[derive(Debug, Clone, Default)]
pub struct ChannelGrads {
    pub rgb: Option<Image>,
    pub mask: Option<Image>,
    pub depth: Option<Image>,
    pub normal: Option<Image>,
    pub back_normal: Option<Image>,
    pub occlusion: Option<Image>,
}

/// Gradients with respect to the world-space splat inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub scales: Vec<f64>,
    pub colors: Vec<Vec3>,
    pub occlusion: Vec<f64>,
}

impl SplatGrads {
    pub fn zeros(n: usize) -> Self {
        SplatGrads {
            positions: vec![Vec3::zeros(); n],
            rotations: vec![Mat3::zeros(); n],
            scales: vec![0.0; n],
            colors: vec![Vec3::zeros(); n],
            occlusion: vec![0.0; n],
        }
    }

    pub fn add(&mut self, o: &SplatGrads) {
        for i in 0..self.positions.len() {
            self.positions[i] += o.positions[i];
            self.rotations[i] += o.rotations[i];
            self.scales[i] += o.scales[i];
            self.colors[i] += o.colors[i];
            self.occlusion[i] += o.occlusion[i];
        }
    }
}

#[derive(Clone, Copy, Default)]
struct LocalGrad {
    geom: CamSurfelGrad,
    color: Vec3,
    occlusion: f64,
}

/// Backpropagate image gradients through a retained forward pass.
pub fn render_backward(output: &RenderOutput, grads: &ChannelGrads) -> Result<SplatGrads> {
    let st = &output.state;
    let (w, h) = (output.width, output.height);
    let layout = st.layout;
    let p = layout.len;
    // Pack the upstream gradients into one payload-shaped buffer.
    let mut upstream = vec![0.0; w * h * p];
    let pairs: [(&Option<Image>, Option<usize>, usize, &str); 6] = [
        (&grads.rgb, layout.rgb, 3, "rgb"),
        (&grads.mask, layout.mask, 1, "mask"),
        (&grads.depth, layout.depth, 1, "depth"),
        (&grads.normal, layout.normal, 3, "normal"),
        (&grads.back_normal, layout.back_normal, 3, "back_normal"),
        (&grads.occlusion, layout.occlusion, 1, "occlusion"),
    ];
    for (g, offset, c, name) in pairs {
        let Some(g) = g else { continue };
        let Some(o) = offset else {
            return Err(Error::Render(format!("gradient supplied for channel {name}, which was not rendered")));
        };
        if g.width != w || g.height != h || g.channels != c {
            return Err(Error::Dimension(format!("{name} gradient is {}x{}x{}, render is {w}x{h}x{c}", g.width, g.height, g.channels)));
        }
        for px in 0..w * h {
            upstream[px * p + o..px * p + o + c].copy_from_slice(&g.data[px * c..(px + 1) * c]);
        }
    }

    let bg = layout.background(&st.request.background);
    let f_min = st.camera.focal_min();
    struct Visit {
        li: usize,
        hit: Hit,
        transmittance: f64,
        payload: [f64; MAX_PAYLOAD],
    }
    let locals: Vec<Vec<LocalGrad>> = (0..st.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &st.tiles[t];
            let mut local = vec![LocalGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let (x0, y0, x1, y1) = tile_pixels(t, st.tiles_x, w, h);
            let mut visits: Vec<Visit> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = y * w + x;
                    let g = &upstream[px * p..(px + 1) * p];
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let dir = st.camera.ray_dir(x as f64, y as f64);
                    visits.clear();
                    let mut tr = 1.0;
                    for (li, &si) in list[..st.visited[px] as usize].iter().enumerate() {
                        if !st.rects[si as usize].expect("binned surfel").contains(x, y) {
                            continue;
                        }
                        let s = st.surfels[si as usize].as_ref().expect("binned surfel");
                        let Some(hit) = intersect(s, &dir) else { continue };
                        let mut payload = [0.0; MAX_PAYLOAD];
                        let si = si as usize;
                        layout.fill(&mut payload[..p], &st.colors[si], hit.depth, &s.normal, st.occlusion[si]);
                        visits.push(Visit { li, hit, transmittance: tr, payload });
                        tr *= 1.0 - hit.alpha;
                    }
                    // Suffix accumulator: contributions behind the current hit plus background.
                    let t_final = st.transmittance[px];
                    let mut behind: Vec<f64> = bg.iter().map(|b| t_final * b).collect();
                    for v in visits.iter().rev() {
                        let a = v.hit.alpha;
                        let wgt = v.transmittance * a;
                        let mut d_alpha = 0.0;
                        for c in 0..p {
                            d_alpha += g[c] * (v.transmittance * v.payload[c] - behind[c] / (1.0 - a));
                        }
                        let s = st.surfels[list[v.li] as usize].as_ref().expect("binned surfel");
                        let lg = &mut local[v.li];
                        if let Some(o) = layout.rgb {
                            lg.color += Vec3::new(g[o], g[o + 1], g[o + 2]) * wgt;
                        }
                        if let Some(o) = layout.normal {
                            lg.geom.normal += Vec3::new(g[o], g[o + 1], g[o + 2]) * wgt;
                        }
                        if let Some(o) = layout.back_normal {
                            lg.geom.normal -= Vec3::new(g[o], g[o + 1], g[o + 2]) * wgt;
                        }
                        if let Some(o) = layout.occlusion {
                            lg.occlusion += g[o] * wgt;
                        }
                        let d_depth = layout.depth.map_or(0.0, |o| g[o] * wgt);
                        intersect_backward(s, f_min, &dir, &v.hit, d_alpha, d_depth, &mut lg.geom);
                        for c in 0..p {
                            behind[c] += wgt * v.payload[c];
                        }
                    }
                }
            }
            local
        })
        .collect();

    let n = st.surfels.len();
    let mut cam = vec![LocalGrad::default(); n];
    for (t, local) in locals.into_iter().enumerate() {
        for (&si, lg) in st.tiles[t].iter().zip(local) {
            let c = &mut cam[si as usize];
            c.geom += lg.geom;
            c.color += lg.color;
            c.occlusion += lg.occlusion;
        }
    }
    let rt = st.camera.rotation.transpose();
    let mut out = SplatGrads::zeros(n);
    for (i, c) in cam.iter().enumerate() {
        out.positions[i] = rt * c.geom.center;
        out.rotations[i] = rt * c.geom.rotation();
        out.scales[i] = c.geom.scale;
        out.colors[i] = c.color;
        out.occlusion[i] = c.occlusion;
    }
    Ok(out)
}

//! Perceptual distances between images.
//!
//! [`PyramidDistance`] needs no weights. [`ConvFeatureDistance`] loads a small
//! convolutional feature stack from a safetensors archive with tensors
//! `layers.{i}.weight` `[out, in, 3, 3]`, `layers.{i}.bias` `[out]` and
//! `layers.{i}.lin` `[out]` (nonnegative channel weights). Every layer after
//! the first is preceded by 2×2 average pooling. Inputs are mapped from
//! `[0, 1]` to `[−1, 1]`; features are unit-normalized over channels and the
//! distance is `Σ_l mean_xy Σ_c lin_c (â_c − b̂_c)²`.

use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::sign;

pub trait PerceptualDistance: Send + Sync {
    fn name(&self) -> &str;

    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;

    /// Distance and its gradient with respect to `b`.
    fn distance_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)>;
}

pub const PYRAMID_LEVELS: usize = 4;

/// Mean absolute difference averaged over a 2× downsampling pyramid.
#[derive(Debug, Clone, Copy)]
pub struct PyramidDistance {
    pub levels: usize,
}

impl Default for PyramidDistance {
    fn default() -> Self {
        PyramidDistance { levels: PYRAMID_LEVELS }
    }
}

impl PyramidDistance {
    fn pyramid(&self, img: &Image) -> Vec<Image> {
        let mut out = vec![img.clone()];
        while out.len() < self.levels {
            let last = out.last().expect("nonempty");
            if last.width < 2 || last.height < 2 {
                break;
            }
            let next = last.downsample2();
            out.push(next);
        }
        out
    }
}

impl PerceptualDistance for PyramidDistance {
    fn name(&self) -> &str {
        "pyramid"
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        a.check_same_shape(b)?;
        let (pa, pb) = (self.pyramid(a), self.pyramid(b));
        let n = pa.len() as f64;
        Ok(pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.data.len() as f64)
            .sum::<f64>()
            / n)
    }

    fn distance_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)> {
        a.check_same_shape(b)?;
        let (pa, pb) = (self.pyramid(a), self.pyramid(b));
        let n = pa.len() as f64;
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(pa.len());
        for (x, y) in pa.iter().zip(&pb) {
            let m = x.data.len() as f64;
            value += x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / (m * n);
            let data = x.data.iter().zip(&y.data).map(|(p, q)| sign(q - p) / (m * n)).collect();
            grads.push(Image::from_data(x.width, x.height, x.channels, data)?);
        }
        let mut g = grads.pop().expect("nonempty");
        while let Some(mut finer) = grads.pop() {
            finer.add_assign(&Image::upsample2_adjoint(&g, finer.width, finer.height));
            g = finer;
        }
        Ok((value, g))
    }
}

/// One 3×3 convolution layer with ReLU and per-channel distance weights.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub lin: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvFeatureDistance {
    layers: Vec<ConvLayer>,
}

/// Channel-planar feature map.
#[derive(Debug, Clone)]
struct Planes {
    c: usize,
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Planes {
    fn zeros(c: usize, w: usize, h: usize) -> Self {
        Planes { c, w, h, data: vec![0.0; c * w * h] }
    }

    fn from_image(img: &Image) -> Self {
        let mut p = Planes::zeros(img.channels, img.width, img.height);
        for y in 0..img.height {
            for x in 0..img.width {
                for c in 0..img.channels {
                    p.data[(c * img.height + y) * img.width + x] = 2.0 * img.at(x, y, c) - 1.0;
                }
            }
        }
        p
    }

    fn to_image_grad(&self) -> Image {
        Image::from_fn(self.w, self.h, self.c, |x, y, c| 2.0 * self.data[(c * self.h + y) * self.w + x])
    }

    fn pool(&self) -> Planes {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut out = Planes::zeros(self.c, w, h);
        for c in 0..self.c {
            for y in 0..h {
                for x in 0..w {
                    let s = |dx: usize, dy: usize| self.data[(c * self.h + 2 * y + dy) * self.w + 2 * x + dx];
                    out.data[(c * h + y) * w + x] = 0.25 * (s(0, 0) + s(1, 0) + s(0, 1) + s(1, 1));
                }
            }
        }
        out
    }

    fn pool_adjoint(&self, w: usize, h: usize) -> Planes {
        let mut out = Planes::zeros(self.c, w, h);
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let g = 0.25 * self.data[(c * self.h + y) * self.w + x];
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        out.data[(c * h + 2 * y + dy) * w + 2 * x + dx] += g;
                    }
                }
            }
        }
        out
    }
}

impl ConvLayer {
    fn forward(&self, x: &Planes) -> Planes {
        let (w, h) = (x.w, x.h);
        let mut out = Planes::zeros(self.out_channels, w, h);
        for o in 0..self.out_channels {
            for py in 0..h {
                for px in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_channels {
                        for ky in 0..3 {
                            let yy = py as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = px as isize + kx as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += self.weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
                                    * x.data[(i * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    out.data[(o * h + py) * w + px] = acc;
                }
            }
        }
        out
    }

    fn backward_input(&self, g: &Planes) -> Planes {
        let (w, h) = (g.w, g.h);
        let mut out = Planes::zeros(self.in_channels, w, h);
        for o in 0..self.out_channels {
            for py in 0..h {
                for px in 0..w {
                    let go = g.data[(o * h + py) * w + px];
                    if go == 0.0 {
                        continue;
                    }
                    for i in 0..self.in_channels {
                        for ky in 0..3 {
                            let yy = py as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = px as isize + kx as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                out.data[(i * h + yy as usize) * w + xx as usize] +=
                                    self.weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx] * go;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

const NORM_EPS: f64 = 1e-10;

struct Trace {
    inputs: Vec<Planes>,
    pre: Vec<Planes>,
    feats: Vec<Planes>,
}

impl ConvFeatureDistance {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("feature network has no layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weight.len() != layer.out_channels * layer.in_channels * 9
                || layer.bias.len() != layer.out_channels
                || layer.lin.len() != layer.out_channels
            {
                return Err(Error::Dimension(format!("feature layer {l} has inconsistent tensor sizes")));
            }
            if l > 0 && layer.in_channels != layers[l - 1].out_channels {
                return Err(Error::Dimension(format!("feature layer {l} expects {} inputs, previous layer gives {}", layer.in_channels, layers[l - 1].out_channels)));
            }
            if layer.lin.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("feature layer {l} has negative or non-finite channel weights")));
            }
        }
        Ok(ConvFeatureDistance { layers })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let tensor = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let t = st.tensor(name).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
            let data = t.data();
            let values = match t.dtype() {
                Dtype::F32 => data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect(),
                Dtype::F64 => data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                other => return Err(Error::format(path, format!("{name}: unsupported dtype {other:?}"))),
            };
            Ok((t.shape().to_vec(), values))
        };
        let mut layers = Vec::new();
        while st.names().iter().any(|n| **n == format!("layers.{}.weight", layers.len())) {
            let l = layers.len();
            let (shape, weight) = tensor(&format!("layers.{l}.weight"))?;
            if shape.len() != 4 || shape[2] != 3 || shape[3] != 3 {
                return Err(Error::format(path, format!("layers.{l}.weight must have shape [out, in, 3, 3], got {shape:?}")));
            }
            let (_, bias) = tensor(&format!("layers.{l}.bias"))?;
            let (_, lin) = tensor(&format!("layers.{l}.lin"))?;
            layers.push(ConvLayer { in_channels: shape[1], out_channels: shape[0], weight, bias, lin });
        }
        ConvFeatureDistance::new(layers)
    }

    /// Serialize to the safetensors layout read by [`ConvFeatureDistance::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let bytes = |v: &[f64]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
            owned.push((format!("layers.{l}.weight"), vec![layer.out_channels, layer.in_channels, 3, 3], bytes(&layer.weight)));
            owned.push((format!("layers.{l}.bias"), vec![layer.out_channels], bytes(&layer.bias)));
            owned.push((format!("layers.{l}.lin"), vec![layer.out_channels], bytes(&layer.lin)));
        }
        let views: Vec<(String, safetensors::tensor::TensorView)> = owned
            .iter()
            .map(|(n, s, b)| {
                safetensors::tensor::TensorView::new(Dtype::F64, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::format(path, e.to_string()))
            })
            .collect::<Result<_>>()?;
        let data = safetensors::serialize(views, None).map_err(|e| Error::format(path, e.to_string()))?;
        crate::io::write_atomic(path, &data)
    }

    fn check(&self, a: &Image, b: &Image) -> Result<()> {
        a.check_same_shape(b)?;
        if a.channels != self.layers[0].in_channels {
            return Err(Error::Dimension(format!("feature network expects {} channels, image has {}", self.layers[0].in_channels, a.channels)));
        }
        Ok(())
    }

    fn trace(&self, img: &Image) -> Trace {
        let mut x = Planes::from_image(img);
        let mut t = Trace { inputs: Vec::new(), pre: Vec::new(), feats: Vec::new() };
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                x = x.pool();
            }
            let z = layer.forward(&x);
            let mut f = z.clone();
            f.data.iter_mut().for_each(|v| *v = v.max(0.0));
            t.inputs.push(x);
            t.pre.push(z);
            x = f.clone();
            t.feats.push(f);
        }
        t
    }

    fn eval(&self, a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
        self.check(a, b)?;
        let (ta, tb) = (self.trace(a), self.trace(b));
        let mut value = 0.0;
        let mut d_feats: Vec<Planes> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (fa, fb) = (&ta.feats[l], &tb.feats[l]);
            let (w, h, c) = (fa.w, fa.h, fa.c);
            let px = (w * h).max(1) as f64;
            let mut dfb = Planes::zeros(c, w, h);
            for p in 0..w * h {
                let na = (0..c).map(|k| fa.data[k * w * h + p].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
                let nb = (0..c).map(|k| fb.data[k * w * h + p].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
                let mut d_hat = vec![0.0; c];
                for k in 0..c {
                    let diff = fa.data[k * w * h + p] / na - fb.data[k * w * h + p] / nb;
                    value += layer.lin[k] * diff * diff / px;
                    d_hat[k] = -2.0 * layer.lin[k] * diff / px;
                }
                if want_grad {
                    // b̂ = f / n with n = ‖f‖ + ε: ∂b̂/∂f = I/n − f fᵀ/(n² ‖f‖).
                    let norm = nb - NORM_EPS;
                    let dot: f64 = (0..c).map(|k| d_hat[k] * fb.data[k * w * h + p]).sum();
                    for k in 0..c {
                        let f = fb.data[k * w * h + p];
                        let radial = if norm > 0.0 { dot * f / (nb * nb * norm) } else { 0.0 };
                        dfb.data[k * w * h + p] = d_hat[k] / nb - radial;
                    }
                }
            }
            d_feats.push(dfb);
        }
        if !want_grad {
            return Ok((value, None));
        }
        let mut carry: Option<Planes> = None;
        for l in (0..self.layers.len()).rev() {
            let mut g = d_feats[l].clone();
            if let Some(c) = carry.take() {
                for (a, b) in g.data.iter_mut().zip(&c.data) {
                    *a += b;
                }
            }
            for (gv, z) in g.data.iter_mut().zip(&tb.pre[l].data) {
                if *z <= 0.0 {
                    *gv = 0.0;
                }
            }
            let gx = self.layers[l].backward_input(&g);
            carry = Some(if l > 0 {
                let prev = &tb.feats[l - 1];
                gx.pool_adjoint(prev.w, prev.h)
            } else {
                gx
            });
        }
        Ok((value, Some(carry.expect("at least one layer").to_image_grad())))
    }
}

impl PerceptualDistance for ConvFeatureDistance {
    fn name(&self) -> &str {
        "conv-features"
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(self.eval(a, b, false)?.0)
    }

    fn distance_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)> {
        let (v, g) = self.eval(a, b, true)?;
        Ok((v, g.expect("gradient requested")))
    }
}

/// Load a feature network from `path`, or fall back to the pyramid distance
/// when no path is given or the file is missing.
pub fn load_perceptual(path: Option<&Path>) -> Result<Box<dyn PerceptualDistance>> {
    match path {
        Some(p) if p.exists() => Ok(Box::new(ConvFeatureDistance::load(p)?)),
        Some(p) => {
            log::warn!("perceptual weights {} not found; using the pyramid L1 distance", p.display());
            Ok(Box::new(PyramidDistance::default()))
        }
        None => {
            log::info!("no perceptual weights configured; using the pyramid L1 distance");
            Ok(Box::new(PyramidDistance::default()))
        }
    }
}

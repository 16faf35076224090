//! Multiresolution hash-grid encoding with two shallow MLP heads: a
//! softplus scale head and a sigmoid color head, both fed by one shared
//! encoding of the canonical position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::{sigmoid, softplus, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            log2_table_size: 19,
            features: 2,
            base_resolution: 16,
            max_resolution: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Hash-table entries are initialized uniformly in `[-init_range, init_range]`.
    pub init_range: f64,
    /// Padding added around the canonical bounding box, relative to its extent.
    pub bounds_padding: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            grid: HashGridConfig::default(),
            hidden_width: 64,
            hidden_layers: 2,
            init_range: 1e-4,
            bounds_padding: 0.1,
        }
    }
}

impl FieldConfig {
    /// A reduced configuration for toy scenes and tests.
    pub fn small() -> Self {
        FieldConfig {
            grid: HashGridConfig {
                levels: 8,
                log2_table_size: 14,
                features: 2,
                base_resolution: 4,
                max_resolution: 128,
            },
            hidden_width: 32,
            hidden_layers: 2,
            ..FieldConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Level {
    resolution: u32,
    offset: usize,
    entries: usize,
    dense: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Mlp {
    layers: Vec<Dense>,
}

/// Scale and color predicted for one canonical position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub scale: f64,
    pub color: Vec3,
}

/// The hybrid-parameterization field `μ₀ ↦ (s, c)`.
///
/// All trainable values live in one flat parameter vector so optimizers and
/// checkpoints treat the field as a single group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralField {
    config: FieldConfig,
    bounds_min: Vec3,
    bounds_extent: f64,
    levels: Vec<Level>,
    scale_head: Mlp,
    color_head: Mlp,
    pub params: Vec<f64>,
}

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

impl NeuralField {
    /// Field covering the cube around `[lo, hi]` (padded per the config).
    pub fn new(config: FieldConfig, lo: Vec3, hi: Vec3, seed: u64) -> Self {
        let grid = &config.grid;
        let raw_extent = (hi - lo).max().max(1e-6);
        let pad = raw_extent * config.bounds_padding;
        let center = (lo + hi) * 0.5;
        let bounds_extent = raw_extent + 2.0 * pad;
        let bounds_min = center - Vec3::repeat(bounds_extent * 0.5);

        let table = 1usize << grid.log2_table_size;
        let growth = if grid.levels > 1 {
            ((grid.max_resolution as f64).ln() - (grid.base_resolution as f64).ln()) / (grid.levels - 1) as f64
        } else {
            0.0
        };
        let mut offset = 0;
        let mut levels = Vec::with_capacity(grid.levels);
        for l in 0..grid.levels {
            let resolution = ((grid.base_resolution as f64) * (growth * l as f64).exp()).floor().max(1.0) as u32;
            let side = resolution as usize + 1;
            let dense_entries = side.checked_pow(3).unwrap_or(usize::MAX);
            let dense = dense_entries <= table;
            let entries = if dense { dense_entries } else { table };
            levels.push(Level { resolution, offset, entries, dense });
            offset += entries * grid.features;
        }

        let enc_dim = grid.levels * grid.features;
        let mut cursor = offset;
        let mut make_mlp = |out: usize| {
            let mut layers = Vec::new();
            let mut inputs = enc_dim;
            for layer in 0..=config.hidden_layers {
                let outputs = if layer == config.hidden_layers { out } else { config.hidden_width };
                let weights = cursor;
                cursor += inputs * outputs;
                let bias = cursor;
                cursor += outputs;
                layers.push(Dense { inputs, outputs, weights, bias });
                inputs = outputs;
            }
            Mlp { layers }
        };
        let scale_head = make_mlp(1);
        let color_head = make_mlp(3);

        let mut params = vec![0.0; cursor];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut params[..offset] {
            *p = rng.random_range(-config.init_range..=config.init_range);
        }
        for head in [&scale_head, &color_head] {
            let n_layers = head.layers.len();
            for (i, d) in head.layers.iter().enumerate() {
                let mut bound = (6.0 / d.inputs as f64).sqrt();
                if i + 1 == n_layers {
                    bound *= 0.01;
                }
                for p in &mut params[d.weights..d.weights + d.inputs * d.outputs] {
                    *p = rng.random_range(-bound..=bound);
                }
            }
        }
        NeuralField {
            config,
            bounds_min,
            bounds_extent,
            levels,
            scale_head,
            color_head,
            params,
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Number of leading parameters that belong to the hash tables.
    pub fn table_params(&self) -> usize {
        self.scale_head.layers[0].weights
    }

    pub fn encoding_dim(&self) -> usize {
        self.config.grid.levels * self.config.grid.features
    }

    /// Parameter index of the scale head's output bias.
    pub fn scale_output_bias(&self) -> usize {
        self.scale_head.layers.last().expect("mlp has layers").bias
    }

    fn normalize(&self, x: &Vec3) -> (Vec3, [bool; 3]) {
        let mut out = Vec3::zeros();
        let mut inside = [true; 3];
        for d in 0..3 {
            let t = (x[d] - self.bounds_min[d]) / self.bounds_extent;
            if t <= 0.0 {
                out[d] = 0.0;
                inside[d] = false;
            } else if t >= 1.0 {
                out[d] = 1.0;
                inside[d] = false;
            } else {
                out[d] = t;
            }
        }
        (out, inside)
    }

    /// Table entry indices of the eight cell corners and the in-cell fraction.
    fn cell(&self, level: &Level, u: &Vec3) -> ([usize; 8], Vec3) {
        let res = level.resolution;
        let mut base = [0u32; 3];
        let mut frac = Vec3::zeros();
        for d in 0..3 {
            let p = u[d] * res as f64;
            let i = (p.floor() as u32).min(res - 1);
            base[d] = i;
            frac[d] = p - i as f64;
        }
        let side = res as usize + 1;
        let mut idx = [0usize; 8];
        for (c, slot) in idx.iter_mut().enumerate() {
            let corner = [
                base[0] + (c & 1) as u32,
                base[1] + ((c >> 1) & 1) as u32,
                base[2] + ((c >> 2) & 1) as u32,
            ];
            *slot = if level.dense {
                corner[0] as usize + side * (corner[1] as usize + side * corner[2] as usize)
            } else {
                let h = corner[0].wrapping_mul(PRIMES[0]) ^ corner[1].wrapping_mul(PRIMES[1]) ^ corner[2].wrapping_mul(PRIMES[2]);
                (h as usize) & (level.entries - 1)
            };
        }
        (idx, frac)
    }

    #[inline]
    fn corner_weight(frac: &Vec3, c: usize) -> f64 {
        let mut w = 1.0;
        for d in 0..3 {
            w *= if (c >> d) & 1 == 1 { frac[d] } else { 1.0 - frac[d] };
        }
        w
    }

    fn encode(&self, x: &Vec3, enc: &mut [f64]) {
        let (u, _) = self.normalize(x);
        let f = self.config.grid.features;
        for (l, level) in self.levels.iter().enumerate() {
            let (idx, frac) = self.cell(level, &u);
            let out = &mut enc[l * f..(l + 1) * f];
            out.fill(0.0);
            for (c, &e) in idx.iter().enumerate() {
                let w = Self::corner_weight(&frac, c);
                let entry = &self.params[level.offset + e * f..level.offset + (e + 1) * f];
                for k in 0..f {
                    out[k] += w * entry[k];
                }
            }
        }
    }

    /// Indices of table entries touched by a query at `x` on level `level`
    /// (relative to that level's table).
    pub fn touched_entries(&self, x: &Vec3, level: usize) -> [usize; 8] {
        let (u, _) = self.normalize(x);
        self.cell(&self.levels[level], &u).0
    }

    /// Parameter index of feature `k` of entry `entry` on `level`.
    pub fn table_param_index(&self, level: usize, entry: usize, k: usize) -> usize {
        self.levels[level].offset + entry * self.config.grid.features + k
    }

    pub fn level_resolution(&self, level: usize) -> u32 {
        self.levels[level].resolution
    }

    pub fn level_is_dense(&self, level: usize) -> bool {
        self.levels[level].dense
    }

    pub fn query(&self, x: &Vec3) -> FieldSample {
        let mut enc = vec![0.0; self.encoding_dim()];
        self.encode(x, &mut enc);
        let mut scratch = Vec::new();
        let s = mlp_forward(&self.params, &self.scale_head, &enc, &mut scratch);
        let c = mlp_forward(&self.params, &self.color_head, &enc, &mut scratch);
        FieldSample {
            scale: softplus(s[0]),
            color: Vec3::new(sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])),
        }
    }

    pub fn query_batch(&self, xs: &[Vec3]) -> Vec<FieldSample> {
        xs.par_iter().map(|x| self.query(x)).collect()
    }

    /// Backpropagate `dL/ds` and `dL/dc` at one point. Head gradients are
    /// added into `head_grad` (indexed from [`NeuralField::table_params`]),
    /// table gradients are appended to `table_grad` as `(param, value)`.
    /// Returns `dL/dx`.
    fn backward_point(&self, x: &Vec3, d_scale: f64, d_color: &Vec3, head_grad: &mut [f64], table_grad: &mut Vec<(u32, f64)>) -> Vec3 {
        let f = self.config.grid.features;
        let (u, inside) = self.normalize(x);
        let mut enc = vec![0.0; self.encoding_dim()];
        self.encode(x, &mut enc);
        let head_base = self.table_params();

        let mut d_enc = vec![0.0; enc.len()];
        let mut acts = Vec::new();
        if d_scale != 0.0 {
            let s = mlp_forward(&self.params, &self.scale_head, &enc, &mut acts)[0];
            let ds = d_scale * sigmoid(s);
            mlp_backward(&self.params, &self.scale_head, &acts, &[ds], head_grad, head_base, &mut d_enc);
        }
        if d_color.iter().any(|&g| g != 0.0) {
            let c = mlp_forward(&self.params, &self.color_head, &enc, &mut acts);
            let dc: Vec<f64> = (0..3)
                .map(|k| {
                    let y = sigmoid(c[k]);
                    d_color[k] * y * (1.0 - y)
                })
                .collect();
            mlp_backward(&self.params, &self.color_head, &acts, &dc, head_grad, head_base, &mut d_enc);
        }

        let mut dx = Vec3::zeros();
        for (l, level) in self.levels.iter().enumerate() {
            let g = &d_enc[l * f..(l + 1) * f];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (idx, frac) = self.cell(level, &u);
            let res = level.resolution as f64;
            for (c, &e) in idx.iter().enumerate() {
                let w = Self::corner_weight(&frac, c);
                let base = level.offset + e * f;
                let mut gdot = 0.0;
                for k in 0..f {
                    table_grad.push(((base + k) as u32, w * g[k]));
                    gdot += g[k] * self.params[base + k];
                }
                for d in 0..3 {
                    if !inside[d] {
                        continue;
                    }
                    let mut dw = if (c >> d) & 1 == 1 { 1.0 } else { -1.0 };
                    for o in 0..3 {
                        if o != d {
                            dw *= if (c >> o) & 1 == 1 { frac[o] } else { 1.0 - frac[o] };
                        }
                    }
                    dx[d] += dw * gdot * res / self.bounds_extent;
                }
            }
        }
        dx
    }

    /// Batched backward pass. Returns the dense parameter gradient and the
    /// per-point position gradient. Accumulation order is fixed, so results
    /// are bitwise reproducible regardless of thread count.
    pub fn backward_batch(&self, xs: &[Vec3], d_scale: &[f64], d_color: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
        const CHUNK: usize = 256;
        let head_base = self.table_params();
        let head_len = self.params.len() - head_base;
        let parts: Vec<(Vec<f64>, Vec<(u32, f64)>, Vec<Vec3>)> = xs
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut head = vec![0.0; head_len];
                let mut table = Vec::new();
                let mut dxs = Vec::with_capacity(chunk.len());
                for (j, x) in chunk.iter().enumerate() {
                    let i = ci * CHUNK + j;
                    dxs.push(self.backward_point(x, d_scale[i], &d_color[i], &mut head, &mut table));
                }
                (head, table, dxs)
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut dx = Vec::with_capacity(xs.len());
        for (head, table, dxs) in parts {
            for (g, h) in grad[head_base..].iter_mut().zip(&head) {
                *g += h;
            }
            for (i, v) in table {
                grad[i as usize] += v;
            }
            dx.extend(dxs);
        }
        (grad, dx)
    }
}

fn mlp_forward(params: &[f64], mlp: &Mlp, input: &[f64], acts: &mut Vec<Vec<f64>>) -> Vec<f64> {
    acts.clear();
    acts.push(input.to_vec());
    let n = mlp.layers.len();
    for (li, d) in mlp.layers.iter().enumerate() {
        let inp = acts.last().expect("input pushed");
        let w = &params[d.weights..d.weights + d.inputs * d.outputs];
        let b = &params[d.bias..d.bias + d.outputs];
        let mut out = b.to_vec();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &w[o * d.inputs..(o + 1) * d.inputs];
            *out_v += row.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>();
        }
        if li + 1 < n {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        acts.push(out);
    }
    acts.last().cloned().expect("mlp has layers")
}

/// `acts[i]` is the input of layer `i`; `acts[n]` the raw output.
fn mlp_backward(params: &[f64], mlp: &Mlp, acts: &[Vec<f64>], d_out: &[f64], grad: &mut [f64], grad_base: usize, d_input: &mut [f64]) {
    let mut g = d_out.to_vec();
    for (li, d) in mlp.layers.iter().enumerate().rev() {
        let inp = &acts[li];
        let w = &params[d.weights..d.weights + d.inputs * d.outputs];
        let mut g_in = vec![0.0; d.inputs];
        for o in 0..d.outputs {
            let go = g[o];
            if go == 0.0 {
                continue;
            }
            grad[d.bias - grad_base + o] += go;
            let wrow = d.weights - grad_base + o * d.inputs;
            for i in 0..d.inputs {
                grad[wrow + i] += go * inp[i];
                g_in[i] += go * w[o * d.inputs + i];
            }
        }
        if li > 0 {
            // ReLU of the previous layer: its output is this layer's input.
            for (gi, &a) in g_in.iter_mut().zip(inp) {
                if a <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        g = g_in;
    }
    for (di, gi) in d_input.iter_mut().zip(&g) {
        *di += gi;
    }
}

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iterations: usize,
    /// Nominal step length; the first iteration uses `lr · min(1, 1/‖g‖₁)`.
    pub lr: f64,
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            max_iterations: 40,
            lr: 1.0,
            grad_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LbfgsStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
    /// Objective value after each accepted iteration (index 0 is the start).
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

/// Minimizer of the cubic interpolating `(x1, f1, g1)` and `(x2, f2, g2)`,
/// clamped to `[lo, hi]`; falls back to the midpoint when the cubic has no
/// real minimizer.
fn cubic_min(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, lo: f64, hi: f64) -> f64 {
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct Probe {
    t: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    max_evals: usize,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> LineSearch<'_, F> {
    fn probe(&mut self, t: f64) -> Probe {
        self.evals += 1;
        let (f, g) = (self.f)(&axpy(self.x, t, self.d));
        let dphi = dot(&g, self.d);
        Probe { t, f, g, dphi }
    }

    fn armijo_fails(&self, p: &Probe) -> bool {
        !p.f.is_finite() || p.f > self.f0 + self.c1 * p.t * self.dphi0
    }

    fn curvature_ok(&self, p: &Probe) -> bool {
        p.dphi.abs() <= -self.c2 * self.dphi0
    }

    /// Strong-Wolfe search; returns the accepted probe or `None`.
    fn run(&mut self, t0: f64) -> Option<Probe> {
        let mut prev = Probe { t: 0.0, f: self.f0, g: Vec::new(), dphi: self.dphi0 };
        let mut t = t0;
        let mut first = true;
        while self.evals < self.max_evals {
            let cur = self.probe(t);
            if self.armijo_fails(&cur) || (!first && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature_ok(&cur) {
                return Some(cur);
            }
            if cur.dphi >= 0.0 {
                return self.zoom(cur, prev);
            }
            let lo = cur.t + 0.01 * (cur.t - prev.t);
            let hi = cur.t * 10.0;
            t = cubic_min(prev.t, prev.f, prev.dphi, cur.t, cur.f, cur.dphi, lo, hi);
            prev = cur;
            first = false;
        }
        None
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Option<Probe> {
        while self.evals < self.max_evals {
            let (a, b) = if lo.t < hi.t { (lo.t, hi.t) } else { (hi.t, lo.t) };
            let width = b - a;
            if width * norm(self.d) < 1e-14 {
                break;
            }
            let mut t = if hi.f.is_finite() {
                cubic_min(lo.t, lo.f, lo.dphi, hi.t, hi.f, hi.dphi, a, b)
            } else {
                0.5 * (a + b)
            };
            // Keep the trial point away from the bracket ends.
            if t < a + 0.1 * width || t > b - 0.1 * width {
                t = 0.5 * (a + b);
            }
            let cur = self.probe(t);
            if self.armijo_fails(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if self.curvature_ok(&cur) {
                    return Some(cur);
                }
                if cur.dphi * (hi.t - lo.t) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        // Accept the best sufficient-decrease point found, if any.
        if lo.t > 0.0 && !self.armijo_fails(&lo) {
            Some(lo)
        } else {
            None
        }
    }
}

/// Limited-memory BFGS with a strong-Wolfe line search. `f` returns the
/// objective value and gradient at a point.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], config: &LbfgsConfig) -> LbfgsReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut history = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.history);
    let mut status = LbfgsStatus::MaxIterations;
    let mut iterations = 0;

    if norm(&g) < config.grad_tol {
        status = LbfgsStatus::Converged;
    } else {
        while iterations < config.max_iterations {
            // Two-loop recursion.
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(pairs.len());
            for (s, y, rho) in pairs.iter().rev() {
                let a = rho * dot(s, &q);
                for (qi, yi) in q.iter_mut().zip(y) {
                    *qi -= a * yi;
                }
                alphas.push(a);
            }
            if let Some((s, y, _)) = pairs.back() {
                let gamma = dot(s, y) / dot(y, y);
                for qi in &mut q {
                    *qi *= gamma;
                }
            }
            for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(y, &q);
                for (qi, si) in q.iter_mut().zip(s) {
                    *qi += (a - b) * si;
                }
            }
            let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
            let mut dphi0 = dot(&g, &d);
            if !(dphi0 < 0.0) {
                pairs.clear();
                d = g.iter().map(|v| -v).collect();
                dphi0 = -dot(&g, &g);
            }

            let t0 = if iterations == 0 {
                let g1: f64 = g.iter().map(|v| v.abs()).sum();
                config.lr * (1.0f64).min(1.0 / g1)
            } else {
                config.lr
            };
            let mut ls = LineSearch {
                f: &mut f,
                x: &x,
                d: &d,
                f0: fx,
                dphi0,
                c1: config.c1,
                c2: config.c2,
                max_evals: config.max_line_search,
                evals: 0,
            };
            let accepted = ls.run(t0);
            evaluations += ls.evals;
            let Some(p) = accepted else {
                status = LbfgsStatus::LineSearchFailed;
                break;
            };
            let x_new = axpy(&x, p.t, &d);
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-10 * norm(&s) * norm(&y) && sy > 0.0 {
                if pairs.len() == config.history {
                    pairs.pop_front();
                }
                pairs.push_back((s, y, 1.0 / sy));
            }
            x = x_new;
            fx = p.f;
            g = p.g;
            iterations += 1;
            history.push(fx);
            if norm(&g) < config.grad_tol {
                status = LbfgsStatus::Converged;
                break;
            }
        }
    }
    LbfgsReport {
        grad_norm: norm(&g),
        x,
        value: fx,
        iterations,
        evaluations,
        status,
        history,
    }
}

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    skipped: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Adam { config, m: vec![0.0; len], v: vec![0.0; len], step: 0, skipped: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of steps skipped because the gradient was not finite.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Advance the moments and return the additive parameter update, or
    /// `None` (state untouched) when any gradient entry is non-finite.
    pub fn update(&mut self, grads: &[f64], lr: f64) -> Option<Vec<f64>> {
        assert_eq!(grads.len(), self.m.len(), "gradient length does not match the parameter group");
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient, skipping Adam step ({} skipped so far)", self.skipped);
            return None;
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut delta = Vec::with_capacity(grads.len());
        for ((m, v), &g) in self.m.iter_mut().zip(&mut self.v).zip(grads) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            delta.push(-lr * m_hat / (v_hat.sqrt() + eps));
        }
        Some(delta)
    }

    /// Update `params` in place. Returns false when the step was skipped.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> bool {
        match self.update(grads, lr) {
            Some(delta) => {
                for (p, d) in params.iter_mut().zip(delta) {
                    *p += d;
                }
                true
            }
            None => false,
        }
    }
}

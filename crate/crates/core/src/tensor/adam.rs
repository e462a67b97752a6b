use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are keyed by parameter position, so the
/// same slice order must be passed on every step.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update to every trainable tensor that holds a gradient.
    /// Tensors without `requires_grad` are never touched.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (slot, p) in params.into_iter().enumerate() {
            if self.m.len() <= slot {
                self.m.push(vec![0.0; p.data.len()]);
                self.v.push(vec![0.0; p.data.len()]);
            }
            if self.m[slot].len() != p.data.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape.clone(),
                    right: vec![self.m[slot].len()],
                });
            }
            if !p.requires_grad {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            if g.len() != p.data.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape.clone(),
                    right: vec![g.len()],
                });
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

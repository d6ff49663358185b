//! AdamW with the AMSGrad max-second-moment rule, plus global gradient
//! clipping.

use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            eps: 1e-10,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

/// Per-parameter moments and the step counter.
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        let slots = params
            .iter()
            .map(|p| {
                let n = p.numel();
                Slot { m: vec![0.0; n], v: vec![0.0; n], v_max: vec![0.0; n] }
            })
            .collect();
        OptimizerState { config, step: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Elementwise max second moment for parameter `i` (monotone across steps).
    pub fn max_second_moment(&self, i: usize) -> &[f64] {
        &self.slots[i].v_max
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.slots[i].v
    }

    /// One decoupled-weight-decay AMSGrad update. Parameters with no gradient
    /// are skipped entirely (no decay either).
    pub fn step(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.slots.len(), "optimizer/parameter mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (p, slot) in params.iter().zip(&mut self.slots) {
            let Some(grad) = p.grad() else { continue };
            p.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    data[i] -= c.lr * c.weight_decay * data[i];
                    slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
                    slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
                    slot.v_max[i] = slot.v_max[i].max(slot.v[i]);
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v_max[i] / bc2;
                    data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            });
        }
    }
}

/// Scales all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(params: &[Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params {
            p.with_grad_mut(|slot| {
                if let Some(g) = slot.as_mut() {
                    for x in g.iter_mut() {
                        *x *= s;
                    }
                }
            });
        }
    }
    norm
}

//! AdamW with decoupled weight decay and global-norm clipping.

use super::params::Layout;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Completed updates.
    pub step: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

pub fn global_norm<T: Real>(grads: &[T]) -> f64 {
    grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm` (no-op when
/// `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

impl AdamW {
    /// One update. Decay is applied only to tensors whose layout entry asks
    /// for it.
    pub fn update(&self, layout: &Layout, params: &mut [f32], grads: &[f32], state: &mut OptState) {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for info in &layout.tensors {
            let decay = if info.decay {
                (1.0 - self.lr * self.weight_decay) as f32
            } else {
                1.0
            };
            for i in info.span.range() {
                let g = grads[i];
                let m = b1 * state.m[i] + (1.0 - b1) * g;
                let v = b2 * state.v[i] + (1.0 - b2) * g * g;
                state.m[i] = m;
                state.v[i] = v;
                params[i] = params[i] * decay - step_size * m / ((v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{ModelConfig, Params};

    fn tiny() -> Params<f32> {
        let cfg = ModelConfig {
            k: 4,
            n_q: 1,
            d_a: 4,
            d_v: 4,
            d_raw: 2,
            d_vis_hidden: 2,
            n_layer: 1,
            n_head: 2,
            ..ModelConfig::default()
        };
        Params::init(&cfg, 1).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = tiny();
        let opt = AdamW {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut data = p.data.clone();
        let grads: Vec<f32> = (0..data.len()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        let mut st = OptState::new(data.len());
        opt.update(&p.layout, &mut data, &grads, &mut st);
        for i in 0..data.len() {
            let expected = p.data[i] - 1e-2 * grads[i].signum();
            assert!((data[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn decay_only_touches_flagged_tensors() {
        let p = tiny();
        let opt = AdamW {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.5,
        };
        let mut data = p.data.clone();
        let grads = vec![0.0; data.len()];
        let mut st = OptState::new(data.len());
        opt.update(&p.layout, &mut data, &grads, &mut st);
        for t in &p.layout.tensors {
            let f = if t.decay { 0.95 } else { 1.0 };
            for i in t.span.range() {
                assert!((data[i] - p.data[i] * f).abs() < 1e-6, "{}", t.name);
            }
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut h = vec![0.3f32, 0.4];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h, vec![0.3, 0.4]);
    }
}

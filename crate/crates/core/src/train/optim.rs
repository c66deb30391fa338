//! Adam with bias correction, global-norm clipping and plateau decay.

use crate::model::ParamSet;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub batch: usize,
    /// Linear lr ramp over this many optimizer steps.
    pub warmup_steps: u64,
    /// Multiply lr by this factor when dev BLEU plateaus.
    pub plateau_factor: f64,
    /// Evaluations without improvement before the lr drops.
    pub plateau_patience: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: 1.0,
            batch: 16,
            warmup_steps: 200,
            plateau_factor: 0.7,
            plateau_patience: 3,
        }
    }
}

/// Serializable Adam state, keyed by parameter order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

pub struct Adam {
    pub state: AdamState,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: &OptimConfig) -> Self {
        let m = params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Adam { state: AdamState { m, v, t: 0 }, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps }
    }

    pub fn with_state(state: AdamState, cfg: &OptimConfig) -> Self {
        Adam { state, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps }
    }

    /// One update. `grads[id]` holds the raw accumulated gradient for
    /// parameter `id`; `scale` folds in batch averaging and clipping.
    /// Untrainable parameters and absent gradients are skipped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>], lr: f64, scale: f64) {
        self.state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.state.t as i32);
        for id in 0..grads.len() {
            let Some(g) = &grads[id] else { continue };
            if !params.get(id).trainable {
                continue;
            }
            let m = &mut self.state.m[id];
            let v = &mut self.state.v[id];
            let data = params.get_mut(id).tensor.data_mut();
            for ((w, gi), (mi, vi)) in
                data.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let grad = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * grad;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * grad * grad;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm of the scaled gradients; returns the extra factor that
/// brings the norm down to `max_norm` (1.0 when within bounds or disabled).
pub fn clip_factor(grads: &[Option<Vec<f64>>], scale: f64, max_norm: f64) -> f64 {
    if max_norm <= 0.0 {
        return 1.0;
    }
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for v in g {
            let s = v * scale;
            sq += s * s;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param() -> ParamSet {
        let mut p = ParamSet::default();
        p.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        p
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut params = one_param();
        let cfg = OptimConfig::default();
        let mut adam = Adam::new(&params, &cfg);
        let grads = vec![Some(vec![1.0, -1.0])];
        adam.step(&mut params, &grads, 0.1, 1.0);
        let d = params.by_name("w").tensor.data();
        assert!(d[0] < 1.0, "positive gradient must decrease the weight");
        assert!(d[1] > -2.0, "negative gradient must increase the weight");
    }

    #[test]
    fn frozen_params_are_not_updated() {
        let mut params = ParamSet::default();
        params.insert("frozen", Tensor::new(vec![1], vec![5.0]).unwrap(), false);
        let cfg = OptimConfig::default();
        let mut adam = Adam::new(&params, &cfg);
        adam.step(&mut params, &[Some(vec![10.0])], 0.5, 1.0);
        assert_eq!(params.by_name("frozen").tensor.data(), &[5.0]);
    }

    #[test]
    fn clip_factor_caps_large_gradients() {
        let grads = vec![Some(vec![3.0, 4.0])]; // norm 5
        assert!((clip_factor(&grads, 1.0, 1.0) - 0.2).abs() < 1e-12);
        assert_eq!(clip_factor(&grads, 1.0, 10.0), 1.0);
        assert_eq!(clip_factor(&grads, 1.0, 0.0), 1.0, "disabled");
    }

    #[test]
    fn adam_state_roundtrips_through_json() {
        let mut params = one_param();
        let cfg = OptimConfig::default();
        let mut adam = Adam::new(&params, &cfg);
        adam.step(&mut params, &[Some(vec![0.3, 0.7])], 0.01, 1.0);
        let js = serde_json::to_string(&adam.state).unwrap();
        let back: AdamState = serde_json::from_str(&js).unwrap();
        assert_eq!(back.t, adam.state.t);
        for (a, b) in back.m[0].iter().zip(&adam.state.m[0]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

use std::f64::consts::PI;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW with decoupled weight decay. Moments are created lazily for the
/// parameters that actually receive gradients.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor<F>>>,
    second: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self { config, step: 0, first: vec![None; num_params], second: vec![None; num_params] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)], lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let (ob1, ob2) = (F::c(1.0 - c.beta1), F::c(1.0 - c.beta2));
        let step_size = F::c(lr / bc1);
        let bc2_sqrt = F::c(bc2.sqrt());
        let eps = F::c(c.eps);
        let decay = F::c(1.0 - lr * c.weight_decay);
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(*id);
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for (((w, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                let denom = vv.sqrt() / bc2_sqrt + eps;
                *w = *w * decay - step_size * *mv / denom;
            }
        }
    }

    /// Moment tensors keyed by parameter index, for checkpointing.
    pub fn state(&self) -> (u64, &[Option<Tensor<F>>], &[Option<Tensor<F>>]) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(
        config: AdamWConfig,
        step: u64,
        first: Vec<Option<Tensor<F>>>,
        second: Vec<Option<Tensor<F>>>,
    ) -> Self {
        assert_eq!(first.len(), second.len(), "moment vectors differ in length");
        Self { config, step, first, second }
    }
}

/// Cosine-annealed learning rate decaying from `base` at step 0 to `floor`
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base: f64, total_steps: u64) -> Self {
        Self { base, floor: 0.0, total_steps }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (PI * frac).cos())
    }
}

/// Rescales gradients in place so that their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [(ParamId, Tensor<F>)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = F::c(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

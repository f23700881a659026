//! AdamW with decoupled weight decay.

use hwg_autograd::{ParamSet, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    /// Zeroed moments shaped like `params`.
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores saved moments. Shapes must match `params`.
    pub fn from_state(cfg: &TrainConfig, params: &ParamSet, steps: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        let mut opt = Self::new(cfg, params);
        if m.len() != opt.m.len() || v.len() != opt.v.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer state has {} moments, model has {} parameters",
                m.len(),
                opt.m.len()
            )));
        }
        for (i, (a, b)) in m.iter().zip(&v).enumerate() {
            if a.shape() != opt.m[i].shape() || b.shape() != opt.m[i].shape() {
                return Err(Error::Shape(format!(
                    "optimizer moment {i} has shape {:?}, parameter has {:?}",
                    a.shape(),
                    opt.m[i].shape()
                )));
            }
        }
        opt.steps = steps;
        opt.m = m;
        opt.v = v;
        Ok(opt)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update of every parameter. Decay shrinks the parameter directly
    /// and never enters the moment estimates.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let shrink = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = p[i] * shrink - lr * update;
            }
        }
    }
}

/// Euclidean norm over a list of gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm` of 0 leaves them untouched.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

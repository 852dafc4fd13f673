//! AdamW with an optional cosine learning-rate decay.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

impl Schedule {
    /// Learning rate for 0-based `step` out of `total`. Cosine decays from
    /// `base` at step 0 toward 0 at step `total`.
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (PI * t).cos())
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::config(format!("unknown schedule '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Decoupled weight decay: `p ← p·(1 − lr·wd)` then the bias-corrected Adam
/// step `p ← p − lr·m̂/(√v̂ + ε)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    precision: Precision,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: &[usize], precision: Precision) -> Self {
        AdamW {
            cfg,
            precision,
            moments: sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update over every group. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f64]>], lr: f64) {
        assert_eq!(params.len(), self.moments.len());
        assert_eq!(grads.len(), self.moments.len());
        self.begin_step();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, *g, lr);
        }
    }

    /// Advances the step counter; follow with one [`AdamW::update`] per group.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, group: usize, p: &mut Tensor, g: Option<&[f64]>, lr: f64) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        assert!(self.t > 0, "update before begin_step");
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let prec = self.precision;
        let (m, v) = &mut self.moments[group];
        let data = p.data_mut();
        assert_eq!(data.len(), m.len());
        for i in 0..data.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = prec.round(beta1 * m[i] + (1.0 - beta1) * gi);
            v[i] = prec.round(beta2 * v[i] + (1.0 - beta2) * gi * gi);
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let decayed = data[i] * (1.0 - lr * weight_decay);
            data[i] = prec.round(decayed - lr * mhat / (vhat.sqrt() + eps));
        }
    }
}

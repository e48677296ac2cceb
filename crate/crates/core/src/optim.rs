//! AdamW, gradient clipping and learning-rate schedules.

use alloc::vec::Vec;

use crate::config::{AdamWConfig, RunConfig, Schedule};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Matrix;

/// Learning rate at `step`.
///
/// `LinearCosine` ramps linearly from 0 to the peak over the warmup, then
/// follows a half cosine down to `peak · min_lr_ratio` at `total_steps`.
/// `Cosine` starts the half cosine at the peak on step 0.
pub fn lr_schedule(step: u64, run: &RunConfig) -> f64 {
    let peak = run.peak_lr;
    let floor = peak * run.min_lr_ratio;
    let total = run.total_steps.max(1);
    let cosine = |from: u64| {
        let span = total.saturating_sub(from).max(1) as f64;
        let progress = (step.saturating_sub(from) as f64 / span).min(1.0);
        floor + 0.5 * (peak - floor) * (1.0 + libm::cos(core::f64::consts::PI * progress))
    };
    match run.schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => cosine(0),
        Schedule::LinearCosine => {
            if step < run.warmup_steps {
                peak * step as f64 / run.warmup_steps as f64
            } else {
                cosine(run.warmup_steps)
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// AdamW with decoupled weight decay. Decay skips row-vector parameters
/// (biases, norm gains) and anything else with a single row.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    weight_decay: f64,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, weight_decay: f64) -> Self {
        Self { cfg, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. A zero learning rate
    /// leaves every parameter bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let AdamWConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let p = store.get_mut(id);
            let decay = if p.rows() > 1 { self.weight_decay } else { 0.0 };
            if lr == 0.0 {
                for ((mi, vi), gi) in m.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                }
                continue;
            }
            for (((pi, mi), vi), gi) in
                p.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g.as_slice())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = (*mi / bc1) / (libm::sqrt(*vi / bc2) + eps);
                *pi -= lr * (update + decay * *pi);
            }
        }
    }
}

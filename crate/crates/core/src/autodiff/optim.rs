use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Adam moment accumulators for a fixed list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// One accumulator pair per parameter buffer of the given length.
    pub fn new(lens: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores accumulators saved with [`AdamState::moments`].
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let lens = |x: &[Vec<f64>]| x.iter().map(Vec::len).collect::<Vec<_>>();
        if lens(&m) != lens(&self.m) || lens(&v) != lens(&self.v) {
            return Err(Error::invalid("optimizer state does not match parameter layout"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected Adam update over raw buffers.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        self.update_with(params, grads, |_, _| lr)
    }

    /// Like [`AdamState::update`] with a rate per (buffer, element).
    pub fn update_with(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        rate: impl Fn(usize, usize) -> f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam state tracks {} buffers, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![self.m[i].len()],
                    rhs: vec![p.len(), g.len()],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= rate(i, j) * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Adam update over tensors; `grads[i]` must match `params[i]` in shape.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let mut ps: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data_mut()).collect();
    let gs: Vec<&[f64]> = grads.iter().map(|t| t.data()).collect();
    state.update(&mut ps, &gs, lr)
}

/// Cosine annealing from `lr_start` to `lr_end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> Result<f64> {
        cosine_lr(self, step)
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, step: usize) -> Result<f64> {
    if schedule.total_steps == 0 {
        return Err(Error::invalid("cosine schedule needs total_steps >= 1"));
    }
    if step > schedule.total_steps {
        return Err(Error::invalid(format!(
            "step {step} outside schedule of {} steps",
            schedule.total_steps
        )));
    }
    if step == schedule.total_steps {
        return Ok(schedule.lr_end);
    }
    let progress = step as f64 / schedule.total_steps as f64;
    Ok(schedule.lr_end
        + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

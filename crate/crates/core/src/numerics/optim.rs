//! SGD with momentum under a linear-warmup / cosine-annealing schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Learning-rate curve: linear ramp from 0 over `warmup_steps`, then a
/// half-cosine from `base_lr` down to 0 at the last step, `total_steps - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps + 1);
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps).min(span) as f64 / span as f64;
        // clamp guards the last few ulps of cos(pi) below -1
        (self.base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub step_index: usize,
    pub schedule: WarmupCosine,
    pub momentum: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Fresh state with zeroed velocity buffers shaped like `params`.
    pub fn new<'a>(
        schedule: WarmupCosine,
        momentum: f64,
        params: impl IntoIterator<Item = &'a Tensor<T>>,
    ) -> Result<Self> {
        if schedule.base_lr.is_nan() || schedule.base_lr <= 0.0 || schedule.total_steps == 0 {
            return Err(Error::Usage(format!(
                "optimizer needs base_lr > 0 and total_steps > 0, got {schedule:?}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Usage(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            step_index: 0,
            schedule,
            momentum,
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step_index)
    }

    /// One momentum-SGD update: `v ← momentum·v + g`, `p ← p − lr·v`.
    /// Returns the learning rate that was applied.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<f64> {
        if self.step_index >= self.schedule.total_steps {
            return Err(Error::Usage(format!(
                "optimizer already ran all {} steps",
                self.schedule.total_steps
            )));
        }
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Usage(format!(
                "{} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(&self.velocity).enumerate() {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::Usage(format!(
                    "tensor {i}: param {:?}, grad {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
        }
        let lr_f64 = self.current_lr();
        let lr = T::from_f64_lossy(lr_f64);
        let mu = T::from_f64_lossy(self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        self.step_index += 1;
        Ok(lr_f64)
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn sgd_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
) -> Result<f64> {
    state.step(params, grads)
}

//! Adaptive-moment optimizer with warmup schedules and gradient clipping.

use super::{Real, TensorError};

/// Learning-rate schedule evaluated per optimizer step (1-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear warmup to `base`, then decay proportional to 1/sqrt(step).
    InverseSqrt { base: f64, warmup: u64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::InverseSqrt { base, warmup } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                base * (s / w).min((w / s).sqrt())
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn constant(lr: f64) -> Self {
        AdamConfig {
            schedule: LrSchedule::Constant(lr),
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            schedule: LrSchedule::Constant(1e-3),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state over a fixed list of parameter tensors (matched by position).
pub struct Adam<F: Real> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.schedule.at(self.step.max(1))
    }

    /// One update over all parameter tensors. Bit-reproducible for a fixed
    /// sequence of gradients.
    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[Vec<F>]) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![self.m.len()],
            });
        }
        self.step += 1;
        let lr = F::of(self.cfg.schedule.at(self.step));
        let b1 = F::of(self.cfg.beta1);
        let b2 = F::of(self.cfg.beta2);
        let eps = F::of(self.cfg.eps);
        let corr1 = F::of(1.0 - self.cfg.beta1.powi(self.step as i32));
        let corr2 = F::of(1.0 - self.cfg.beta2.powi(self.step as i32));
        for (i, p) in params.iter_mut().enumerate() {
            if p.len() != self.m[i].len() || grads[i].len() != self.m[i].len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![p.len()],
                    rhs: vec![self.m[i].len()],
                });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = &grads[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

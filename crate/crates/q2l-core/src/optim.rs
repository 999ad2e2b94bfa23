//! Parameter updates: Adam with decoupled weight decay, an exponential
//! moving average of parameters, and the warmup-plus-cosine step size.
//!
//! The optimizer works on flat parameter buffers in the model's canonical
//! order; moments are stored at model precision while bias correction is
//! computed in f64 so tiny 1-beta2 values survive f32 training.

use thiserror::Error;

use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("buffer count mismatch: state has {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("buffer {index} has {got} values, expected {expected}")]
    ShapeMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("step counter overflow")]
    StepOverflow,
}

/// Adam hyperparameters with decoupled decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.9999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState<S: Scalar> {
    pub cfg: OptimConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(cfg: OptimConfig, params: &[Vec<S>]) -> Self {
        OptimState {
            cfg,
            m: params.iter().map(|p| vec![S::ZERO; p.len()]).collect(),
            v: params.iter().map(|p| vec![S::ZERO; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update at step size `lr`:
    /// m <- b1 m + (1-b1) g, v <- b2 v + (1-b2) g^2, both bias-corrected,
    /// then theta <- theta - lr m^ / (sqrt(v^) + eps) - lr wd theta.
    pub fn step(
        &mut self,
        params: &mut [Vec<S>],
        grads: &[Vec<S>],
        lr: f64,
    ) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::CountMismatch {
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[index].len() || g.len() != self.m[index].len() {
                return Err(OptimError::ShapeMismatch {
                    index,
                    expected: self.m[index].len(),
                    got: if p.len() != self.m[index].len() {
                        p.len()
                    } else {
                        g.len()
                    },
                });
            }
        }
        self.t = self.t.checked_add(1).ok_or(OptimError::StepOverflow)?;
        let t = self.t as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let mc = S::from_f64(1.0 / (1.0 - b1.powi(t)));
        let vc = S::from_f64(1.0 / (1.0 - b2.powi(t)));
        let (b1s, b2s) = (S::from_f64(b1), S::from_f64(b2));
        let (b1c, b2c) = (S::from_f64(1.0 - b1), S::from_f64(1.0 - b2));
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(self.cfg.eps);
        let decay = S::from_f64(lr * self.cfg.weight_decay);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            for i in 0..p.len() {
                m[i] = b1s * m[i] + b1c * g[i];
                v[i] = b2s * v[i] + b2c * g[i] * g[i];
                let update = lr_s * (m[i] * mc) / ((v[i] * vc).sqrt() + eps);
                p[i] = p[i] - update - decay * p[i];
            }
        }
        Ok(())
    }
}

/// Shadow copy of the parameters, pulled toward them after every step.
#[derive(Debug, Clone)]
pub struct EmaState<S: Scalar> {
    pub decay: f64,
    pub shadow: Vec<Vec<S>>,
}

impl<S: Scalar> EmaState<S> {
    pub fn new(decay: f64, params: &[Vec<S>]) -> Self {
        EmaState {
            decay,
            shadow: params.to_vec(),
        }
    }

    /// shadow <- mu shadow + (1-mu) params.
    pub fn update(&mut self, params: &[Vec<S>]) -> Result<(), OptimError> {
        if params.len() != self.shadow.len() {
            return Err(OptimError::CountMismatch {
                expected: self.shadow.len(),
                got: params.len(),
            });
        }
        let mu = S::from_f64(self.decay);
        let inv = S::from_f64(1.0 - self.decay);
        for (index, (s, p)) in self.shadow.iter_mut().zip(params).enumerate() {
            if s.len() != p.len() {
                return Err(OptimError::ShapeMismatch {
                    index,
                    expected: s.len(),
                    got: p.len(),
                });
            }
            for i in 0..s.len() {
                s[i] = mu * s[i] + inv * p[i];
            }
        }
        Ok(())
    }
}

/// Step size at `step` of `total_steps`: linear warmup over the first
/// `warmup_frac` of steps, then cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warmup = ((total_steps as f64 * warmup_frac).ceil() as usize).min(total_steps);
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

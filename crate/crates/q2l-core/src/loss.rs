//! Asymmetric focal objective for multi-label probabilities.
//!
//! Positive and negative terms carry separate focusing exponents so the many
//! easy negatives in a multi-label batch can be down-weighted independently
//! of the positives. Defaults keep the positive term as plain log loss and
//! give negatives a single focusing power. Written as a minimized loss: both
//! log terms enter with a leading minus.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("probabilities have length {p}, labels {y}")]
    LengthMismatch { p: usize, y: usize },
    #[error("label at index {index} is {value}, expected 0 or 1")]
    NonBinaryLabel { index: usize, value: f64 },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Focusing exponents and the probability clamp applied before any log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Exponent on (1-p) for positive labels.
    pub gamma_pos: f64,
    /// Exponent on p for negative labels.
    pub gamma_neg: f64,
    /// Probabilities are clamped to [eps, 1-eps].
    pub prob_clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 1.0,
            prob_clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(LossError::InvalidConfig(format!(
                "focusing exponents must be nonnegative, got ({}, {})",
                self.gamma_pos, self.gamma_neg
            )));
        }
        if !(self.prob_clamp_eps > 0.0 && self.prob_clamp_eps <= 1e-3) {
            return Err(LossError::InvalidConfig(format!(
                "prob_clamp_eps must lie in (0, 1e-3], got {}",
                self.prob_clamp_eps
            )));
        }
        Ok(())
    }
}

fn check_pair<S: Scalar>(p: &[S], y: &[S], cfg: &LossConfig) -> Result<(), LossError> {
    cfg.validate()?;
    if p.len() != y.len() || p.is_empty() {
        return Err(LossError::LengthMismatch {
            p: p.len(),
            y: y.len(),
        });
    }
    for (index, &v) in y.iter().enumerate() {
        if v != S::ZERO && v != S::ONE {
            return Err(LossError::NonBinaryLabel {
                index,
                value: v.to_f64(),
            });
        }
    }
    Ok(())
}

fn clamp_unit<S: Scalar>(p: S, eps: S) -> S {
    p.max_v(eps).min_v(S::ONE - eps)
}

/// Reference evaluation on plain slices:
/// L = -(1/K) sum_k [ y_k (1-p_k)^g+ log p_k + (1-y_k) p_k^g- log(1-p_k) ].
pub fn asymmetric_loss<S: Scalar>(p: &[S], y: &[S], cfg: &LossConfig) -> Result<S, LossError> {
    check_pair(p, y, cfg)?;
    let eps = S::from_f64(cfg.prob_clamp_eps);
    let (gp, gn) = (S::from_f64(cfg.gamma_pos), S::from_f64(cfg.gamma_neg));
    let mut acc = S::ZERO;
    for (&pk, &yk) in p.iter().zip(y) {
        let pc = clamp_unit(pk, eps);
        acc += if yk == S::ONE {
            (S::ONE - pc).powf(gp) * pc.ln()
        } else {
            pc.powf(gn) * (S::ONE - pc).ln()
        };
    }
    Ok(-acc / S::from_f64(p.len() as f64))
}

/// Closed-form dL/dp_k, differentiating through the clamped value.
pub fn loss_grad_wrt_p<S: Scalar>(
    p: &[S],
    y: &[S],
    cfg: &LossConfig,
) -> Result<Vec<S>, LossError> {
    check_pair(p, y, cfg)?;
    let eps = S::from_f64(cfg.prob_clamp_eps);
    let scale = -S::ONE / S::from_f64(p.len() as f64);
    let (gp, gn) = (S::from_f64(cfg.gamma_pos), S::from_f64(cfg.gamma_neg));
    let grads = p
        .iter()
        .zip(y)
        .map(|(&pk, &yk)| {
            let pc = clamp_unit(pk, eps);
            let q = S::ONE - pc;
            let mut inner = if yk == S::ONE {
                // d/dp [(1-p)^g+ log p] = (1-p)^g+ / p - g+ (1-p)^(g+-1) log p
                let mut v = q.powf(gp) / pc;
                if cfg.gamma_pos > 0.0 {
                    v = v - gp * q.powf(gp - S::ONE) * pc.ln();
                }
                v
            } else {
                // d/dp [p^g- log(1-p)] = g- p^(g--1) log(1-p) - p^g- / (1-p)
                let mut v = -(pc.powf(gn) / q);
                if cfg.gamma_neg > 0.0 {
                    v = v + gn * pc.powf(gn - S::ONE) * q.ln();
                }
                v
            };
            inner = inner * scale;
            inner
        })
        .collect();
    Ok(grads)
}

/// Differentiable loss node over a [K] probability tensor; backward reaches
/// whatever produced `probs`.
pub fn asymmetric_loss_graph<S: Scalar>(
    probs: &Tensor<S>,
    y: &[S],
    cfg: &LossConfig,
) -> Result<Tensor<S>, LossError> {
    check_pair(probs.data(), y, cfg)?;
    let k = y.len();
    let eps = S::from_f64(cfg.prob_clamp_eps);
    let (gp, gn) = (S::from_f64(cfg.gamma_pos), S::from_f64(cfg.gamma_neg));
    let yt = Tensor::from_vec(&[k], y.to_vec())?;
    let y_inv = yt.neg().add_scalar(S::ONE);
    let pc = probs.clamp(eps, S::ONE - eps);
    let p_inv = pc.neg().add_scalar(S::ONE);
    let pos = yt.mul(&p_inv.powf(gp))?.mul(&pc.ln())?;
    let neg = y_inv.mul(&pc.powf(gn))?.mul(&p_inv.ln())?;
    Ok(pos
        .add(&neg)?
        .sum_all()
        .mul_scalar(-S::ONE / S::from_f64(k as f64)))
}

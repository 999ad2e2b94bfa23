//! Scaled dot-product multi-head attention and the position-wise FFN.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("width {d} not divisible by head count {n_heads}")]
    HeadSplit { d: usize, n_heads: usize },
}

/// Weights of one attention block. All projections are `[d, d]` acting on
/// row vectors (`x . W + b`); biases are optional as a set.
#[derive(Debug, Clone)]
pub struct MultiHeadParams<S: Scalar> {
    pub n_heads: usize,
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub b_q: Option<Tensor<S>>,
    pub b_k: Option<Tensor<S>>,
    pub b_v: Option<Tensor<S>>,
    pub b_o: Option<Tensor<S>>,
}

impl<S: Scalar> MultiHeadParams<S> {
    /// Model width, read off the query projection.
    pub fn d(&self) -> usize {
        self.w_q.shape()[0]
    }
}

fn project<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Option<Tensor<S>>,
) -> Result<Tensor<S>, TensorError> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add_rowwise(b),
        None => Ok(y),
    }
}

/// Attention internals exposed for instrumentation: the projected value
/// matrix actually fed to the weighted sum (detached copy).
pub struct AttentionTrace<S: Scalar> {
    pub value_proj: Tensor<S>,
}

fn mha_core<S: Scalar>(
    query: &Tensor<S>,
    key: &Tensor<S>,
    value: &Tensor<S>,
    params: &MultiHeadParams<S>,
) -> Result<(Tensor<S>, Tensor<S>, AttentionTrace<S>), AttnError> {
    let d = params.d();
    if params.n_heads == 0 || d % params.n_heads != 0 {
        return Err(AttnError::HeadSplit {
            d,
            n_heads: params.n_heads,
        });
    }
    let shape_err = |lhs: &Tensor<S>, rhs: &Tensor<S>| {
        AttnError::Tensor(TensorError::DimensionMismatch {
            op: "multi_head_attention",
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })
    };
    if key.shape() != value.shape() {
        return Err(shape_err(key, value));
    }
    if query.shape().len() != 2 || query.shape()[1] != d {
        return Err(shape_err(query, &params.w_q));
    }
    if key.shape().len() != 2 || key.shape()[1] != d {
        return Err(shape_err(key, &params.w_k));
    }
    let n_q = query.shape()[0];
    let n_k = key.shape()[0];
    let d_h = d / params.n_heads;
    let scale = S::from_f64(1.0 / (d_h as f64).sqrt());

    let q = project(query, &params.w_q, &params.b_q)?;
    let k = project(key, &params.w_k, &params.b_k)?;
    let v = project(value, &params.w_v, &params.b_v)?;

    let mut head_outs = Vec::with_capacity(params.n_heads);
    let mut weights_data = Vec::with_capacity(params.n_heads * n_q * n_k);
    for h in 0..params.n_heads {
        let lo = h * d_h;
        let hi = lo + d_h;
        let q_h = q.slice(1, lo, hi)?;
        let k_h = k.slice(1, lo, hi)?;
        let v_h = v.slice(1, lo, hi)?;
        let scores = q_h.matmul(&k_h.transpose()?)?.mul_scalar(scale);
        let att = scores.softmax(1)?;
        weights_data.extend_from_slice(att.data());
        head_outs.push(att.matmul(&v_h)?);
    }
    let refs: Vec<&Tensor<S>> = head_outs.iter().collect();
    let out = project(&Tensor::concat(1, &refs)?, &params.w_o, &params.b_o)?;
    let weights = Tensor::from_vec(&[params.n_heads, n_q, n_k], weights_data)
        .expect("weights sized by construction");
    let trace = AttentionTrace {
        value_proj: v.detached(),
    };
    Ok((out, weights, trace))
}

/// Scaled dot-product attention over `n_heads` parallel heads.
///
/// Returns the attended output `[n_q, d]` and a detached copy of the
/// per-head attention weights `[n_heads, n_q, n_k]` for visualization.
/// No attention mask is applied anywhere.
pub fn multi_head_attention<S: Scalar>(
    query: &Tensor<S>,
    key: &Tensor<S>,
    value: &Tensor<S>,
    params: &MultiHeadParams<S>,
) -> Result<(Tensor<S>, Tensor<S>), AttnError> {
    mha_core(query, key, value, params).map(|(out, w, _)| (out, w))
}

/// [`multi_head_attention`] plus an [`AttentionTrace`] of the internals.
pub fn multi_head_attention_traced<S: Scalar>(
    query: &Tensor<S>,
    key: &Tensor<S>,
    value: &Tensor<S>,
    params: &MultiHeadParams<S>,
) -> Result<(Tensor<S>, Tensor<S>, AttentionTrace<S>), AttnError> {
    mha_core(query, key, value, params)
}

/// Position-wise feed-forward net: `relu(x.W1 + b1).W2 + b2`, row by row.
#[derive(Debug, Clone)]
pub struct FfnParams<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

pub fn ffn<S: Scalar>(x: &Tensor<S>, params: &FfnParams<S>) -> Result<Tensor<S>, AttnError> {
    Ok(x
        .matmul(&params.w1)?
        .add_rowwise(&params.b1)?
        .relu()
        .matmul(&params.w2)?
        .add_rowwise(&params.b2)?)
}

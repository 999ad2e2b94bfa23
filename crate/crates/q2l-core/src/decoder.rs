//! Transformer decoder layer that updates label queries against spatial
//! features, plus the optional pre-decoder encoder layer.
//!
//! Sublayer order per layer: self-attention over the queries, cross-attention
//! from queries to features, position-wise FFN. Post-norm residuals
//! throughout (sublayer, add residual, layer-norm). Position encodings are
//! added to queries and keys only; values always enter attention raw.

use crate::attention::{
    ffn, multi_head_attention_traced, AttnError, FfnParams, MultiHeadParams,
};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Layer-norm epsilon used by every normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Trainable gain and bias of one layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormParams<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        x.layer_norm(&self.gain, &self.bias, S::from_f64(LN_EPS))
    }
}

/// All weights of one decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderLayerParams<S: Scalar> {
    pub self_attn: MultiHeadParams<S>,
    pub cross_attn: MultiHeadParams<S>,
    pub ffn: FfnParams<S>,
    pub norm1: LayerNormParams<S>,
    pub norm2: LayerNormParams<S>,
    pub norm3: LayerNormParams<S>,
}

/// All weights of one encoder layer (self-attention over the features).
#[derive(Debug, Clone)]
pub struct EncoderLayerParams<S: Scalar> {
    pub self_attn: MultiHeadParams<S>,
    pub ffn: FfnParams<S>,
    pub norm1: LayerNormParams<S>,
    pub norm2: LayerNormParams<S>,
}

/// Internals of one decoder layer exposed for instrumentation.
pub struct DecoderLayerTrace<S: Scalar> {
    /// Projected value matrix fed to the cross-attention weighted sum.
    pub cross_value_proj: Tensor<S>,
}

fn check_rows<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(), AttnError> {
    if a.shape() != b.shape() {
        return Err(AttnError::Tensor(TensorError::DimensionMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    Ok(())
}

fn decoder_layer_core<S: Scalar>(
    q_prev: &Tensor<S>,
    f: &Tensor<S>,
    pe_spatial: &Tensor<S>,
    pe_query: &Tensor<S>,
    params: &DecoderLayerParams<S>,
    with_self_attn: bool,
) -> Result<(Tensor<S>, Tensor<S>, DecoderLayerTrace<S>), AttnError> {
    check_rows("decoder_layer", f, pe_spatial)?;
    check_rows("decoder_layer", q_prev, pe_query)?;

    let x1 = if with_self_attn {
        let q_tilde = q_prev.add(pe_query)?;
        let (sa, _, _) = multi_head_attention_traced(&q_tilde, &q_tilde, q_prev, &params.self_attn)?;
        params.norm1.apply(&q_prev.add(&sa)?)?
    } else {
        q_prev.clone()
    };

    let (ca, cross_maps, trace) = multi_head_attention_traced(
        &x1.add(pe_query)?,
        &f.add(pe_spatial)?,
        f,
        &params.cross_attn,
    )?;
    let x2 = params.norm2.apply(&x1.add(&ca)?)?;
    let q_next = params.norm3.apply(&x2.add(&ffn(&x2, &params.ffn)?)?)?;
    let trace = DecoderLayerTrace {
        cross_value_proj: trace.value_proj,
    };
    Ok((q_next, cross_maps, trace))
}

/// One query-update step.
///
/// `q_prev` is `[K, d]`, `f` is `[HW, d]`, `pe_spatial` the `[HW, d]`
/// position table, `pe_query` the `[K, d]` query position encoding (the
/// label embeddings themselves, reused). Returns the updated queries and a
/// detached copy of the cross-attention weights `[n_heads, K, HW]`.
///
/// `with_self_attn = false` drops the self-attention sublayer entirely
/// (no residual, `norm1` unused), leaving each query's update independent
/// of the others.
pub fn decoder_layer<S: Scalar>(
    q_prev: &Tensor<S>,
    f: &Tensor<S>,
    pe_spatial: &Tensor<S>,
    pe_query: &Tensor<S>,
    params: &DecoderLayerParams<S>,
    with_self_attn: bool,
) -> Result<(Tensor<S>, Tensor<S>), AttnError> {
    decoder_layer_core(q_prev, f, pe_spatial, pe_query, params, with_self_attn)
        .map(|(q, w, _)| (q, w))
}

/// [`decoder_layer`] plus a [`DecoderLayerTrace`] of the internals.
pub fn decoder_layer_traced<S: Scalar>(
    q_prev: &Tensor<S>,
    f: &Tensor<S>,
    pe_spatial: &Tensor<S>,
    pe_query: &Tensor<S>,
    params: &DecoderLayerParams<S>,
    with_self_attn: bool,
) -> Result<(Tensor<S>, Tensor<S>, DecoderLayerTrace<S>), AttnError> {
    decoder_layer_core(q_prev, f, pe_spatial, pe_query, params, with_self_attn)
}

/// One encoder layer over the features: self-attention with the spatial
/// position encoding on queries and keys, then the FFN, post-norm residuals.
pub fn encoder_layer<S: Scalar>(
    f: &Tensor<S>,
    pe_spatial: &Tensor<S>,
    params: &EncoderLayerParams<S>,
) -> Result<Tensor<S>, AttnError> {
    check_rows("encoder_layer", f, pe_spatial)?;
    let f_tilde = f.add(pe_spatial)?;
    let (sa, _, _) = multi_head_attention_traced(&f_tilde, &f_tilde, f, &params.self_attn)?;
    let x1 = params.norm1.apply(&f.add(&sa)?)?;
    Ok(params.norm2.apply(&x1.add(&ffn(&x1, &params.ffn)?)?)?)
}

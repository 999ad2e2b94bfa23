//! End-to-end classifier assembly.
//!
//! Pipeline: toy backbone (patch embedding + small 3x3 conv stack) extracts
//! a spatial feature grid, a linear map projects it from d0 to the decoder
//! width d, L decoder layers update one learnable query per category, and a
//! per-class linear head scores each updated query through a sigmoid. The
//! label embeddings double as the query position encoding. A global-average
//! pooling head over the same backbone serves as the comparison baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttnError, FfnParams, MultiHeadParams};
use crate::decoder::{
    decoder_layer_traced, encoder_layer, DecoderLayerParams, DecoderLayerTrace,
    EncoderLayerParams, LayerNormParams,
};
use crate::position::{sincos_2d, PositionError, SpatialPositionEncoding, DEFAULT_TEMPERATURE};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Position(#[from] PositionError),
    #[error("resolution {h0}x{w0} not divisible by patch {patch}")]
    Resolution { h0: usize, w0: usize, patch: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("parameter count mismatch: model has {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
}

/// Which head sits on top of the shared backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Label-query transformer decoder.
    Q2l,
    /// Global-average-pool linear baseline.
    Gap,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Q2l => "q2l",
            Arch::Gap => "gap",
        })
    }
}

/// Static description of a model; embedded verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Number of categories K.
    pub k: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// Patch size P; the feature grid is (canvas_h/P) x (canvas_w/P).
    pub patch: usize,
    /// Backbone feature width d0.
    pub d0: usize,
    /// Decoder width d.
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    pub encoder_layers: usize,
    /// Depth of the 3x3 conv stack after the patch embedding.
    pub convs: usize,
    /// Whether decoder layers keep their query self-attention sublayer.
    pub self_attn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Q2l,
            k: 12,
            canvas_h: 48,
            canvas_w: 48,
            patch: 4,
            d0: 64,
            d: 64,
            n_heads: 4,
            d_ff: 128,
            decoder_layers: 2,
            encoder_layers: 1,
            convs: 2,
            self_attn: true,
        }
    }
}

impl ModelConfig {
    pub fn grid_h(&self) -> usize {
        self.canvas_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.canvas_w / self.patch
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.patch == 0 || self.canvas_h == 0 || self.canvas_w == 0 {
            return fail("canvas and patch must be positive".into());
        }
        if self.canvas_h % self.patch != 0 || self.canvas_w % self.patch != 0 {
            return Err(ModelError::Resolution {
                h0: self.canvas_h,
                w0: self.canvas_w,
                patch: self.patch,
            });
        }
        if self.d0 == 0 {
            return fail("d0 must be positive".into());
        }
        if self.arch == Arch::Q2l {
            if self.d == 0 || self.d % 4 != 0 {
                return fail(format!("d = {} must be a positive multiple of 4", self.d));
            }
            if self.n_heads == 0 || self.d % self.n_heads != 0 {
                return fail(format!(
                    "d = {} must divide by n_heads = {}",
                    self.d, self.n_heads
                ));
            }
            if self.d_ff == 0 {
                return fail("d_ff must be positive".into());
            }
            if self.decoder_layers == 0 {
                return fail("at least one decoder layer required".into());
            }
        }
        Ok(())
    }
}

/// Patch embedding plus an optional 3x3 conv stack.
#[derive(Debug, Clone)]
pub struct BackboneParams<S: Scalar> {
    pub patch: usize,
    /// [3*P*P, d0], applied to flattened patches.
    pub embed_w: Tensor<S>,
    pub embed_b: Tensor<S>,
    pub convs: Vec<ConvLayer<S>>,
}

/// One 3x3 same-padding convolution in matmul form: [9*d0, d0] weights.
#[derive(Debug, Clone)]
pub struct ConvLayer<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

/// Non-overlapping patch embedding of an [h0, w0, 3] image into an
/// [h, w, d0] grid, before any convolution.
pub fn patch_embedding<S: Scalar>(
    image: &Tensor<S>,
    backbone: &BackboneParams<S>,
) -> Result<Tensor<S>, ModelError> {
    let &[h0, w0, c] = image.shape() else {
        return Err(TensorError::DimensionMismatch {
            op: "patch_embedding",
            lhs: image.shape().to_vec(),
            rhs: vec![0, 0, 3],
        }
        .into());
    };
    let p = backbone.patch;
    if c != 3 || h0 % p != 0 || w0 % p != 0 {
        return Err(ModelError::Resolution { h0, w0, patch: p });
    }
    let grid = image
        .extract_patches(p, p, p, 0)?
        .matmul(&backbone.embed_w)?
        .add_rowwise(&backbone.embed_b)?;
    let d0 = backbone.embed_w.shape()[1];
    Ok(grid.reshape(&[h0 / p, w0 / p, d0])?)
}

/// Full backbone: patch embedding, then each conv layer with relu.
pub fn extract_features<S: Scalar>(
    image: &Tensor<S>,
    backbone: &BackboneParams<S>,
) -> Result<Tensor<S>, ModelError> {
    let mut grid = patch_embedding(image, backbone)?;
    let &[h, w, d0] = grid.shape() else { unreachable!() };
    for conv in &backbone.convs {
        grid = grid
            .extract_patches(3, 3, 1, 1)?
            .matmul(&conv.w)?
            .add_rowwise(&conv.b)?
            .relu()
            .reshape(&[h, w, d0])?;
    }
    Ok(grid)
}

/// Flattens an [h, w, d0] grid row-major and maps it to [h*w, d].
pub fn project_features<S: Scalar>(
    f0: &Tensor<S>,
    proj_w: &Tensor<S>,
    proj_b: &Tensor<S>,
) -> Result<Tensor<S>, ModelError> {
    let &[h, w, d0] = f0.shape() else {
        return Err(TensorError::DimensionMismatch {
            op: "project_features",
            lhs: f0.shape().to_vec(),
            rhs: proj_w.shape().to_vec(),
        }
        .into());
    };
    Ok(f0
        .reshape(&[h * w, d0])?
        .matmul(proj_w)?
        .add_rowwise(proj_b)?)
}

/// One forward pass worth of outputs.
pub struct ForwardOutput<S: Scalar> {
    /// Per-class logits, [K].
    pub logits: Tensor<S>,
    /// Per-class probabilities, sigmoid of the logits, [K].
    pub probs: Tensor<S>,
    /// Detached cross-attention weights per decoder layer, each
    /// [n_heads, K, HW]. Empty for the pooling baseline.
    pub cross_maps: Vec<Tensor<S>>,
}

/// Label-query decoder model.
#[derive(Debug, Clone)]
pub struct Q2LModel<S: Scalar> {
    pub config: ModelConfig,
    pub backbone: BackboneParams<S>,
    pub proj_w: Tensor<S>,
    pub proj_b: Tensor<S>,
    /// Learnable label embeddings Q0, [K, d]; also the query position
    /// encoding of every decoder layer.
    pub label_embed: Tensor<S>,
    pub encoders: Vec<EncoderLayerParams<S>>,
    pub decoders: Vec<DecoderLayerParams<S>>,
    /// Per-class scoring rows, [K, d]; row k only ever touches logit k.
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
    pos: SpatialPositionEncoding<S>,
}

/// Global-average-pooling baseline over the same backbone.
#[derive(Debug, Clone)]
pub struct GapModel<S: Scalar> {
    pub config: ModelConfig,
    pub backbone: BackboneParams<S>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

/// Either architecture behind one interface.
#[derive(Debug, Clone)]
pub enum AnyModel<S: Scalar> {
    Q2l(Q2LModel<S>),
    Gap(GapModel<S>),
}

fn zero_mha<S: Scalar>(d: usize, n_heads: usize) -> MultiHeadParams<S> {
    MultiHeadParams {
        n_heads,
        w_q: Tensor::zeros(&[d, d]),
        w_k: Tensor::zeros(&[d, d]),
        w_v: Tensor::zeros(&[d, d]),
        w_o: Tensor::zeros(&[d, d]),
        b_q: Some(Tensor::zeros(&[d])),
        b_k: Some(Tensor::zeros(&[d])),
        b_v: Some(Tensor::zeros(&[d])),
        b_o: Some(Tensor::zeros(&[d])),
    }
}

fn zero_ffn<S: Scalar>(d: usize, d_ff: usize) -> FfnParams<S> {
    FfnParams {
        w1: Tensor::zeros(&[d, d_ff]),
        b1: Tensor::zeros(&[d_ff]),
        w2: Tensor::zeros(&[d_ff, d]),
        b2: Tensor::zeros(&[d]),
    }
}

fn zero_norm<S: Scalar>(d: usize) -> LayerNormParams<S> {
    LayerNormParams {
        gain: Tensor::zeros(&[d]),
        bias: Tensor::zeros(&[d]),
    }
}

fn zero_backbone<S: Scalar>(config: &ModelConfig) -> BackboneParams<S> {
    BackboneParams {
        patch: config.patch,
        embed_w: Tensor::zeros(&[3 * config.patch * config.patch, config.d0]),
        embed_b: Tensor::zeros(&[config.d0]),
        convs: (0..config.convs)
            .map(|_| ConvLayer {
                w: Tensor::zeros(&[9 * config.d0, config.d0]),
                b: Tensor::zeros(&[config.d0]),
            })
            .collect(),
    }
}

/// Initialization scale for a [rows, cols] linear map.
pub fn xavier_std(rows: usize, cols: usize) -> f64 {
    (2.0 / (rows + cols) as f64).sqrt()
}

fn visit_mha<'a, S: Scalar>(
    prefix: String,
    p: &'a mut MultiHeadParams<S>,
    out: &mut Vec<(String, &'a mut Tensor<S>)>,
) {
    out.push((format!("{prefix}.w_q"), &mut p.w_q));
    if let Some(b) = p.b_q.as_mut() {
        out.push((format!("{prefix}.b_q"), b));
    }
    out.push((format!("{prefix}.w_k"), &mut p.w_k));
    if let Some(b) = p.b_k.as_mut() {
        out.push((format!("{prefix}.b_k"), b));
    }
    out.push((format!("{prefix}.w_v"), &mut p.w_v));
    if let Some(b) = p.b_v.as_mut() {
        out.push((format!("{prefix}.b_v"), b));
    }
    out.push((format!("{prefix}.w_o"), &mut p.w_o));
    if let Some(b) = p.b_o.as_mut() {
        out.push((format!("{prefix}.b_o"), b));
    }
}

fn visit_ffn<'a, S: Scalar>(
    prefix: String,
    p: &'a mut FfnParams<S>,
    out: &mut Vec<(String, &'a mut Tensor<S>)>,
) {
    out.push((format!("{prefix}.w1"), &mut p.w1));
    out.push((format!("{prefix}.b1"), &mut p.b1));
    out.push((format!("{prefix}.w2"), &mut p.w2));
    out.push((format!("{prefix}.b2"), &mut p.b2));
}

fn visit_norm<'a, S: Scalar>(
    prefix: String,
    p: &'a mut LayerNormParams<S>,
    out: &mut Vec<(String, &'a mut Tensor<S>)>,
) {
    out.push((format!("{prefix}.gain"), &mut p.gain));
    out.push((format!("{prefix}.bias"), &mut p.bias));
}

fn visit_backbone<'a, S: Scalar>(
    p: &'a mut BackboneParams<S>,
    out: &mut Vec<(String, &'a mut Tensor<S>)>,
) {
    out.push(("backbone.embed.weight".into(), &mut p.embed_w));
    out.push(("backbone.embed.bias".into(), &mut p.embed_b));
    for (i, conv) in p.convs.iter_mut().enumerate() {
        out.push((format!("backbone.conv{i}.weight"), &mut conv.w));
        out.push((format!("backbone.conv{i}.bias"), &mut conv.b));
    }
}

impl<S: Scalar> Q2LModel<S> {
    /// Zero-filled model with the right shapes, used as a load target.
    pub fn scaffold(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        if config.arch != Arch::Q2l {
            return Err(ModelError::InvalidConfig(format!(
                "scaffold for arch {} requested on the decoder model",
                config.arch
            )));
        }
        let (d, d_ff, heads, k) = (config.d, config.d_ff, config.n_heads, config.k);
        let pos = sincos_2d(config.grid_h(), config.grid_w(), d, DEFAULT_TEMPERATURE)?;
        Ok(Q2LModel {
            backbone: zero_backbone(&config),
            proj_w: Tensor::zeros(&[config.d0, d]),
            proj_b: Tensor::zeros(&[d]),
            label_embed: Tensor::zeros(&[k, d]),
            encoders: (0..config.encoder_layers)
                .map(|_| EncoderLayerParams {
                    self_attn: zero_mha(d, heads),
                    ffn: zero_ffn(d, d_ff),
                    norm1: zero_norm(d),
                    norm2: zero_norm(d),
                })
                .collect(),
            decoders: (0..config.decoder_layers)
                .map(|_| DecoderLayerParams {
                    self_attn: zero_mha(d, heads),
                    cross_attn: zero_mha(d, heads),
                    ffn: zero_ffn(d, d_ff),
                    norm1: zero_norm(d),
                    norm2: zero_norm(d),
                    norm3: zero_norm(d),
                })
                .collect(),
            head_w: Tensor::zeros(&[k, d]),
            head_b: Tensor::zeros(&[k]),
            pos,
            config,
        })
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        visit_backbone(&mut self.backbone, &mut out);
        out.push(("proj.weight".into(), &mut self.proj_w));
        out.push(("proj.bias".into(), &mut self.proj_b));
        out.push(("label_embed".into(), &mut self.label_embed));
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            visit_mha(format!("encoder{i}.self_attn"), &mut enc.self_attn, &mut out);
            visit_ffn(format!("encoder{i}.ffn"), &mut enc.ffn, &mut out);
            visit_norm(format!("encoder{i}.norm1"), &mut enc.norm1, &mut out);
            visit_norm(format!("encoder{i}.norm2"), &mut enc.norm2, &mut out);
        }
        for (i, dec) in self.decoders.iter_mut().enumerate() {
            visit_mha(format!("decoder{i}.self_attn"), &mut dec.self_attn, &mut out);
            visit_mha(format!("decoder{i}.cross_attn"), &mut dec.cross_attn, &mut out);
            visit_ffn(format!("decoder{i}.ffn"), &mut dec.ffn, &mut out);
            visit_norm(format!("decoder{i}.norm1"), &mut dec.norm1, &mut out);
            visit_norm(format!("decoder{i}.norm2"), &mut dec.norm2, &mut out);
            visit_norm(format!("decoder{i}.norm3"), &mut dec.norm3, &mut out);
        }
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }

    /// Forward pass over one [canvas_h, canvas_w, 3] image.
    pub fn forward(&self, image: &Tensor<S>) -> Result<ForwardOutput<S>, ModelError> {
        let f0 = extract_features(image, &self.backbone)?;
        let mut f = project_features(&f0, &self.proj_w, &self.proj_b)?;
        for enc in &self.encoders {
            f = encoder_layer(&f, self.pos.table(), enc)?;
        }
        let mut q = self.label_embed.clone();
        let mut cross_maps = Vec::with_capacity(self.decoders.len());
        for dec in &self.decoders {
            let (q_next, maps, _) = decoder_layer_traced(
                &q,
                &f,
                self.pos.table(),
                &self.label_embed,
                dec,
                self.config.self_attn,
            )?;
            q = q_next;
            cross_maps.push(maps);
        }
        let logits = q
            .mul(&self.head_w)?
            .sum_axis(1)?
            .add(&self.head_b)?;
        let probs = logits.sigmoid();
        Ok(ForwardOutput {
            logits,
            probs,
            cross_maps,
        })
    }

    /// Like [`Q2LModel::forward`] but also returns the last decoder layer's
    /// projected cross-attention values for instrumentation.
    pub fn forward_traced(
        &self,
        image: &Tensor<S>,
    ) -> Result<(ForwardOutput<S>, DecoderLayerTrace<S>), ModelError> {
        let f0 = extract_features(image, &self.backbone)?;
        let mut f = project_features(&f0, &self.proj_w, &self.proj_b)?;
        for enc in &self.encoders {
            f = encoder_layer(&f, self.pos.table(), enc)?;
        }
        let mut q = self.label_embed.clone();
        let mut cross_maps = Vec::with_capacity(self.decoders.len());
        let mut last_trace = None;
        for dec in &self.decoders {
            let (q_next, maps, trace) = decoder_layer_traced(
                &q,
                &f,
                self.pos.table(),
                &self.label_embed,
                dec,
                self.config.self_attn,
            )?;
            q = q_next;
            cross_maps.push(maps);
            last_trace = Some(trace);
        }
        let logits = q.mul(&self.head_w)?.sum_axis(1)?.add(&self.head_b)?;
        let probs = logits.sigmoid();
        Ok((
            ForwardOutput {
                logits,
                probs,
                cross_maps,
            },
            last_trace.expect("at least one decoder layer"),
        ))
    }
}

impl<S: Scalar> GapModel<S> {
    pub fn scaffold(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(GapModel {
            backbone: zero_backbone(&config),
            head_w: Tensor::zeros(&[config.d0, config.k]),
            head_b: Tensor::zeros(&[config.k]),
            config,
        })
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        visit_backbone(&mut self.backbone, &mut out);
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }

    pub fn forward(&self, image: &Tensor<S>) -> Result<ForwardOutput<S>, ModelError> {
        let f0 = extract_features(image, &self.backbone)?;
        let &[h, w, d0] = f0.shape() else { unreachable!() };
        let pooled = f0
            .reshape(&[h * w, d0])?
            .sum_axis(0)?
            .mul_scalar(S::from_f64(1.0 / (h * w) as f64));
        let logits = pooled
            .reshape(&[1, d0])?
            .matmul(&self.head_w)?
            .reshape(&[self.config.k])?
            .add(&self.head_b)?;
        let probs = logits.sigmoid();
        Ok(ForwardOutput {
            logits,
            probs,
            cross_maps: Vec::new(),
        })
    }
}

impl<S: Scalar> AnyModel<S> {
    /// Zero-filled model of the configured architecture.
    pub fn scaffold(config: ModelConfig) -> Result<Self, ModelError> {
        Ok(match config.arch {
            Arch::Q2l => AnyModel::Q2l(Q2LModel::scaffold(config)?),
            Arch::Gap => AnyModel::Gap(GapModel::scaffold(config)?),
        })
    }

    /// Deterministic random initialization: linear weights are zero-mean
    /// normal at [`xavier_std`], label embeddings unit normal, norm gains 1,
    /// all biases 0. Every parameter comes out trainable.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::scaffold(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in model.named_params_mut() {
            let shape = t.shape().to_vec();
            let filled = if name.ends_with("gain") {
                Tensor::full(&shape, S::ONE)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let std = if name == "label_embed" {
                    1.0
                } else {
                    xavier_std(shape[0], shape[1])
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let data: Vec<S> = (0..shape.iter().product())
                    .map(|_| S::from_f64(normal.sample(&mut rng)))
                    .collect();
                Tensor::from_vec(&shape, data).expect("sized by shape")
            };
            *t = filled.trainable();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Q2l(m) => &m.config,
            AnyModel::Gap(m) => &m.config,
        }
    }

    pub fn forward(&self, image: &Tensor<S>) -> Result<ForwardOutput<S>, ModelError> {
        match self {
            AnyModel::Q2l(m) => m.forward(image),
            AnyModel::Gap(m) => m.forward(image),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        match self {
            AnyModel::Q2l(m) => m.named_params_mut(),
            AnyModel::Gap(m) => m.named_params_mut(),
        }
    }

    /// Parameter handles in canonical order.
    pub fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut copy = self.clone();
        copy.named_params_mut()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Raw parameter buffers in canonical order; plain data, safe to move
    /// across threads.
    pub fn param_snapshot(&self) -> Vec<Vec<S>> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| t.data().to_vec())
            .collect()
    }

    /// Replaces every parameter with a fresh leaf holding `data[i]`,
    /// trainable or not per `trainable`. Order and lengths must match
    /// [`AnyModel::param_snapshot`].
    pub fn load_param_data(&mut self, data: &[Vec<S>], trainable: bool) -> Result<(), ModelError> {
        let params = self.named_params_mut();
        if params.len() != data.len() {
            return Err(ModelError::ParamCount {
                expected: params.len(),
                got: data.len(),
            });
        }
        for ((name, t), buf) in params.into_iter().zip(data) {
            if buf.len() != t.numel() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {name} expects {} values, got {}",
                    t.numel(),
                    buf.len()
                )));
            }
            let leaf = Tensor::from_vec(&t.shape().to_vec(), buf.clone()).expect("checked length");
            *t = if trainable { leaf.trainable() } else { leaf };
        }
        Ok(())
    }

    /// Marks every parameter as a trainable leaf (e.g. after a checkpoint
    /// load, which produces plain tensors).
    pub fn set_trainable(&mut self) {
        for (_, t) in self.named_params_mut() {
            *t = t.trainable();
        }
    }
}

//! The five workflows behind the subcommands.
//!
//! Each command owns a flat config struct (the JSON schema of its
//! `--config` file), validates it, and delegates the real work to the
//! library crate. Configuration mistakes surface as [`UsageError`]; broken
//! files, failed IO, and training failures stay ordinary errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use q2l_core::checkpoint;
use q2l_core::data::{
    self, category_name, load_dataset, ppm, DataConfig, Dataset, ALL_BUCKETS,
};
use q2l_core::metrics::{self, EvalMode};
use q2l_core::model::{AnyModel, Arch, ModelConfig};
use q2l_core::optim::OptimConfig;
use q2l_core::tensor::{Scalar, Tensor};
use q2l_core::trainer::{self, TrainConfig};
use q2l_core::viz;
use q2l_core::loss::LossConfig;

use crate::config::usage;

/// Training and evaluation run at f32 like the shipped checkpoints.
type S = f32;

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateCfg {
    pub out: String,
    pub n_train: usize,
    pub n_test: usize,
    pub shapes: usize,
    pub colors: usize,
    pub classes: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub size_mix: [f64; 3],
    pub seed: u64,
}

impl Default for GenerateCfg {
    fn default() -> Self {
        let d = DataConfig::default();
        GenerateCfg {
            out: String::new(),
            n_train: d.n_train,
            n_test: d.n_test,
            shapes: d.shapes,
            colors: d.colors,
            classes: d.k,
            canvas_h: d.canvas_h,
            canvas_w: d.canvas_w,
            min_objects: d.min_objects,
            max_objects: d.max_objects,
            size_mix: d.size_mix,
            seed: d.seed,
        }
    }
}

pub fn generate(cfg: GenerateCfg) -> anyhow::Result<()> {
    if cfg.out.is_empty() {
        return usage("--out is required");
    }
    let dcfg = DataConfig {
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        shapes: cfg.shapes,
        colors: cfg.colors,
        k: cfg.classes,
        canvas_h: cfg.canvas_h,
        canvas_w: cfg.canvas_w,
        min_objects: cfg.min_objects,
        max_objects: cfg.max_objects,
        size_mix: cfg.size_mix,
        seed: cfg.seed,
    };
    if let Err(e) = dcfg.validate() {
        return usage(e.to_string());
    }
    let out = PathBuf::from(&cfg.out);
    let summary = data::generate_dataset(&dcfg, &out)?;
    println!(
        "wrote {} train and {} test samples to {} ({:.2} labels/image on train)",
        summary.n_train,
        summary.n_test,
        out.display(),
        summary.mean_labels_train
    );
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCfg {
    pub data: String,
    pub out: String,
    pub arch: Arch,
    pub classes: usize,
    pub patch: usize,
    pub d0: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    pub encoder_layers: usize,
    pub convs: usize,
    pub self_attn: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub warmup_frac: f64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clamp_eps: f64,
    pub hflip: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let o = OptimConfig::default();
        TrainCfg {
            data: String::new(),
            out: String::new(),
            arch: m.arch,
            classes: m.k,
            patch: m.patch,
            d0: m.d0,
            d: m.d,
            heads: m.n_heads,
            d_ff: m.d_ff,
            decoder_layers: m.decoder_layers,
            encoder_layers: m.encoder_layers,
            convs: m.convs,
            self_attn: m.self_attn,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.base_lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            adam_eps: o.eps,
            ema_decay: t.ema_decay,
            warmup_frac: t.warmup_frac,
            gamma_pos: t.loss.gamma_pos,
            gamma_neg: t.loss.gamma_neg,
            clamp_eps: t.loss.prob_clamp_eps,
            hflip: t.hflip,
            seed: t.seed,
            threads: t.threads,
        }
    }
}

fn load_split(data_dir: &str, split: &str) -> anyhow::Result<Dataset> {
    let dir = Path::new(data_dir).join(split);
    Ok(load_dataset(&dir).with_context(|| format!("loading {} split", split))?)
}

pub fn train(cfg: TrainCfg) -> anyhow::Result<()> {
    if cfg.data.is_empty() {
        return usage("--data is required");
    }
    if cfg.out.is_empty() {
        return usage("--out is required");
    }
    let train_set = load_split(&cfg.data, "train")?;
    let val_set = load_split(&cfg.data, "test")?;
    if train_set.meta.k != cfg.classes {
        return usage(format!(
            "--classes {} but the dataset has {} categories",
            cfg.classes, train_set.meta.k
        ));
    }

    let mcfg = ModelConfig {
        arch: cfg.arch,
        k: cfg.classes,
        canvas_h: train_set.meta.canvas_h,
        canvas_w: train_set.meta.canvas_w,
        patch: cfg.patch,
        d0: cfg.d0,
        d: cfg.d,
        n_heads: cfg.heads,
        d_ff: cfg.d_ff,
        decoder_layers: cfg.decoder_layers,
        encoder_layers: cfg.encoder_layers,
        convs: cfg.convs,
        self_attn: cfg.self_attn,
    };
    if let Err(e) = mcfg.validate() {
        return usage(e.to_string());
    }
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        base_lr: cfg.lr,
        warmup_frac: cfg.warmup_frac,
        optim: OptimConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
        ema_decay: cfg.ema_decay,
        loss: LossConfig {
            gamma_pos: cfg.gamma_pos,
            gamma_neg: cfg.gamma_neg,
            prob_clamp_eps: cfg.clamp_eps,
        },
        hflip: cfg.hflip,
        seed: cfg.seed,
        threads: cfg.threads,
    };
    if let Err(e) = tcfg.validate() {
        return usage(e.to_string());
    }

    let mut model = AnyModel::<S>::init(mcfg, cfg.seed)?;
    println!(
        "training {} with {} parameters on {} samples",
        model.config().arch,
        model.n_params(),
        train_set.samples.len()
    );
    let out = PathBuf::from(&cfg.out);
    let report = trainer::train(&mut model, &train_set, &val_set, &tcfg, Some(&out), |row| {
        println!(
            "epoch {:>3}  step {:>6}  lr {:.3e}  loss {:.4}  val mAP {:.4}  OF1 {:.4}  CF1 {:.4}",
            row.epoch, row.step, row.lr, row.train_loss, row.val_map, row.val_of1, row.val_cf1
        );
    })?;
    println!(
        "best val mAP {:.4} at epoch {}; checkpoints and log in {}",
        report.best_map,
        report.best_epoch,
        out.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCfg {
    pub data: String,
    pub split: String,
    pub ckpt: String,
    pub preds: String,
    pub threshold: f64,
    pub top_k: usize,
    pub by_size: bool,
    pub ema: bool,
    pub out: String,
    pub threads: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            data: String::new(),
            split: "test".into(),
            ckpt: String::new(),
            preds: String::new(),
            threshold: 0.5,
            top_k: 3,
            by_size: false,
            ema: false,
            out: String::new(),
            threads: 0,
        }
    }
}

/// One probability row per sample, comma-separated, no header.
fn read_preds(path: &str, n: usize, k: usize) -> anyhow::Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| cell.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{path}: line {}", i + 1))?;
        if row.len() != k {
            anyhow::bail!("{path}: line {} has {} values, expected {k}", i + 1, row.len());
        }
        rows.push(row);
    }
    if rows.len() != n {
        anyhow::bail!("{path}: {} rows for {n} samples", rows.len());
    }
    Ok(rows)
}

pub fn eval(cfg: EvalCfg) -> anyhow::Result<()> {
    if cfg.data.is_empty() {
        return usage("--data is required");
    }
    if cfg.ckpt.is_empty() == cfg.preds.is_empty() {
        return usage("exactly one of --ckpt and --preds is required");
    }
    if !matches!(cfg.split.as_str(), "train" | "test") {
        return usage(format!("--split must be train or test, got {}", cfg.split));
    }
    if cfg.ema && cfg.ckpt.is_empty() {
        return usage("--ema needs --ckpt");
    }
    let ds = load_split(&cfg.data, &cfg.split)?;
    let k = ds.meta.k;
    if cfg.top_k == 0 || cfg.top_k > k {
        return usage(format!("--top-k must be in 1..={k}, got {}", cfg.top_k));
    }
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return usage(format!("--threshold must be in (0, 1), got {}", cfg.threshold));
    }

    let probs = if !cfg.ckpt.is_empty() {
        let path = ckpt_path(&cfg.ckpt, cfg.ema);
        let model = checkpoint::load_model::<S>(&path)
            .with_context(|| format!("loading {}", path.display()))?;
        trainer::predict_probs(&model, &ds, cfg.threads)?
    } else {
        read_preds(&cfg.preds, ds.samples.len(), k)?
    };
    let labels: Vec<Vec<bool>> = ds.samples.iter().map(|s| s.multi_hot(k)).collect();

    let aps = metrics::per_category_ap(&probs, &labels)?;
    let map = metrics::mean_ap(&aps)?;
    let all = metrics::threshold_metrics(&probs, &labels, EvalMode::Threshold(cfg.threshold))?;
    let topk = metrics::threshold_metrics(&probs, &labels, EvalMode::TopK(cfg.top_k))?;
    let mut report = metrics::format_report(&map, &all, &topk, cfg.top_k);

    if cfg.by_size {
        let buckets = data::bucket_ranked(&ds.samples, &probs, k, ds.meta.thresholds)?;
        for (bucket, lists) in ALL_BUCKETS.iter().zip(&buckets) {
            let aps: Vec<Option<f64>> = lists
                .iter()
                .map(|l| metrics::average_precision(l))
                .collect::<Result<_, _>>()?;
            let pairs: usize = lists
                .iter()
                .map(|l| l.iter().filter(|(_, pos)| *pos).count())
                .sum();
            let line = match metrics::mean_ap(&aps) {
                Ok(m) => format!(
                    "size_{}_mAP={:.6}\nsize_{}_positive_pairs={}\n",
                    bucket.name(),
                    m.map,
                    bucket.name(),
                    pairs
                ),
                // A bucket can end up with no positives at all.
                Err(_) => format!(
                    "size_{}_mAP=\nsize_{}_positive_pairs={}\n",
                    bucket.name(),
                    bucket.name(),
                    pairs
                ),
            };
            report.push_str(&line);
        }
    }

    print!("{report}");
    if !cfg.out.is_empty() {
        let dir = PathBuf::from(&cfg.out);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("report.txt"), &report)?;
        fs::write(dir.join("ap.csv"), metrics::format_ap_csv(&aps))?;
        println!("wrote report.txt and ap.csv to {}", dir.display());
    }
    Ok(())
}

/// `--ema` swaps `model.ckpt` for `model_ema.ckpt` next to it.
fn ckpt_path(ckpt: &str, ema: bool) -> PathBuf {
    let path = PathBuf::from(ckpt);
    if !ema {
        return path;
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_ema.ckpt"))
}

// ------------------------------------------------------------------- infer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferCfg {
    pub ckpt: String,
    pub image: String,
    pub threshold: f64,
    pub colors: usize,
}

impl Default for InferCfg {
    fn default() -> Self {
        InferCfg {
            ckpt: String::new(),
            image: String::new(),
            threshold: 0.5,
            colors: 4,
        }
    }
}

fn load_image_tensor(path: &str, mcfg: &ModelConfig) -> anyhow::Result<Tensor<S>> {
    let bytes = fs::read(path).with_context(|| format!("reading {path}"))?;
    let (w, h, rgb) = ppm::decode_ppm(&bytes).with_context(|| format!("decoding {path}"))?;
    if h != mcfg.canvas_h || w != mcfg.canvas_w {
        anyhow::bail!(
            "{path} is {w}x{h} but the model expects {}x{}",
            mcfg.canvas_w,
            mcfg.canvas_h
        );
    }
    Ok(data::image_tensor(&rgb, h, w))
}

pub fn infer(cfg: InferCfg) -> anyhow::Result<()> {
    if cfg.ckpt.is_empty() {
        return usage("--ckpt is required");
    }
    if cfg.image.is_empty() {
        return usage("--image is required");
    }
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return usage(format!("--threshold must be in (0, 1), got {}", cfg.threshold));
    }
    let model = checkpoint::load_model::<S>(Path::new(&cfg.ckpt))
        .with_context(|| format!("loading {}", cfg.ckpt))?;
    let image = load_image_tensor(&cfg.image, model.config())?;
    let out = model.forward(&image)?;
    let k = model.config().k;
    let named = cfg.colors > 0 && k % cfg.colors == 0;
    for (c, p) in out.probs.data().iter().enumerate() {
        let name = if named {
            category_name(c, cfg.colors)
        } else {
            format!("cat{c:02}")
        };
        let mark = if p.to_f64() > cfg.threshold { " *" } else { "" };
        println!("{c:>3}  {name:<16} {:.4}{mark}", p.to_f64());
    }
    Ok(())
}

// ------------------------------------------------------------- export-attn

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportCfg {
    pub ckpt: String,
    pub image: String,
    pub out: String,
    /// Category id, or "all" for every category.
    pub label: String,
    pub attn_scale: f64,
    pub bilinear: bool,
}

impl Default for ExportCfg {
    fn default() -> Self {
        ExportCfg {
            ckpt: String::new(),
            image: String::new(),
            out: String::new(),
            label: "all".into(),
            attn_scale: 0.06,
            bilinear: false,
        }
    }
}

pub fn export_attn(cfg: ExportCfg) -> anyhow::Result<()> {
    if cfg.ckpt.is_empty() {
        return usage("--ckpt is required");
    }
    if cfg.image.is_empty() {
        return usage("--image is required");
    }
    if cfg.out.is_empty() {
        return usage("--out is required");
    }
    let model = checkpoint::load_model::<S>(Path::new(&cfg.ckpt))
        .with_context(|| format!("loading {}", cfg.ckpt))?;
    let mcfg = model.config().clone();
    if mcfg.arch != Arch::Q2l {
        return usage("the pooling baseline has no attention maps to export");
    }
    let labels: Vec<usize> = if cfg.label == "all" {
        (0..mcfg.k).collect()
    } else {
        match cfg.label.parse::<usize>() {
            Ok(c) if c < mcfg.k => vec![c],
            Ok(c) => {
                return usage(format!("label {c} out of range, model has {} categories", mcfg.k))
            }
            Err(_) => return usage(format!("--label must be a category id or \"all\", got {}", cfg.label)),
        }
    };

    let image = load_image_tensor(&cfg.image, &mcfg)?;
    let fwd = model.forward(&image)?;
    let maps = fwd.cross_maps.last().expect("decoder layers exist");
    let (heads, hw) = (mcfg.n_heads, mcfg.grid_h() * mcfg.grid_w());
    let data = maps.data();

    let dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = 0usize;
    for &c in &labels {
        let mut mean = vec![0.0f64; hw];
        for h in 0..heads {
            let start = h * mcfg.k * hw + c * hw;
            let row: Vec<f64> = data[start..start + hw].iter().map(|v| v.to_f64()).collect();
            for (m, v) in mean.iter_mut().zip(&row) {
                *m += v / heads as f64;
            }
            let pgm = viz::render_attention(
                &row,
                mcfg.grid_h(),
                mcfg.grid_w(),
                mcfg.patch,
                cfg.attn_scale,
                cfg.bilinear,
            )?;
            fs::write(dir.join(format!("attn_label{c:02}_head{h}.pgm")), pgm)?;
            written += 1;
        }
        let pgm = viz::render_attention(
            &mean,
            mcfg.grid_h(),
            mcfg.grid_w(),
            mcfg.patch,
            cfg.attn_scale,
            cfg.bilinear,
        )?;
        fs::write(dir.join(format!("attn_label{c:02}_mean.pgm")), pgm)?;
        written += 1;
    }
    println!("wrote {written} attention maps to {}", dir.display());
    Ok(())
}

//! `q2l`: generate shape data, train the label-query classifier or the
//! pooling baseline, evaluate, classify single images, and export
//! cross-attention maps.
//!
//! Every subcommand takes `--config FILE` (flat JSON, keys as printed by
//! `--dump-config`); explicit flags override file values. Exit codes:
//! 0 success, 1 runtime failure, 2 flag or config mistake.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overlay, UsageError};

#[derive(Parser)]
#[command(name = "q2l", version, about = "Multi-label shape classifier with label-query attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-label shapes dataset
    GenerateData(GenerateArgs),
    /// Train a model and write checkpoints plus a CSV log
    Train(TrainArgs),
    /// Score a checkpoint or a saved prediction file against a split
    Eval(EvalArgs),
    /// Print per-category probabilities for one image
    Infer(InferArgs),
    /// Write per-head and head-mean cross-attention maps as PGM images
    ExportAttn(ExportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory; train/ and test/ are created inside
    #[arg(long)]
    out: Option<String>,
    /// Training samples
    #[arg(long)]
    n_train: Option<usize>,
    /// Test samples
    #[arg(long)]
    n_test: Option<usize>,
    /// Shape kinds (up to 3)
    #[arg(long)]
    shapes: Option<usize>,
    /// Colors (up to 4)
    #[arg(long)]
    colors: Option<usize>,
    /// Total categories; must equal shapes * colors
    #[arg(long)]
    classes: Option<usize>,
    /// Canvas height in pixels
    #[arg(long)]
    canvas_h: Option<usize>,
    /// Canvas width in pixels
    #[arg(long)]
    canvas_w: Option<usize>,
    /// Minimum distinct categories per image
    #[arg(long)]
    min_objects: Option<usize>,
    /// Maximum distinct categories per image
    #[arg(long)]
    max_objects: Option<usize>,
    /// Relative draw weights for small,medium,large objects
    #[arg(long, value_parser = parse_mix)]
    size_mix: Option<std::vec::Vec<f64>>,
    /// Generation seed
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_mix(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(format!("expected small,medium,large weights, got {} values", parts.len()));
    }
    Ok(parts)
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory (as written by generate-data)
    #[arg(long)]
    data: Option<String>,
    /// Output directory for checkpoints and the training log
    #[arg(long)]
    out: Option<String>,
    /// Architecture: q2l or gap
    #[arg(long)]
    arch: Option<String>,
    /// Categories; must match the dataset
    #[arg(long)]
    classes: Option<usize>,
    /// Patch size of the embedding stem
    #[arg(long)]
    patch: Option<usize>,
    /// Backbone feature width
    #[arg(long)]
    d0: Option<usize>,
    /// Decoder width
    #[arg(long)]
    d: Option<usize>,
    /// Attention heads
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward width
    #[arg(long)]
    d_ff: Option<usize>,
    /// Decoder layers
    #[arg(long)]
    decoder_layers: Option<usize>,
    /// Encoder self-attention layers over the features
    #[arg(long)]
    encoder_layers: Option<usize>,
    /// Backbone conv layers after the patch embedding
    #[arg(long)]
    convs: Option<usize>,
    /// Drop the decoder query self-attention sublayer
    #[arg(long)]
    no_self_attn: bool,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Adam first-moment decay
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam denominator epsilon
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Parameter EMA decay
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Fraction of steps spent in linear warmup
    #[arg(long)]
    warmup_frac: Option<f64>,
    /// Focusing exponent on positives
    #[arg(long)]
    gamma_pos: Option<f64>,
    /// Focusing exponent on negatives
    #[arg(long)]
    gamma_neg: Option<f64>,
    /// Probability clamp epsilon inside the loss
    #[arg(long)]
    clamp_eps: Option<f64>,
    /// Disable horizontal-flip training augmentation
    #[arg(long)]
    no_hflip: bool,
    /// Seed for init and shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses Q2L_THREADS or all cores
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory
    #[arg(long)]
    data: Option<String>,
    /// Split to score: test or train
    #[arg(long)]
    split: Option<String>,
    /// Checkpoint to evaluate (exclusive with --preds)
    #[arg(long)]
    ckpt: Option<String>,
    /// CSV of probabilities, one row per sample (exclusive with --ckpt)
    #[arg(long)]
    preds: Option<String>,
    /// Positive-decision threshold
    #[arg(long)]
    threshold: Option<f64>,
    /// k for the top-k metrics block
    #[arg(long)]
    top_k: Option<usize>,
    /// Also report per-size-bucket ranking scores
    #[arg(long)]
    by_size: bool,
    /// Evaluate the EMA sibling of --ckpt (model_ema.ckpt)
    #[arg(long)]
    ema: bool,
    /// Directory for report.txt and ap.csv (optional)
    #[arg(long)]
    out: Option<String>,
    /// Worker threads; 0 uses Q2L_THREADS or all cores
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to load
    #[arg(long)]
    ckpt: Option<String>,
    /// PPM image to classify
    #[arg(long)]
    image: Option<String>,
    /// Positive-decision threshold
    #[arg(long)]
    threshold: Option<f64>,
    /// Colors used for category names (0 disables names)
    #[arg(long)]
    colors: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to load (label-query architecture only)
    #[arg(long)]
    ckpt: Option<String>,
    /// PPM image to run
    #[arg(long)]
    image: Option<String>,
    /// Output directory for the PGM maps
    #[arg(long)]
    out: Option<String>,
    /// Category id, or "all"
    #[arg(long)]
    label: Option<String>,
    /// Display divisor applied before clipping to [0, 1]
    #[arg(long)]
    attn_scale: Option<f64>,
    /// Bilinear upsampling instead of nearest-neighbor
    #[arg(long)]
    bilinear: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenerateData(a) => {
            let mut o = Overlay::default();
            o.set("out", &a.out);
            o.set("n_train", &a.n_train);
            o.set("n_test", &a.n_test);
            o.set("shapes", &a.shapes);
            o.set("colors", &a.colors);
            o.set("classes", &a.classes);
            o.set("canvas_h", &a.canvas_h);
            o.set("canvas_w", &a.canvas_w);
            o.set("min_objects", &a.min_objects);
            o.set("max_objects", &a.max_objects);
            o.set("size_mix", &a.size_mix);
            o.set("seed", &a.seed);
            let cfg: commands::GenerateCfg = config::resolve(a.common.config.as_deref(), o)?;
            if a.common.dump_config {
                return config::dump(&cfg);
            }
            commands::generate(cfg)
        }
        Cmd::Train(a) => {
            let mut o = Overlay::default();
            o.set("data", &a.data);
            o.set("out", &a.out);
            o.set("arch", &a.arch);
            o.set("classes", &a.classes);
            o.set("patch", &a.patch);
            o.set("d0", &a.d0);
            o.set("d", &a.d);
            o.set("heads", &a.heads);
            o.set("d_ff", &a.d_ff);
            o.set("decoder_layers", &a.decoder_layers);
            o.set("encoder_layers", &a.encoder_layers);
            o.set("convs", &a.convs);
            o.raise("self_attn", a.no_self_attn, false);
            o.set("epochs", &a.epochs);
            o.set("batch_size", &a.batch_size);
            o.set("lr", &a.lr);
            o.set("weight_decay", &a.weight_decay);
            o.set("beta1", &a.beta1);
            o.set("beta2", &a.beta2);
            o.set("adam_eps", &a.adam_eps);
            o.set("ema_decay", &a.ema_decay);
            o.set("warmup_frac", &a.warmup_frac);
            o.set("gamma_pos", &a.gamma_pos);
            o.set("gamma_neg", &a.gamma_neg);
            o.set("clamp_eps", &a.clamp_eps);
            o.raise("hflip", a.no_hflip, false);
            o.set("seed", &a.seed);
            o.set("threads", &a.threads);
            let cfg: commands::TrainCfg = config::resolve(a.common.config.as_deref(), o)?;
            if a.common.dump_config {
                return config::dump(&cfg);
            }
            commands::train(cfg)
        }
        Cmd::Eval(a) => {
            let mut o = Overlay::default();
            o.set("data", &a.data);
            o.set("split", &a.split);
            o.set("ckpt", &a.ckpt);
            o.set("preds", &a.preds);
            o.set("threshold", &a.threshold);
            o.set("top_k", &a.top_k);
            o.raise("by_size", a.by_size, true);
            o.raise("ema", a.ema, true);
            o.set("out", &a.out);
            o.set("threads", &a.threads);
            let cfg: commands::EvalCfg = config::resolve(a.common.config.as_deref(), o)?;
            if a.common.dump_config {
                return config::dump(&cfg);
            }
            commands::eval(cfg)
        }
        Cmd::Infer(a) => {
            let mut o = Overlay::default();
            o.set("ckpt", &a.ckpt);
            o.set("image", &a.image);
            o.set("threshold", &a.threshold);
            o.set("colors", &a.colors);
            let cfg: commands::InferCfg = config::resolve(a.common.config.as_deref(), o)?;
            if a.common.dump_config {
                return config::dump(&cfg);
            }
            commands::infer(cfg)
        }
        Cmd::ExportAttn(a) => {
            let mut o = Overlay::default();
            o.set("ckpt", &a.ckpt);
            o.set("image", &a.image);
            o.set("out", &a.out);
            o.set("label", &a.label);
            o.set("attn_scale", &a.attn_scale);
            o.raise("bilinear", a.bilinear, true);
            let cfg: commands::ExportCfg = config::resolve(a.common.config.as_deref(), o)?;
            if a.common.dump_config {
                return config::dump(&cfg);
            }
            commands::export_attn(cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are "errors" to clap but exit 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

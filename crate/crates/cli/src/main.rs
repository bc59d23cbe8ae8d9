//! `fdalign` command-line driver.
//!
//! Exit codes: 0 on success, 1 when a run fails after validation, 2 for
//! usage and validation errors (bad flags, missing or invalid inputs).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Globals;
use config::Flags;

#[derive(Debug, Parser)]
#[command(
    name = "fdalign",
    version,
    about = "Spurious-feature-aligned fine-tuning on precomputed embeddings"
)]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config (or a run manifest to replay). Flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build class and spurious prototypes from a text archive.
    Prototypes(PrototypesArgs),
    /// Fine-tune the embedding head on a few-shot proxy set.
    Train(TrainArgs),
    /// N-way K-shot episodic evaluation.
    Eval(EvalArgs),
    /// Interpolate two checkpoints in weight space.
    Wiseft(WiseFtArgs),
    /// Write the synthetic two-context dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct SpcArgs {
    /// Use one spurious prototype per template, without correction.
    #[arg(long)]
    no_spc: bool,
    /// Prototypes kept after outlier filtering.
    #[arg(long = "spc-n")]
    spc_n: Option<usize>,
    /// Clusters after merging.
    #[arg(long = "spc-k")]
    spc_k: Option<usize>,
    #[arg(long)]
    spc_trees: Option<usize>,
    #[arg(long)]
    spc_subsample: Option<usize>,
    #[arg(long)]
    spc_max_iters: Option<usize>,
    /// Keep prototypes as plain means instead of rescaling to unit norm.
    #[arg(long)]
    no_renormalize: bool,
}

impl SpcArgs {
    fn apply(&self, f: &mut Flags) {
        f.set("use_spc", self.no_spc.then_some(false))
            .set("renormalize_prototypes", self.no_renormalize.then_some(false))
            .set("spc.n_keep", self.spc_n)
            .set("spc.k_clusters", self.spc_k)
            .set("spc.trees", self.spc_trees)
            .set("spc.subsample", self.spc_subsample)
            .set("spc.max_kmeans_iters", self.spc_max_iters);
    }
}

#[derive(Debug, Args)]
struct PrototypesArgs {
    /// Text archive prefix (`<prefix>.json` + `<prefix>.bin`).
    #[arg(long, value_name = "PREFIX")]
    text: PathBuf,
    #[command(flatten)]
    spc: SpcArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    FdAlign,
    PlainFt,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Identity,
    Linear,
    Mlp,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_name = "PREFIX")]
    images: PathBuf,
    #[arg(long, value_name = "PREFIX")]
    text: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size; full batch when unset.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    shots_per_class: Option<usize>,
    #[arg(long, value_enum)]
    architecture: Option<ArchArg>,
    /// Hidden width of the mlp head (default 64).
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    residual_scale: Option<f64>,
    #[command(flatten)]
    spc: SpcArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint prefix, or `identity` for the frozen features.
    #[arg(long)]
    checkpoint: String,
    #[arg(long, value_name = "PREFIX")]
    images: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    /// Queries per class.
    #[arg(long)]
    query: Option<usize>,
    /// Comma-separated episode seeds, one report each.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

#[derive(Debug, Args)]
struct WiseFtArgs {
    /// Checkpoint at fusion 0 (usually the initial head).
    #[arg(long, value_name = "PREFIX")]
    from: PathBuf,
    /// Checkpoint at fusion 1 (the fine-tuned head).
    #[arg(long, value_name = "PREFIX")]
    to: PathBuf,
    #[arg(long)]
    fusion: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Contexts including the held-out one.
    #[arg(long)]
    contexts: Option<usize>,
    #[arg(long)]
    templates: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    ood_per_class: Option<usize>,
    #[arg(long)]
    home_fraction: Option<f64>,
    #[arg(long)]
    ood_overlap: Option<f64>,
    #[arg(long)]
    class_strength: Option<f64>,
    #[arg(long)]
    context_strength: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    text_misalignment: Option<f64>,
    #[arg(long)]
    template_jitter: Option<f64>,
}

/// A failed run, split by exit code.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let globals = Globals {
        seed: cli.seed,
        config: cli.config,
        out_dir: cli.out_dir,
    };
    let mut flags = Flags::default();
    match cli.command {
        Command::Prototypes(a) => {
            a.spc.apply(&mut flags);
            commands::prototypes(&globals, &a.text, flags)
        }
        Command::Train(a) => {
            a.spc.apply(&mut flags);
            let mode = a.mode.map(|m| match m {
                ModeArg::FdAlign => "fd_align",
                ModeArg::PlainFt => "plain_ft",
            });
            let architecture = match (a.architecture, a.hidden) {
                (Some(arch), hidden) => {
                    let name = match arch {
                        ArchArg::Identity => "identity",
                        ArchArg::Linear => "linear",
                        ArchArg::Mlp => "mlp",
                    };
                    Some(commands::architecture_value(name, hidden)?)
                }
                (None, Some(_)) => {
                    return Err(Failure::Usage(anyhow::anyhow!("--hidden requires --architecture mlp")));
                }
                (None, None) => None,
            };
            flags
                .set("mode", mode)
                .set("alpha", a.alpha)
                .set("beta", a.beta)
                .set("temperature", a.temperature)
                .set("lr", a.lr)
                .set("momentum", a.momentum)
                .set("epochs", a.epochs)
                .set("batch_size", a.batch_size)
                .set("shots_per_class", a.shots_per_class)
                .set("architecture", architecture)
                .set("residual_scale", a.residual_scale);
            commands::train(&globals, &a.images, &a.text, flags)
        }
        Command::Eval(a) => {
            let metric = a.metric.map(|m| match m {
                MetricArg::Cosine => "cosine",
                MetricArg::Euclidean => "euclidean",
            });
            let seeds_given = a.seeds.is_some();
            flags
                .set("episodes", a.episodes)
                .set("way", a.way)
                .set("shot", a.shot)
                .set("query", a.query)
                .set("seeds", a.seeds)
                .set("metric", metric);
            commands::eval(&globals, &a.checkpoint, &a.images, flags, seeds_given)
        }
        Command::Wiseft(a) => {
            flags.set("fusion", a.fusion);
            commands::wiseft(&globals, &a.from, &a.to, flags)
        }
        Command::Synth(a) => {
            flags
                .set("dim", a.dim)
                .set("classes", a.classes)
                .set("contexts", a.contexts)
                .set("templates", a.templates)
                .set("train_per_class", a.train_per_class)
                .set("ood_per_class", a.ood_per_class)
                .set("home_fraction", a.home_fraction)
                .set("ood_overlap", a.ood_overlap)
                .set("class_strength", a.class_strength)
                .set("context_strength", a.context_strength)
                .set("noise", a.noise)
                .set("text_misalignment", a.text_misalignment)
                .set("template_jitter", a.template_jitter);
            commands::synth(&globals, flags)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

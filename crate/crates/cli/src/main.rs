use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oneencoder::{Error, FusionMode};

mod commands;
mod config;

use commands::{EvalArgs, EvalTask, UpTask};
use config::RunConfig;

/// Progressive multimodal alignment: synthesize data, train the shared
/// projection, align new modalities, encode, and evaluate.
#[derive(Parser, Debug)]
#[command(name = "oneencoder", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> oneencoder::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(),
        };
        for o in &self.overrides {
            cfg.apply(o)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Addition,
    Concatenation,
    CrossAttention,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Addition => FusionMode::Addition,
            FusionArg::Concatenation => FusionMode::Concatenation,
            FusionArg::CrossAttention => FusionMode::CrossAttention,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainTask {
    Retrieval,
    Vqa,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalKind {
    Retrieval,
    Zeroshot,
    Vqa,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world: feature files, manifests, and (for VQA) a taxonomy.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the shared projection on a paired manifest (or a VQA manifest with --task vqa).
    TrainUp {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Fusion operator; overrides the `fusion` key.
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        #[arg(long, value_enum, default_value = "retrieval")]
        task: TrainTask,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Align a new modality through an already aligned bridge modality.
    Align {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Paired manifest over the bridge and the new modality.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        new_modality: String,
        #[arg(long)]
        bridge: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Embed every record of a feature file; writes one unit vector per record.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        modality: String,
        /// Input feature file.
        #[arg(long)]
        features: PathBuf,
        /// Output embedding file (feature-file format, one 1×D record each).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint and write a metric report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        task: EvalKind,
        /// `child<TAB>parent` taxonomy, required for VQA.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Overrides the `wups_threshold` key.
        #[arg(long)]
        wups_threshold: Option<f64>,
        /// Overrides the `split` key.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print checkpoint metadata and parameter counts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) | Error::DegenerateEmbedding { .. } => 3,
        Error::Config(_)
        | Error::Precondition(_)
        | Error::Duplicate(_)
        | Error::UnknownModality { .. }
        | Error::UnknownParameter(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> oneencoder::Result<String> {
    match cli.command {
        Command::Synth { config, out, force } => commands::synth(&config.resolve()?, &out, force),
        Command::TrainUp {
            config,
            manifest,
            fusion,
            task,
            out,
            force,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(f) = fusion {
                cfg.set("fusion", FusionMode::from(f).as_str())?;
            }
            let task = match task {
                TrainTask::Retrieval => UpTask::Retrieval,
                TrainTask::Vqa => UpTask::Vqa,
            };
            commands::train_up(&cfg, &manifest, task, &out, force)
        }
        Command::Align {
            config,
            checkpoint,
            manifest,
            new_modality,
            bridge,
            out,
            force,
        } => commands::align(&config.resolve()?, &checkpoint, &manifest, &new_modality, &bridge, &out, force),
        Command::Encode {
            checkpoint,
            modality,
            features,
            out,
            force,
        } => commands::encode(&checkpoint, &modality, &features, &out, force),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            task,
            taxonomy,
            wups_threshold,
            split,
            out,
            force,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(t) = wups_threshold {
                cfg.set("wups_threshold", &t.to_string())?;
            }
            if let Some(s) = split {
                cfg.set("split", &s)?;
            }
            let task = match task {
                EvalKind::Retrieval => EvalTask::Retrieval,
                EvalKind::Zeroshot => EvalTask::ZeroShot,
                EvalKind::Vqa => EvalTask::Vqa,
            };
            commands::eval(
                &cfg,
                &EvalArgs {
                    checkpoint: &checkpoint,
                    manifest: &manifest,
                    task,
                    taxonomy: taxonomy.as_deref(),
                    out: &out,
                    force,
                },
            )
        }
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

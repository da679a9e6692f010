use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use sgic::controller::DiffusionPlan;
use sgic::harness::{self, Aggregate, HarnessError, RunConfig};
use sgic::pipeline::Mode;

/// Semantics-guided image codec with content-adaptive diffusion decoding.
#[derive(Debug, Parser)]
#[command(name = "sgic", version)]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// full, no_clipseg or no_cad.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Initial-codec quality, 1..=8.
    #[arg(long, global = true)]
    quality: Option<u8>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress a PNG or PPM image to a .sgic file.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Reconstruct an image from a .sgic file.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Fixed step count instead of the controller's.
        #[arg(long, requires = "cfg")]
        steps: Option<u32>,
        /// Fixed guidance scale instead of the controller's.
        #[arg(long, requires = "steps")]
        cfg: Option<f64>,
    },
    /// Oracle sweep plus controller training; writes both model files.
    Train,
    /// Oracle sweep only; writes the label cache.
    Sweep,
    /// Rate-distortion sweep over the configured qualities.
    Rd,
    /// Encode/decode timing table.
    Timing {
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        /// Plain mean instead of the median.
        #[arg(long)]
        mean: bool,
    },
    /// Three-variant ablation table at one quality.
    Ablate,
    /// Train the toy denoiser on generated scenes.
    TrainDenoiser {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Write the generated toy corpus and its description fixtures.
    Corpus {
        dir: PathBuf,
        #[arg(long, default_value_t = sgic::scenes::CORPUS_SIZE)]
        count: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            RunConfig::require_path(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(q) = cli.quality {
        cfg.quality = q;
    }
    if let Some(d) = &cli.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &cli.output_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T) -> Result<(), HarnessError> {
    let line = serde_json::to_string(value).map_err(|e| HarnessError::Schema(e.to_string()))?;
    println!("{line}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Encode { input, output } => emit(&harness::cmd_encode(cfg, &input, &output)?),
        Command::Decode {
            input,
            output,
            steps,
            cfg: scale,
        } => {
            let overrides = match (steps, scale) {
                (Some(s), Some(c)) => {
                    Some(DiffusionPlan::new(s, c).map_err(|e| HarnessError::Config(e.to_string()))?)
                }
                _ => None,
            };
            emit(&harness::cmd_decode(cfg, &input, &output, overrides)?)
        }
        Command::Train => emit(&harness::cmd_train(cfg)?),
        Command::Sweep => emit(&harness::cmd_sweep(cfg)?),
        Command::Rd => {
            for row in harness::cmd_rd(cfg)? {
                emit(&row)?;
            }
            Ok(())
        }
        Command::Timing {
            repetitions,
            images,
            mean,
        } => {
            if let Some(r) = repetitions {
                cfg.timing.repetitions = r;
            }
            if let Some(n) = images {
                cfg.timing.images = n;
            }
            if mean {
                cfg.timing.aggregate = Aggregate::Mean;
            }
            cfg.validate()?;
            let report = harness::cmd_timing(cfg)?;
            for row in &report.rows {
                emit(row)?;
            }
            emit(&serde_json::json!({
                "mean_predicted_steps": report.mean_predicted_steps,
                "mean_predicted_cfg": report.mean_predicted_cfg,
                "default_fewer_bits_everywhere": report.default_fewer_bits_everywhere,
                "images": report.images.len(),
                "repetitions": report.repetitions,
                "aggregate": report.aggregate,
            }))
        }
        Command::Ablate => {
            for row in harness::cmd_ablate(cfg)? {
                emit(&row)?;
            }
            Ok(())
        }
        Command::TrainDenoiser { iterations, scenes } => {
            if let Some(i) = iterations {
                cfg.train.denoiser_iterations = i;
            }
            if let Some(s) = scenes {
                cfg.train.denoiser_scenes = s;
            }
            let (summary, report) = harness::cmd_train_denoiser(cfg)?;
            emit(&serde_json::json!({ "summary": summary, "loss_curve": report.curve }))
        }
        Command::Corpus { dir, count } => emit(&serde_json::json!({
            "dir": dir.display().to_string(),
            "files": harness::cmd_corpus(&dir, count)?,
        })),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let j = serde_json::json!({ "error": "usage", "message": e.to_string().trim_end(), "exit_code": 1 });
            eprintln!("{j}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

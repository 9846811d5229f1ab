use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use realtalk::acceptance;
use realtalk::face::EmotionLabel;
use realtalk::pipeline::{self, PipelineConfig};
use realtalk::Error;

#[derive(Parser)]
#[command(name = "realtalk", version, about = "Audio-driven emotional talking-head pipeline")]
struct Cli {
    /// JSON config; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ldm_train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural dataset.
    SynthData,
    /// Train the audio-to-motion VAE on neutral clips.
    TrainVae,
    /// Train the landmark deformation model.
    TrainLdm,
    /// Fit the radiance field to one clip.
    TrainNerf,
    /// Render frames for an emotion from audio.
    Infer {
        #[arg(long)]
        emotion: Option<EmotionLabel>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a finished inference run against its ground-truth clip.
    Eval {
        /// Run directory; defaults to `paths.output`.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value = "realtalk")]
        method: String,
    },
    /// Inference and metrics for each deformation magnitude.
    AblateDelta {
        /// Comma-separated list; defaults to `ablation.deltas`.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
    /// Run acceptance criteria: all, invariants, training, e2e, or 1-10.
    Accept {
        #[arg(default_value = "all")]
        selector: String,
        /// Print results as JSON instead of one line per criterion.
        #[arg(long)]
        json: bool,
    },
    /// Print the effective config.
    ShowConfig,
}

fn run(cli: Cli) -> Result<bool, Error> {
    if let Command::Accept { selector, json } = &cli.command {
        let results = acceptance::run_acceptance(selector)?;
        if *json {
            println!("{}", serde_json::to_string_pretty(&results)?);
        } else {
            results.iter().for_each(|r| println!("{}", r.line()));
        }
        return Ok(results.iter().all(|r| r.passed));
    }
    let mut cfg = PipelineConfig::load_with_env(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::SynthData => {
            let m = pipeline::synth_data(&cfg)?;
            println!("wrote {} clips to {}", m.clips.len(), cfg.paths.dataset.display());
        }
        Command::TrainVae => summary(pipeline::train_vae_stage(&cfg)?)?,
        Command::TrainLdm => summary(pipeline::train_ldm_stage(&cfg)?)?,
        Command::TrainNerf => summary(pipeline::train_nerf_stage(&cfg)?)?,
        Command::Infer { emotion, delta, out } => {
            if let Some(e) = emotion {
                cfg.infer.emotion = e;
            }
            if let Some(d) = delta {
                cfg.delta = d;
            }
            if let Some(o) = out {
                cfg.paths.output = o;
            }
            cfg.validate()?;
            let out = pipeline::infer(&cfg)?;
            println!("wrote {} frames to {}", out.frames.len(), out.dir.display());
        }
        Command::Eval { run, method } => {
            let dir = run.unwrap_or_else(|| cfg.paths.output.clone());
            let r = pipeline::evaluate(&cfg, &dir, &method)?;
            println!("{}\n{}", realtalk::metrics::MetricReport::CSV_HEADER, r.csv_row());
        }
        Command::AblateDelta { deltas } => {
            let deltas = deltas.unwrap_or_else(|| cfg.ablation.deltas.clone());
            print!("{}", pipeline::ablate_delta(&cfg, &deltas)?.to_csv());
        }
        Command::ShowConfig => println!("{}", cfg.to_json()?),
        Command::Accept { .. } => unreachable!(),
    }
    Ok(true)
}

fn summary(s: pipeline::StageSummary) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

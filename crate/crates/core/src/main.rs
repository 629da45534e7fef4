use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use msdccl::config::RunConfig;
use msdccl::train::{evaluate, load_model, train_and_test, PreparedData, Trainer};
use msdccl::{report, synth, Error, Result};

#[derive(Parser)]
#[command(
    name = "msdccl",
    version,
    about = "Multi-level sequence denoising recommender"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitPart {
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, then evaluate its best checkpoint on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `section.key=value`, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory; defaults to `<out_dir>/seed<N>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint (usually `last.ckpt`).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the data it was trained on.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitPart,
    },
    /// Planted-noise detection experiment.
    SynthNoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tables and plots over a directory of runs.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, overrides: &[String]) -> Result<RunConfig> {
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    RunConfig::from_file(path, &all)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            overrides,
            out,
            resume,
        } => {
            let cfg = load_config(&config, seed, &overrides)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.join(format!("seed{}", cfg.seed)));
            let (dataset, data) = PreparedData::load(&cfg)?;
            dataset.write_remaps(&dir)?;
            log::info!(
                "{} users, {} items, {} interactions, {} training examples",
                data.users,
                data.catalog_size - 1,
                data.interactions,
                data.train_examples.len()
            );
            let summary = match resume {
                Some(ckpt) => {
                    let mut trainer = Trainer::resume(&ckpt, data, Some(dir.clone()))?;
                    trainer.fit()?;
                    let (_, best, _) = load_model(&dir.join("best.ckpt"))?;
                    let t = &trainer.config.train;
                    evaluate(&best, &trainer.data.split.test, t.eval_batch_size, &t.ks)?.to_json()
                }
                None => train_and_test(cfg, data, &dir)?.test,
            };
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval { checkpoint, split } => {
            let (cfg, model, _) = load_model(&checkpoint)?;
            let (_, data) = PreparedData::load(&cfg)?;
            if data.catalog_size != model.catalog_size() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint catalog has {} rows, dataset has {}",
                    model.catalog_size(),
                    data.catalog_size
                )));
            }
            let examples = match split {
                SplitPart::Valid => &data.split.valid,
                SplitPart::Test => &data.split.test,
            };
            let report = evaluate(&model, examples, cfg.train.eval_batch_size, &cfg.train.ks)?;
            println!("{}", serde_json::to_string_pretty(&report.to_json())?);
        }
        Command::SynthNoise {
            config,
            overrides,
            out,
        } => {
            let cfg = load_config(&config, None, &overrides)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.join("synth"));
            let report = synth::synth_noise_experiment(&cfg, Some(&dir))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { dir } => {
            let path = report::write_report(&dir)?;
            println!("{}", std::fs::read_to_string(path)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

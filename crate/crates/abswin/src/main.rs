use std::path::PathBuf;
use std::process::ExitCode;

use abswin::commands::{cmd_analyze, cmd_bench, cmd_demo_detection_embed, cmd_finetune, cmd_pretrain};
use abswin::{CliError, CliResult, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

/// Window-aligned position embeddings: toy pretraining, resolution-changing
/// finetuning, embedding diagnostics, and attention latency.
#[derive(Parser)]
#[command(name = "abswin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Line-based key=value config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. --set steps=200.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured task at pretrain_grid and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run this many consecutive seeds, each into output_dir/seed<k>.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Adapt a checkpoint to finetune_grid and train the position probe
    /// (texture classes with task=texture).
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory written by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export channel images, token similarity tables and a summary.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time attention layers over window/global x relpos x grid sizes.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Time independent configs on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Build naive and tiled detection-resolution embeddings and report
    /// their per-block alignment with the pretrained one.
    DemoDetectionEmbed {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pretrained embedding file (PEMB container).
        #[arg(long)]
        embed: PathBuf,
        /// Detection grid side in tokens.
        #[arg(long)]
        out_grid: usize,
        /// Resolution an absolute-win input is materialised at.
        #[arg(long)]
        base_res: Option<usize>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain { cfg, seeds } => {
            let base = cfg.load()?;
            if seeds == 0 {
                return Err(CliError::usage("--seeds must be >= 1"));
            }
            let runs: Vec<ExperimentConfig> = (0..seeds)
                .map(|k| {
                    let mut c = base.clone();
                    c.seed = base.seed + k;
                    if seeds > 1 {
                        c.output_dir = base.output_dir.join(format!("seed{}", c.seed));
                    }
                    c
                })
                .collect();
            let results: Vec<CliResult<_>> = std::thread::scope(|s| {
                let hs: Vec<_> = runs.iter().map(|c| s.spawn(move || cmd_pretrain(c))).collect();
                hs.into_iter().map(|h| h.join().expect("run panicked")).collect()
            });
            for (c, r) in runs.iter().zip(results) {
                println!("seed {} {}", c.seed, r?.metrics.line());
            }
        }
        Command::Finetune { cfg, checkpoint } => {
            let out = cmd_finetune(&cfg.load()?, &checkpoint)?;
            println!("{}", out.metrics.line());
        }
        Command::Analyze { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            println!("{}", cmd_analyze(&checkpoint, &cfg.output_dir)?.line());
        }
        Command::Bench { cfg, parallel } => {
            for r in cmd_bench(&cfg.load()?, parallel)? {
                println!("{} median {:.3} ms p95 {:.3} ms", r.case.id, r.median_ms, r.p95_ms);
            }
        }
        Command::DemoDetectionEmbed { cfg, embed, out_grid, base_res } => {
            let a = cmd_demo_detection_embed(&cfg.load()?, &embed, out_grid, base_res)?;
            let (naive, tiled) = a.mean();
            println!("blocks={} naive_mean={naive:.6} tiled_mean={tiled:.6}", a.rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

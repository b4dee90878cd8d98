//! `sgunlearn` — drive the unlearning laboratory pipeline from one config:
//! gen-data, train, unlearn, evaluate, attack, report, sweep.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sgunlearn_core::harness::{
    self, artifact_digests, ExperimentConfig,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sgunlearn",
    about = "Scene-graph object unlearning laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the dataset and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated method filter (e.g. "Obj-MK-PA,Obj-IF,Retrain").
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading config {:?}", self.config))?;
        if let Some(out) = &self.out {
            cfg.output.dir = out.to_string_lossy().into_owned();
        }
        if let Some(seed) = self.seed {
            cfg.dataset.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    fn filter(&self) -> Option<&[String]> {
        self.methods.as_deref()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and print the manifest hash.
    GenData(Common),
    /// Train the original generator on the dataset.
    Train(Common),
    /// Run the unlearning methods (and the retrain oracle).
    Unlearn(Common),
    /// Evaluate the A1/A2/A3 grid for every unlearned model.
    Evaluate(Common),
    /// Run the indirect-leakage query attacks.
    Attack(Common),
    /// Aggregate reports: summary, timing table, radar data.
    Report(Common),
    /// Lambda and module-ablation sweep for influence redaction.
    Sweep(Common),
    /// Run the full pipeline end to end.
    Pipeline(Common),
    /// Print timing-independent digests of the run artifacts.
    Digest(Common),
}

fn main() {
    harness::configure_threads();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let hash = harness::cmd_gen_data(&cfg)?;
            println!("manifest {hash}");
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            harness::cmd_train(&cfg)?;
            println!("trained original model -> {}/models/original.ckpt", cfg.output.dir);
        }
        Command::Unlearn(c) => {
            let cfg = c.load()?;
            let records = harness::cmd_unlearn(&cfg, c.filter())?;
            for r in &records {
                println!("{}: {} ms -> {}", r.method, r.wall_ms, r.checkpoint);
            }
            if records.is_empty() {
                bail!("no methods selected");
            }
        }
        Command::Evaluate(c) => {
            let cfg = c.load()?;
            let rows = harness::cmd_evaluate(&cfg, c.filter())?;
            for r in &rows {
                println!(
                    "{} [{}]: A1_SSIM {:.4} A2_SSIM {:.4} A3_SSIM {:.4}",
                    r.method,
                    r.task.name(),
                    r.a1.ssim,
                    r.a2.ssim,
                    r.a3.ssim
                );
            }
        }
        Command::Attack(c) => {
            let cfg = c.load()?;
            let verdicts = harness::cmd_attack(&cfg, c.filter())?;
            for (method, verdict) in &verdicts {
                println!("{method}: {}", verdict.name());
            }
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            harness::cmd_report(&cfg)?;
            println!("reports written under {}/reports", cfg.output.dir);
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let rows = harness::cmd_sweep(&cfg)?;
            println!("sweep wrote {} rows", rows.len());
        }
        Command::Pipeline(c) => {
            let cfg = c.load()?;
            let hash = harness::run_full_pipeline(&cfg)?;
            println!("pipeline complete; manifest {hash}");
        }
        Command::Digest(c) => {
            let cfg = c.load()?;
            for (path, digest) in artifact_digests(cfg.out_dir())? {
                println!("{digest}  {path}");
            }
        }
    }
    Ok(())
}

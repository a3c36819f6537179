use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gipip::cli::config::{load_config, ExperimentConfig};
use gipip::cli::{cmd_ablate_as, cmd_attack, cmd_evaluate, cmd_train_prior, exit_code, Overrides};
use gipip::Error;

#[derive(Parser)]
#[command(name = "gipip", version, about = "Gradient inversion experiments with an anomaly-score image prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overrides [output] dir
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Root seed, overrides [experiment] seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads, overrides [experiment] parallel_runs
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the auto-encoder prior on the auxiliary split
    TrainPrior,
    /// Attack every target batch and score the recoveries
    Attack,
    /// Sweep the anomaly-score weight
    AblateAs,
    /// Re-score recovered image files in the output directory
    Evaluate,
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    Overrides { output: cli.output.clone(), seed: cli.seed, jobs: cli.jobs }.apply(&mut cfg);
    match cli.command {
        Command::TrainPrior => {
            let out = cmd_train_prior(&cfg)?;
            match out.trace.last() {
                Some(l) => println!("prior saved to {} (final epoch loss {l})", out.model_path.display()),
                None => println!("prior saved to {} (no training epochs)", out.model_path.display()),
            }
            Ok(0)
        }
        Command::Attack => {
            let out = cmd_attack(&cfg)?;
            println!("{} runs, {} failed; results in {}", out.runs, out.failures, cfg.output.dir);
            Ok(if out.runs > 0 && out.failures == out.runs { 1 } else { 0 })
        }
        Command::AblateAs => {
            let out = cmd_ablate_as(&cfg)?;
            for (w, p) in &out.median_psnr {
                println!("lambda_as {w}: median psnr {p}");
            }
            Ok(if out.csv.is_empty() { 1 } else { 0 })
        }
        Command::Evaluate => {
            let csv = cmd_evaluate(std::path::Path::new(&cfg.output.dir))?;
            println!("{} images scored", csv.len());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

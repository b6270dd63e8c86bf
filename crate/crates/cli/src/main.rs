use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowcem_cli::commands::{cmd_ablation, cmd_decode_study, cmd_pretrain, cmd_sensitivity, cmd_train_rl, GridReport};
use flowcem_cli::plot::plotdata;
use flowcem_cli::{CliError, ExperimentConfig};

/// Reward-guided noise search for GRPO fine-tuning of toy flow-matching models.
#[derive(Debug, Parser)]
#[command(name = "flowcem", version)]
struct Cli {
    /// Experiment config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = "FLOWCEM_OUT", default_value = "runs")]
    out: PathBuf,
    /// Run every command with this single seed instead of the configured ones.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the velocity field to the task by flow matching.
    Pretrain,
    /// GRPO fine-tuning for every configured mode and seed.
    TrainRl,
    /// Iterative vs one-shot search, greedy vs random elite selection.
    Ablation,
    /// Search iteration count sweep.
    Sensitivity,
    /// One-step decode error and reward-rank agreement across t.
    DecodeStudy,
    /// Merge a run directory's metrics into long-format plot tables.
    Plotdata {
        /// Directory holding `<mode>_<seed>/metrics.csv` cells.
        run_dir: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed_override {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn print_grid(report: &GridReport) {
    println!("wrote {}", report.dir.display());
    for a in &report.aggregates {
        println!(
            "{:>14}  seeds {}  final {:.4}  best {:.4}  late std {:.4}",
            a.label, a.seeds, a.mean_final_eval_reward, a.mean_best_eval_reward, a.mean_late_reward_std
        );
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads {n}: {e}")))?;
    }
    match &cli.command {
        Command::Pretrain => {
            let cfg = load_config(cli)?;
            let report = cmd_pretrain(&cfg, &cli.out)?;
            println!(
                "wrote {} after {} steps (final loss {}, plateau {})",
                report.checkpoint.display(),
                report.steps,
                report.final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
                report.plateaued
            );
        }
        Command::TrainRl => print_grid(&cmd_train_rl(&load_config(cli)?, &cli.out)?.check_diverged()?),
        Command::Ablation => print_grid(&cmd_ablation(&load_config(cli)?, &cli.out)?.check_diverged()?),
        Command::Sensitivity => print_grid(&cmd_sensitivity(&load_config(cli)?, &cli.out)?.check_diverged()?),
        Command::DecodeStudy => {
            let report = cmd_decode_study(&load_config(cli)?, &cli.out)?;
            println!("wrote {}", report.dir.display());
            for (seed, rho) in &report.trend {
                println!("seed {seed}: spearman(t, decode error) = {rho:.4}");
            }
        }
        Command::Plotdata { run_dir } => {
            let out = plotdata(run_dir)?;
            println!(
                "wrote {} ({} rows) and {} ({} rows) from {} cells",
                out.train_path.display(),
                out.train_rows,
                out.eval_path.display(),
                out.eval_rows,
                out.cells
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

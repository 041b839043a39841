use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spformer_cli::commands::{self, EvalOptions, PolicyKind, TrainOptions};
use spformer_cli::oracle::run_oracle;
use spformer_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "spformer", version, about = "Train and evaluate policy-token transformer agents on the ramp scenario")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the seed list of the config (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// ppe=off, ego_only_tokens, learned_pos or target_sync=N (repeatable).
        #[arg(long)]
        ablation: Vec<String>,
        /// Continue each seed from its latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Run directory (default: <output_dir>/<run_id> of the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Fill the wall_time column (off by default so logs are reproducible).
        #[arg(long)]
        record_wall_time: bool,
    },
    /// Evaluate a policy on seeded test episodes.
    Eval {
        #[arg(long, default_value = "net")]
        policy: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Experiment config whose scenario to use.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario file (takes precedence over --config).
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a per-vehicle, per-step trace.csv.
        #[arg(long)]
        trace: bool,
    },
    /// Compare analytic and finite-difference gradients on a small network.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean/min/max curves across the seeds of a run directory.
    ExportCurves {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check multi-head attention against a loop-by-loop reference.
    OracleAttention {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 7)]
        max_tokens: usize,
        #[arg(long, default_value_t = 192)]
        d_model: usize,
        #[arg(long, default_value_t = 6)]
        heads: usize,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            episodes,
            ablation,
            resume,
            out,
            checkpoint_every,
            record_wall_time,
        } => {
            let opts = TrainOptions {
                seeds: (!seed.is_empty()).then_some(seed),
                episodes,
                ablations: ablation,
                resume,
                out,
                record_wall_time,
                checkpoint_every,
                quiet: false,
            };
            commands::train(&config, &opts)?;
        }
        Command::Eval {
            policy,
            checkpoint,
            config,
            scenario,
            episodes,
            first_seed,
            out,
            trace,
        } => {
            let policy: PolicyKind = policy.parse()?;
            let opts = EvalOptions {
                config,
                scenario,
                checkpoint,
                episodes,
                first_seed,
                out,
                trace,
            };
            let (report, dir) = commands::eval(policy, &opts)?;
            print!("{}", commands::format_report(&report));
            println!("wrote {}", dir.display());
        }
        Command::Gradcheck { samples, seed, out } => {
            let r = commands::gradcheck(samples, seed)?;
            println!(
                "gradcheck seed {seed}: {} coordinates over {}/{} parameter arrays, max relative error {:.3e} -> {}",
                r.coords.len(),
                r.groups_checked,
                r.groups_total,
                r.max_rel_err,
                if r.passed { "PASS" } else { "FAIL" }
            );
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&r).expect("report serializes"))
                    .map_err(|source| CliError::Io { path: p, source })?;
            }
            if !r.passed {
                return Err(CliError::Check("gradient check failed".into()));
            }
        }
        Command::ExportCurves { run_dir, out } => {
            let (rows, path) = commands::export_curves(&run_dir, out.as_deref())?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::OracleAttention {
            samples,
            seed,
            max_tokens,
            d_model,
            heads,
        } => {
            if heads == 0 || max_tokens == 0 || d_model % heads != 0 {
                return Err(CliError::Usage("need heads > 0, max_tokens > 0 and d_model divisible by heads".into()));
            }
            let r = run_oracle(samples, seed, max_tokens, d_model, heads)?;
            println!(
                "attention oracle: {} samples, max |diff| {:.3e} (tolerance {:e}) -> {}",
                r.samples,
                r.max_abs_diff,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            );
            if !r.passed {
                return Err(CliError::Check("attention oracle mismatch".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

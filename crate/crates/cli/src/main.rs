use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualteacher::config::Mode;
use dualteacher::phantom::NUM_FOLDS;
use dualteacher::trainer::ORDERING_MODES;
use dualteacher_cli::{ablate, eval, gen_data, report, run_root, train, AblateArgs, CliResult, TrainArgs};

/// Dual-teacher semi-supervised domain adaptation on synthetic phantoms.
///
/// Exit codes: 0 success, 2 invalid configuration, 3 I/O failure or missing
/// checkpoints, 4 non-finite loss. The default run root is taken from
/// DTPP_RUN_ROOT (falling back to ./runs).
#[derive(Parser)]
#[command(name = "dtpp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    GenData {
        /// PhantomSpec JSON; the default benchmark when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one fold.
    Train {
        /// TrainConfig JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Run directory; defaults to <run root>/<mode>_seed<seed>_fold<fold>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config field, e.g. --set mode=full --set segmenter.base_width=4.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the student of a run on its fold's test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Merge evaluated runs into comparison tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Output directory; defaults to <run root>/report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a list of modes over seeds and folds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated modes; defaults to the ordering-experiment modes.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Mode>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Comma-separated folds; all folds when omitted.
        #[arg(long, value_delimiter = ',')]
        folds: Vec<usize>,
        /// Output directory; defaults to <run root>/ablation.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { spec, out } => print!("{}", gen_data(spec.as_deref(), &out)?),
        Command::Train {
            config,
            data,
            fold,
            out,
            overrides,
            resume,
        } => {
            let dir = train(&TrainArgs {
                config,
                data,
                fold,
                out,
                overrides,
                resume,
            })?;
            println!("run written to {}", dir.display());
        }
        Command::Eval { run, data, fold } => {
            let r = eval(&run, &data, fold)?;
            println!("fold {fold}: mean dice {:.2}", r.mean_dice);
            for (name, d) in r.class_names.iter().zip(&r.class_dice) {
                println!("  {name:<4} {d:6.2}");
            }
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| run_root().join("report"));
            print!("{}", report(&runs, &out)?);
        }
        Command::Ablate {
            config,
            data,
            modes,
            seeds,
            folds,
            out,
            overrides,
        } => {
            let r = ablate(&AblateArgs {
                config,
                data,
                modes: if modes.is_empty() { ORDERING_MODES.to_vec() } else { modes },
                seeds,
                folds: if folds.is_empty() { (0..NUM_FOLDS).collect() } else { folds },
                out: out.unwrap_or_else(|| run_root().join("ablation")),
                overrides,
            })?;
            print!("{r}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}

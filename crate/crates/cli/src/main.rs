use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "tissuefield", version, about = "Facial soft-tissue prediction from skeletal repositioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration shared by every subcommand.
#[derive(Debug, Clone, Args)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, `key=value` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Driver {
    Bone,
    Face,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic surgical cases
    Synth {
        #[arg(long, default_value_t = 40)]
        cases: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rigidly align the post-operative scans to the pre-operative frame
    Register {
        #[arg(long)]
        manifest: PathBuf,
        /// Structure driving ICP after landmark initialization
        #[arg(long, value_enum, default_value_t = Driver::Bone)]
        driver: Driver,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Five-fold training; writes checkpoints and a loss log per fold
    Train {
        /// Directory of case directories
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train only this fold (0-based); all folds otherwise
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Checkpoint period in epochs
        #[arg(long, default_value_t = 10)]
        checkpoint_every: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sparse displacement prediction over all sub-clouds of a case
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sparse prediction PLY (positions plus `index`, `dx`, `dy`, `dz`)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dense reconstruction from a sparse prediction
    Reconstruct {
        /// Dense pre-operative face PLY
        #[arg(long)]
        face: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
        /// Displaced dense face PLY
        #[arg(long)]
        out: PathBuf,
        /// Solve report JSON
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate predicted faces against the post-operative truth
    Eval {
        /// Case manifest (repeatable, paired with --predicted)
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Predicted dense face PLY (repeatable)
        #[arg(long, required = true)]
        predicted: Vec<PathBuf>,
        #[arg(long)]
        csv: PathBuf,
        /// Directory for `<case_id>_heatmap.ply` files
        #[arg(long)]
        heatmap_dir: Option<PathBuf>,
    },
    /// Finite-difference check of the composite loss gradient
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Jacobi iteration timing over graph sizes
    BenchSolver {
        #[arg(long, value_delimiter = ',', default_values_t = [25_000usize, 50_000, 100_000, 200_000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        k_rec: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

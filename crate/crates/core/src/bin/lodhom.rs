use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lod_homog::experiments::{export_plot, run, Experiment, ExperimentConfig, Overrides, RunError};

#[derive(Parser)]
#[command(name = "lodhom", version, about = "LOD numerical homogenization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Worst-case errors over a sequence of coarse meshes.
    Convergence(Common),
    /// Error sweep over the coefficient period at a fixed coarse mesh.
    Resonance(Common),
    /// Whole-domain effective tensors against the periodic cell tensor.
    PeriodicCheck(Common),
    /// One coarse mesh, including the local tensor field.
    SingleRun(Common),
    /// Converts CSV results in a directory into gnuplot data and a script.
    ExportPlot {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ell: Option<usize>,
    /// Fine mesh exponent: h = sqrt(2) 2^-L.
    #[arg(long)]
    fine_levels: Option<u32>,
    /// exp1_twofreq, exp2_resonance, constant, laminate, checkerboard or raster:PATH.
    #[arg(long)]
    coeff: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    eps1: Option<f64>,
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Relative tolerance of the power iteration.
    #[arg(long)]
    tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, common) = match cli.command {
        Command::Convergence(c) => (Experiment::Convergence, c),
        Command::Resonance(c) => (Experiment::Resonance, c),
        Command::PeriodicCheck(c) => (Experiment::PeriodicCheck, c),
        Command::SingleRun(c) => (Experiment::SingleRun, c),
        Command::ExportPlot { out } => {
            return match export_plot(&out) {
                Ok(files) => {
                    for f in files {
                        println!("{}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(3)
                }
            };
        }
    };
    let flags = Overrides {
        ell: common.ell,
        fine_levels: common.fine_levels,
        coeff: common.coeff,
        eps: common.eps,
        eps1: common.eps1,
        eps2: common.eps2,
        out: common.out,
        threads: common.threads,
        tol: common.tol,
    };
    let config = match ExperimentConfig::resolve(experiment, common.config.as_deref(), &flags) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&config) {
        Ok(()) => {
            println!("results written to {}", config.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(RunError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

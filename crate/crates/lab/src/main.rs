use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgvi_lab::config::{Experiment, ExperimentConfig, Overrides, ReferenceKind};
use sgvi_lab::run::run;
use sgvi_lab::LabResult;

/// Structure-preserving integrators for stochastic Hamiltonian systems.
#[derive(Parser, Debug)]
#[command(name = "sgvi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mean-square error against a reference at several step sizes; fits the order.
    Convergence(Common),
    /// Mean Hamiltonian over many paths as a function of time.
    Energy(Common),
    /// A single path with its Hamiltonian and rotational momentum maps.
    Trajectory(Common),
    /// Print the coefficients of one or more schemes.
    Tableau(Common),
    /// Symplectic defect and momentum drift for schemes and systems.
    Check(Common),
}

fn reference_kind(s: &str) -> Result<ReferenceKind, String> {
    match s {
        "auto" => Ok(ReferenceKind::Auto),
        "exact" => Ok(ReferenceKind::Exact),
        "fine-step" => Ok(ReferenceKind::FineStep),
        _ => Err("expected auto, exact or fine-step".into()),
    }
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// kubo, synchrotron, anharmonic or planar-rotational.
    #[arg(long)]
    system: Option<String>,
    /// Noise strength of kubo, synchrotron and anharmonic.
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Quartic coefficient of anharmonic.
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Noise strength of planar-rotational.
    #[arg(long, allow_negative_numbers = true)]
    sigma: Option<f64>,
    /// Comma-separated scheme ids, `milstein`, `taylor32` or `all`.
    #[arg(long, visible_alias = "scheme", value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    /// Comma-separated systems visited by `check`.
    #[arg(long, value_delimiter = ',')]
    systems: Option<Vec<String>>,
    /// Initial positions, comma-separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    q0: Option<Vec<f64>>,
    /// Initial momenta, comma-separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    p0: Option<Vec<f64>>,
    /// Final time.
    #[arg(long = "T", id = "T")]
    t_final: Option<f64>,
    /// Step size for energy and trajectory runs.
    #[arg(long)]
    dt: Option<f64>,
    /// Step sizes for convergence runs, comma-separated.
    #[arg(long, value_delimiter = ',')]
    dt_levels: Option<Vec<f64>>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Master seed. Defaults to $SGVI_SEED, then 42.
    #[arg(long)]
    seed: Option<u64>,
    /// Convergence reference: auto, exact or fine-step.
    #[arg(long, value_parser = reference_kind)]
    reference: Option<ReferenceKind>,
    /// Fine-step reference uses dt_min / refine.
    #[arg(long)]
    refine: Option<usize>,
    /// Clamp Wiener increments to [-A, A].
    #[arg(long, value_name = "A")]
    truncation: Option<f64>,
    /// Record the energy every this many steps.
    #[arg(long)]
    record_every: Option<usize>,
    /// Random draws per scheme and system in `check`.
    #[arg(long)]
    draws: Option<usize>,
    /// Newton residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Newton iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Output file; the JSON summary goes next to it. Stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Worker threads (all cores by default).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn split(self) -> (Option<PathBuf>, Overrides, Option<usize>) {
        let o = Overrides {
            system: self.system,
            beta: self.beta,
            gamma: self.gamma,
            sigma: self.sigma,
            schemes: self.schemes,
            systems: self.systems,
            q0: self.q0,
            p0: self.p0,
            t_final: self.t_final,
            dt: self.dt,
            dt_levels: self.dt_levels,
            paths: self.paths,
            seed: self.seed,
            reference: self.reference,
            refine: self.refine,
            truncation: self.truncation,
            record_every: self.record_every,
            draws: self.draws,
            tol: self.tol,
            max_iter: self.max_iter,
            output: self.out,
        };
        (self.config, o, self.threads)
    }
}

fn execute(cli: Cli) -> LabResult<()> {
    let (kind, common) = match cli.command {
        Command::Convergence(c) => (Experiment::Convergence, c),
        Command::Energy(c) => (Experiment::Energy, c),
        Command::Trajectory(c) => (Experiment::Trajectory, c),
        Command::Tableau(c) => (Experiment::Tableau, c),
        Command::Check(c) => (Experiment::Check, c),
    };
    let (file, overrides, threads) = common.split();
    let config = ExperimentConfig::resolve(kind, file.as_deref(), overrides)?;
    let out = run(&config, threads)?;
    for p in out.emit(&config)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

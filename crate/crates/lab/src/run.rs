//! Execute a resolved configuration and produce its outputs.

use std::io::Write as _;
use std::path::PathBuf;

use serde::Serialize;

use sgvi_core::diagnostics::{max_drift, momentum_series, symplectic_defect, Generator};
use sgvi_core::noise::{mix64, trial_seed};
use sgvi_core::schemes::{Method, Stepper};
use sgvi_core::{BuiltinSystem, Error as CoreError, PhaseState, StochasticHamiltonian, WienerPath};

use crate::config::{Experiment, ExperimentConfig};
use crate::error::{LabError, LabResult};
use crate::harness::{
    energy_experiment, ms_convergence, trajectory, with_threads, ConvergenceSpec, EnergyResult, EnergySpec,
};
use crate::report::{self, CheckRow, Outputs};

/// Steps used for the momentum-drift column of `check`.
pub const CHECK_MOMENTUM_STEPS: usize = 100;

/// In-memory products of a run.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub csv: Option<Vec<u8>>,
    pub summary: Option<Vec<u8>>,
    pub text: Option<String>,
}

impl RunOutput {
    /// Write to `config.output` (CSV there, summary next to it with a `.json`
    /// extension) or to stdout and stderr when no path is set.
    pub fn emit(&self, config: &ExperimentConfig) -> LabResult<Vec<PathBuf>> {
        match &config.output {
            Some(path) => {
                let mut out = Outputs::default();
                if let Some(csv) = &self.csv {
                    out.push(path.clone(), csv.clone());
                }
                if let Some(text) = &self.text {
                    out.push(path.clone(), text.clone().into_bytes());
                }
                if let Some(s) = &self.summary {
                    out.push(path.with_extension("json"), s.clone());
                }
                out.commit()?;
                Ok(out.files.into_iter().map(|(p, _)| p).collect())
            }
            None => {
                let io = |source| LabError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                };
                let mut stdout = std::io::stdout().lock();
                if let Some(csv) = &self.csv {
                    stdout.write_all(csv).map_err(io)?;
                }
                if let Some(text) = &self.text {
                    stdout.write_all(text.as_bytes()).map_err(io)?;
                }
                if let Some(s) = &self.summary {
                    std::io::stderr().write_all(s).map_err(io)?;
                }
                Ok(Vec::new())
            }
        }
    }
}

/// Run the experiment on a pool capped at `threads` workers.
pub fn run(config: &ExperimentConfig, threads: Option<usize>) -> LabResult<RunOutput> {
    config.validate()?;
    with_threads(threads, || match config.experiment {
        Experiment::Convergence => run_convergence(config),
        Experiment::Energy => run_energy(config),
        Experiment::Trajectory => run_trajectory(config),
        Experiment::Tableau => run_tableau(config),
        Experiment::Check => run_check(config),
    })?
}

fn run_convergence(c: &ExperimentConfig) -> LabResult<RunOutput> {
    let sys = c.build_system()?;
    if c.dt_levels.len() < 2 {
        return Err(LabError::Validation("convergence needs at least two dt levels".into()));
    }
    let spec = ConvergenceSpec {
        methods: c.methods()?,
        z0: c.initial_state()?,
        t_final: c.t_final,
        dt_levels: c.dt_levels.clone(),
        n_paths: c.paths,
        seed: c.seed,
        reference: c.reference_for(&sys)?,
        truncation: c.truncation_rule(),
        solver: c.solver(),
    };
    let r = ms_convergence(&sys, &spec)?;
    Ok(RunOutput {
        csv: Some(report::convergence_csv(c, &r)?),
        summary: Some(report::summary_json(c, &r)?),
        text: None,
    })
}

#[derive(Serialize)]
struct EnergySummary<'a> {
    /// `β²/2` for the anharmonic oscillator, where the mean energy grows
    /// linearly.
    expected_slope: Option<f64>,
    schemes: Vec<EnergyBrief<'a>>,
}

#[derive(Serialize)]
struct EnergyBrief<'a> {
    scheme: &'a str,
    slope: f64,
    n_paths: usize,
    dropped: usize,
}

fn run_energy(c: &ExperimentConfig) -> LabResult<RunOutput> {
    let sys = c.build_system()?;
    let z0 = c.initial_state()?;
    let results = c
        .methods()?
        .into_iter()
        .map(|method| {
            let spec = EnergySpec {
                method,
                z0: z0.clone(),
                t_final: c.t_final,
                dt: c.dt,
                n_paths: c.paths,
                seed: c.seed,
                record_every: c.record_every,
                keep_paths: false,
                truncation: c.truncation_rule(),
                solver: c.solver(),
            };
            energy_experiment(&sys, &spec)
        })
        .collect::<LabResult<Vec<EnergyResult>>>()?;
    let expected_slope = match sys {
        BuiltinSystem::Anharmonic { beta, .. } => Some(beta * beta / 2.0),
        _ => None,
    };
    let summary = EnergySummary {
        expected_slope,
        schemes: results
            .iter()
            .map(|r| EnergyBrief {
                scheme: &r.method,
                slope: r.slope,
                n_paths: r.n_paths,
                dropped: r.dropped,
            })
            .collect(),
    };
    Ok(RunOutput {
        csv: Some(report::energy_csv(c, &results)?),
        summary: Some(report::summary_json(c, &summary)?),
        text: None,
    })
}

/// Rotation generators for every coordinate plane, with column names.
fn rotation_generators(n: usize) -> (Vec<Generator>, Vec<String>) {
    let mut gens = Vec::new();
    let mut names = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            gens.push(Generator::rotation(n, i, j).expect("distinct in-range plane"));
            names.push(format!("J_rot{i}{j}"));
        }
    }
    (gens, names)
}

fn single_method(c: &ExperimentConfig) -> LabResult<Method> {
    let m = c.methods()?;
    match m.as_slice() {
        [one] => Ok(*one),
        _ => Err(LabError::Validation(format!(
            "{:?} needs exactly one scheme",
            c.experiment
        ))),
    }
}

fn run_trajectory(c: &ExperimentConfig) -> LabResult<RunOutput> {
    let sys = c.build_system()?;
    let method = single_method(c)?;
    let (gens, names) = rotation_generators(sys.dim());
    let rows = trajectory(
        &sys,
        method,
        &c.initial_state()?,
        c.t_final,
        c.dt,
        c.seed,
        &gens,
        c.truncation_rule(),
        &c.solver(),
    )?;
    Ok(RunOutput {
        csv: Some(report::trajectory_csv(c, &rows, &names)?),
        summary: None,
        text: None,
    })
}

fn run_tableau(c: &ExperimentConfig) -> LabResult<RunOutput> {
    let mut text = String::new();
    for m in c.methods()? {
        match m {
            Method::Scheme(id) => text.push_str(&report::tableau_text(id)),
            _ => return Err(LabError::Validation(format!("{} has no tableau", m.name()))),
        }
        text.push('\n');
    }
    Ok(RunOutput {
        csv: None,
        summary: None,
        text: Some(text),
    })
}

fn unit(seed: u64, k: u64) -> f64 {
    (mix64(trial_seed(seed, k)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Random `(z, dt)` for draw `i`: coordinates uniform in `[−1, 1]`, `dt`
/// uniform in `[0.01, 0.2]`.
fn draw_point(seed: u64, i: usize, n: usize) -> (PhaseState, f64) {
    let base = mix64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let z: Vec<f64> = (0..2 * n).map(|k| 2.0 * unit(base, k as u64) - 1.0).collect();
    let dt = 0.01 + 0.19 * unit(base, 2 * n as u64);
    (PhaseState::from_slice(&z), dt)
}

#[derive(Serialize)]
struct CheckSummary {
    rows: Vec<CheckRow>,
    /// Pairs the scheme cannot run on, with the reason.
    skipped: Vec<(String, String, String)>,
}

fn run_check(c: &ExperimentConfig) -> LabResult<RunOutput> {
    let methods = c.methods()?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for name in &c.systems {
        let sys = BuiltinSystem::from_name(name, &c.params())?;
        for &m in &methods {
            match check_pair(c, &sys, m) {
                Ok(row) => rows.push(row),
                Err(LabError::Core(e @ CoreError::Configuration(_))) => {
                    skipped.push((m.name().to_string(), sys.name().to_string(), e.to_string()))
                }
                Err(e) => return Err(e),
            }
        }
    }
    let summary = CheckSummary { rows, skipped };
    Ok(RunOutput {
        csv: Some(report::check_csv(c, &summary.rows)?),
        summary: Some(report::summary_json(c, &summary)?),
        text: None,
    })
}

fn check_pair(c: &ExperimentConfig, sys: &BuiltinSystem, m: Method) -> LabResult<CheckRow> {
    let n = sys.dim();
    Stepper::new(m, n, &c.solver())?.check(sys, m.needs_dz())?;
    let mut worst = 0.0_f64;
    for i in 0..c.draws {
        let (z, dt) = draw_point(c.seed, i, n);
        let path = WienerPath::sample(trial_seed(c.seed, i as u64), 1, dt, sys.channels(), m.needs_dz())?;
        let rep = symplectic_defect(m, sys, &z, dt, path.step(0), None)?;
        worst = worst.max(rep.defect);
    }
    let momentum_drift = if n >= 2 {
        let g = Generator::rotation(n, 0, 1)?;
        let (z0, dt) = draw_point(c.seed, 0, n);
        let path = WienerPath::sample(
            trial_seed(c.seed, 0),
            CHECK_MOMENTUM_STEPS,
            dt,
            sys.channels(),
            m.needs_dz(),
        )?;
        let traj = Stepper::new(m, n, &c.solver())?.trajectory(sys, &z0, &path)?;
        Some(max_drift(&momentum_series(&traj, &g)?))
    } else {
        None
    };
    Ok(CheckRow {
        scheme: m.name().to_string(),
        system: sys.name().to_string(),
        symplectic_defect: worst,
        momentum_drift,
    })
}

//! Monte Carlo experiment engine.
//!
//! Every trial draws one Wiener path at the finest resolution from its own
//! seed, `trial_seed(seed, index)`, and coarsens it for each step size, so
//! all levels and all methods of a trial see the same Brownian motion.
//! Trials run in parallel and are reduced in index order, which makes
//! results independent of the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sgvi_core::diagnostics::Generator;
use sgvi_core::model::HessianPolicy;
use sgvi_core::noise::{kubo_truncation_bound, trial_seed};
use sgvi_core::reference::taylor32_step;
use sgvi_core::schemes::{Method, Stepper};
use sgvi_core::{PhaseState, SolverConfig, StochasticHamiltonian, WienerPath};

use crate::error::{LabError, LabResult};

/// Default refinement of the fine-step reference relative to the smallest
/// level.
pub const DEFAULT_REFINE: usize = 32;
/// Largest fraction of trials that may be dropped before a run fails.
pub const MAX_DROP_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Reference {
    /// Closed-form solution evaluated at the trial's `W(T)`.
    Exact,
    /// Order-1.5 Taylor scheme on the finest path, `Δt_min / refine`.
    FineStep { refine: usize },
}

/// Clamp increments before stepping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Truncation {
    /// `|ΔW| ≤ a` at every level.
    Fixed { a: f64 },
    /// `|ΔW| ≤ (3 − Δt)/(2|β|)` with the level's own `Δt`.
    Kubo { beta: f64 },
}

impl Truncation {
    pub fn bound(&self, dt: f64) -> f64 {
        match *self {
            Truncation::Fixed { a } => a,
            Truncation::Kubo { beta } => kubo_truncation_bound(dt, beta),
        }
    }
}

/// Integer number of steps of size `dt` in `t`.
pub fn step_count(t: f64, dt: f64) -> LabResult<usize> {
    if !(dt > 0.0) || !(t > 0.0) || !t.is_finite() {
        return Err(LabError::Validation(format!(
            "time step {dt} and horizon {t} must be positive"
        )));
    }
    let r = t / dt;
    let k = r.round();
    if (r - k).abs() > 1e-9 * r.max(1.0) || k < 1.0 {
        return Err(LabError::Validation(format!("step {dt} does not divide horizon {t}")));
    }
    Ok(k as usize)
}

/// Least-squares slope of `log e` against `log dt`.
pub fn fit_order(dt_levels: &[f64], errors: &[f64]) -> LabResult<f64> {
    if dt_levels.len() != errors.len() {
        return Err(LabError::Validation("one error per level is required".into()));
    }
    if dt_levels.len() < 2 {
        return Err(LabError::Validation(
            "fitting an order needs at least two levels".into(),
        ));
    }
    if errors.iter().chain(dt_levels).any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(LabError::Validation(
            "errors and step sizes must be positive and finite".into(),
        ));
    }
    let x: Vec<f64> = dt_levels.iter().map(|d| d.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    linear_slope(&x, &y)
}

/// Least-squares slope of `y` against `x`.
pub fn linear_slope(x: &[f64], y: &[f64]) -> LabResult<f64> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return Err(LabError::Validation("slope needs at least two paired points".into()));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(LabError::Validation("slope needs distinct abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone)]
pub struct ConvergenceSpec {
    pub methods: Vec<Method>,
    pub z0: PhaseState,
    pub t_final: f64,
    pub dt_levels: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub reference: Reference,
    pub truncation: Option<Truncation>,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelError {
    pub dt: f64,
    /// `√E|z_Δt(T) − z_ref(T)|²`
    pub ms_error: f64,
    /// Delta-method standard error of `ms_error` across trials.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConvergence {
    pub method: String,
    pub symplectic: bool,
    pub levels: Vec<LevelError>,
    pub fitted_order: f64,
    /// Jackknife standard error over trials.
    pub order_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceResult {
    pub dt_levels: Vec<f64>,
    pub methods: Vec<MethodConvergence>,
    pub n_paths: usize,
    pub dropped: usize,
    pub seed: u64,
    pub reference: Reference,
}

impl ConvergenceResult {
    pub fn method(&self, name: &str) -> Option<&MethodConvergence> {
        self.methods.iter().find(|m| m.method.eq_ignore_ascii_case(name))
    }
}

fn check_drops(dropped: usize, n: usize) -> LabResult<()> {
    if dropped as f64 > MAX_DROP_FRACTION * n as f64 {
        return Err(LabError::Experiment(format!(
            "{dropped} of {n} trials failed (limit {:.0}%)",
            100.0 * MAX_DROP_FRACTION
        )));
    }
    Ok(())
}

fn run_path<S: StochasticHamiltonian + ?Sized>(
    stepper: &mut Stepper,
    sys: &S,
    z0: &PhaseState,
    path: &WienerPath,
) -> sgvi_core::Result<PhaseState> {
    let mut q = z0.q.clone();
    let mut p = z0.p.clone();
    for k in 0..path.n_steps {
        stepper.step(sys, &mut q, &mut p, path.dt, path.step(k))?;
    }
    Ok(PhaseState { q, p })
}

fn taylor_reference<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    z0: &PhaseState,
    path: &WienerPath,
) -> sgvi_core::Result<PhaseState> {
    let mut z = z0.clone();
    for k in 0..path.n_steps {
        z = taylor32_step(sys, &z, path.dt, path.step(k), HessianPolicy::default())?;
    }
    Ok(z)
}

/// Mean-square errors at the final time for each method and level.
pub fn ms_convergence<S: StochasticHamiltonian + Sync + ?Sized>(
    sys: &S,
    spec: &ConvergenceSpec,
) -> LabResult<ConvergenceResult> {
    if spec.methods.is_empty() {
        return Err(LabError::Validation("no methods selected".into()));
    }
    if spec.n_paths < 2 {
        return Err(LabError::Validation("at least two paths are required".into()));
    }
    if spec.z0.dim() != sys.dim() {
        return Err(LabError::Validation(format!(
            "initial state has dimension {}, system has {}",
            spec.z0.dim(),
            sys.dim()
        )));
    }
    let mut levels = spec.dt_levels.clone();
    levels.sort_by(f64::total_cmp);
    if levels.len() < 2 || levels.windows(2).any(|w| w[0] == w[1]) {
        return Err(LabError::Validation("need at least two distinct step sizes".into()));
    }
    let refine = match spec.reference {
        Reference::Exact => {
            let probe = WienerPath::from_increments(1.0, sys.channels(), vec![0.0; sys.channels()], None)?;
            if sys.exact_solution(&spec.z0, 1.0, &probe.dw).is_none() {
                return Err(LabError::Validation(
                    "system has no exact solution; use a fine-step reference".into(),
                ));
            }
            1
        }
        Reference::FineStep { refine } if refine >= 1 => refine,
        Reference::FineStep { .. } => return Err(LabError::Validation("refinement factor must be >= 1".into())),
    };
    let fine_dt = levels[0] / refine as f64;
    let n_fine = step_count(spec.t_final, fine_dt)?;
    let factors: Vec<usize> = levels
        .iter()
        .map(|&dt| step_count(dt, fine_dt))
        .collect::<LabResult<_>>()?;
    for (&dt, &f) in levels.iter().zip(&factors) {
        if n_fine % f != 0 {
            return Err(LabError::Validation(format!(
                "step {dt} does not divide horizon {}",
                spec.t_final
            )));
        }
    }
    let with_dz = matches!(spec.reference, Reference::FineStep { .. }) || spec.methods.iter().any(|m| m.needs_dz());
    for &m in &spec.methods {
        Stepper::new(m, sys.dim(), &spec.solver)?.check(sys, with_dz)?;
    }
    if let Reference::FineStep { .. } = spec.reference {
        Stepper::new(Method::Taylor32, sys.dim(), &spec.solver)?.check(sys, true)?;
    }

    let n_methods = spec.methods.len();
    let n_levels = levels.len();
    let trial = |i: usize| -> Option<Vec<f64>> {
        let path = WienerPath::sample(
            trial_seed(spec.seed, i as u64),
            n_fine,
            fine_dt,
            sys.channels(),
            with_dz,
        )
        .ok()?;
        let reference = match spec.reference {
            Reference::Exact => {
                let w: Vec<f64> = (0..sys.channels()).map(|m| path.value(n_fine, m)).collect();
                sys.exact_solution(&spec.z0, spec.t_final, &w)?
            }
            Reference::FineStep { .. } => taylor_reference(sys, &spec.z0, &path).ok()?,
        };
        let mut out = vec![0.0; n_methods * n_levels];
        let mut steppers: Vec<Stepper> = spec
            .methods
            .iter()
            .map(|&m| Stepper::new(m, sys.dim(), &spec.solver))
            .collect::<Result<_, _>>()
            .ok()?;
        for (l, &f) in factors.iter().enumerate() {
            let mut coarse = path.coarsen(f).ok()?;
            if let Some(t) = spec.truncation {
                coarse = coarse.truncated(t.bound(coarse.dt)).ok()?;
            }
            for (mi, st) in steppers.iter_mut().enumerate() {
                let z = run_path(st, sys, &spec.z0, &coarse).ok()?;
                let e2 =
                    z.q.iter()
                        .chain(&z.p)
                        .zip(reference.q.iter().chain(&reference.p))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                if !e2.is_finite() {
                    return None;
                }
                out[mi * n_levels + l] = e2;
            }
        }
        Some(out)
    };
    let results: Vec<Option<Vec<f64>>> = (0..spec.n_paths).into_par_iter().map(trial).collect();
    let kept: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let dropped = spec.n_paths - kept.len();
    check_drops(dropped, spec.n_paths)?;

    let n = kept.len();
    let mut methods = Vec::with_capacity(n_methods);
    for (mi, &m) in spec.methods.iter().enumerate() {
        let mut level_errors = Vec::with_capacity(n_levels);
        let mut sums = vec![0.0; n_levels];
        for l in 0..n_levels {
            let e2: Vec<f64> = kept.iter().map(|t| t[mi * n_levels + l]).collect();
            let s: f64 = e2.iter().sum();
            let mean = s / n as f64;
            let var = e2.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
            let ms = mean.sqrt();
            let stderr = if ms > 0.0 {
                (var / n as f64).sqrt() / (2.0 * ms)
            } else {
                0.0
            };
            sums[l] = s;
            level_errors.push(LevelError {
                dt: levels[l],
                ms_error: ms,
                stderr,
            });
        }
        let ms: Vec<f64> = level_errors.iter().map(|e| e.ms_error).collect();
        let fitted_order = fit_order(&levels, &ms)
            .map_err(|_| LabError::Experiment(format!("{}: mean-square error vanished at some level", m.name())))?;
        // leave-one-out slopes
        let mut loo = Vec::with_capacity(n);
        let mut buf = vec![0.0; n_levels];
        for t in &kept {
            for l in 0..n_levels {
                buf[l] = ((sums[l] - t[mi * n_levels + l]).max(0.0) / (n as f64 - 1.0)).sqrt();
            }
            if let Ok(s) = fit_order(&levels, &buf) {
                loo.push(s);
            }
        }
        let order_stderr = if loo.len() == n {
            let mean = loo.iter().sum::<f64>() / n as f64;
            ((n as f64 - 1.0) / n as f64 * loo.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()).sqrt()
        } else {
            f64::NAN
        };
        methods.push(MethodConvergence {
            method: m.name().to_string(),
            symplectic: m.is_symplectic(),
            levels: level_errors,
            fitted_order,
            order_stderr,
        });
    }
    Ok(ConvergenceResult {
        dt_levels: levels,
        methods,
        n_paths: n,
        dropped,
        seed: spec.seed,
        reference: spec.reference,
    })
}

#[derive(Debug, Clone)]
pub struct EnergySpec {
    pub method: Method,
    pub z0: PhaseState,
    pub t_final: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Record `H` every this many steps (and at `t = 0`).
    pub record_every: usize,
    pub keep_paths: bool,
    pub truncation: Option<Truncation>,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyResult {
    pub method: String,
    pub times: Vec<f64>,
    pub mean_h: Vec<f64>,
    /// Standard error of `mean_h` across paths.
    pub stderr: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_path: Option<Vec<Vec<f64>>>,
    pub n_paths: usize,
    pub dropped: usize,
    pub seed: u64,
    /// Least-squares slope of `mean_h` against time.
    pub slope: f64,
}

/// Hamiltonian statistics along many paths.
pub fn energy_experiment<S: StochasticHamiltonian + Sync + ?Sized>(
    sys: &S,
    spec: &EnergySpec,
) -> LabResult<EnergyResult> {
    if spec.n_paths == 0 {
        return Err(LabError::Validation("at least one path is required".into()));
    }
    if spec.record_every == 0 {
        return Err(LabError::Validation("recording stride must be at least 1".into()));
    }
    if spec.z0.dim() != sys.dim() {
        return Err(LabError::Validation(
            "initial state dimension does not match the system".into(),
        ));
    }
    let n_steps = step_count(spec.t_final, spec.dt)?;
    let with_dz = spec.method.needs_dz();
    Stepper::new(spec.method, sys.dim(), &spec.solver)?.check(sys, with_dz)?;
    let n_rec = n_steps / spec.record_every + 1;
    let trial = |i: usize| -> Option<Vec<f64>> {
        let mut path = WienerPath::sample(
            trial_seed(spec.seed, i as u64),
            n_steps,
            spec.dt,
            sys.channels(),
            with_dz,
        )
        .ok()?;
        if let Some(t) = spec.truncation {
            path = path.truncated(t.bound(spec.dt)).ok()?;
        }
        let mut st = Stepper::new(spec.method, sys.dim(), &spec.solver).ok()?;
        let mut q = spec.z0.q.clone();
        let mut p = spec.z0.p.clone();
        let mut h = Vec::with_capacity(n_rec);
        h.push(sys.hamiltonian(&q, &p));
        for k in 0..n_steps {
            st.step(sys, &mut q, &mut p, spec.dt, path.step(k)).ok()?;
            if (k + 1) % spec.record_every == 0 {
                let e = sys.hamiltonian(&q, &p);
                if !e.is_finite() {
                    return None;
                }
                h.push(e);
            }
        }
        Some(h)
    };
    let results: Vec<Option<Vec<f64>>> = (0..spec.n_paths).into_par_iter().map(trial).collect();
    let kept: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let dropped = spec.n_paths - kept.len();
    check_drops(dropped, spec.n_paths)?;
    let n = kept.len();
    let times: Vec<f64> = (0..n_rec).map(|r| (r * spec.record_every) as f64 * spec.dt).collect();
    let mut mean_h = vec![0.0; n_rec];
    let mut stderr = vec![0.0; n_rec];
    for r in 0..n_rec {
        let m = kept.iter().map(|h| h[r]).sum::<f64>() / n as f64;
        mean_h[r] = m;
        if n > 1 {
            let v = kept.iter().map(|h| (h[r] - m) * (h[r] - m)).sum::<f64>() / (n as f64 - 1.0);
            stderr[r] = (v / n as f64).sqrt();
        }
    }
    let slope = if n_rec >= 2 {
        linear_slope(&times, &mean_h)?
    } else {
        0.0
    };
    Ok(EnergyResult {
        method: spec.method.name().to_string(),
        times,
        mean_h,
        stderr,
        per_path: spec.keep_paths.then_some(kept),
        n_paths: n,
        dropped,
        seed: spec.seed,
        slope,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub state: PhaseState,
    pub h: f64,
    pub momenta: Vec<f64>,
}

/// One path from `trial_seed(seed, 0)`, with `H` and the momentum maps of
/// `generators` at every step.
#[allow(clippy::too_many_arguments)]
pub fn trajectory<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    method: Method,
    z0: &PhaseState,
    t_final: f64,
    dt: f64,
    seed: u64,
    generators: &[Generator],
    truncation: Option<Truncation>,
    solver: &SolverConfig,
) -> LabResult<Vec<TrajectoryRow>> {
    let n_steps = step_count(t_final, dt)?;
    let mut path = WienerPath::sample(trial_seed(seed, 0), n_steps, dt, sys.channels(), method.needs_dz())?;
    if let Some(t) = truncation {
        path = path.truncated(t.bound(dt))?;
    }
    let mut st = Stepper::new(method, sys.dim(), solver)?;
    let states = st.trajectory(sys, z0, &path)?;
    Ok(states
        .into_iter()
        .enumerate()
        .map(|(k, z)| TrajectoryRow {
            t: k as f64 * dt,
            h: sys.hamiltonian(&z.q, &z.p),
            momenta: generators.iter().map(|g| g.momentum(&z.q, &z.p)).collect(),
            state: z,
        })
        .collect())
}

/// Run `f` on a pool capped at `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> LabResult<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(LabError::Validation("thread count must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| LabError::Experiment(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

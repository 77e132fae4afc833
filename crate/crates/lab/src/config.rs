//! Experiment configuration: defaults, JSON files and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sgvi_core::model::BuiltinParams;
use sgvi_core::schemes::{Method, SchemeId};
use sgvi_core::{BuiltinSystem, PhaseState, SolverConfig, StochasticHamiltonian};

use crate::error::{LabError, LabResult};
use crate::harness::{Reference, Truncation, DEFAULT_REFINE};

/// Environment variable that replaces the built-in default seed.
pub const SEED_ENV: &str = "SGVI_SEED";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Convergence,
    Energy,
    Trajectory,
    Tableau,
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    /// Exact solution when the system has one, fine-step otherwise.
    Auto,
    Exact,
    FineStep,
}

/// Fully resolved settings of one run. Every output echoes this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub system: String,
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub schemes: Vec<String>,
    /// Systems visited by `check`.
    pub systems: Vec<String>,
    pub q0: Vec<f64>,
    pub p0: Vec<f64>,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub dt: f64,
    pub dt_levels: Vec<f64>,
    pub paths: usize,
    pub seed: u64,
    pub reference: ReferenceKind,
    pub refine: usize,
    /// Clamp `|ΔW|` to this bound.
    pub truncation: Option<f64>,
    pub record_every: usize,
    pub draws: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let solver = SolverConfig::default();
        ExperimentConfig {
            experiment: Experiment::Convergence,
            system: "kubo".into(),
            beta: 0.1,
            gamma: 0.1,
            sigma: 0.1,
            schemes: vec!["P1N1Q2Gau".into()],
            systems: vec!["kubo".into(), "synchrotron".into()],
            q0: vec![0.0],
            p0: vec![1.0],
            t_final: 3.2,
            dt: 0.25,
            dt_levels: vec![0.0025, 0.005, 0.01, 0.02],
            paths: 1000,
            seed: default_seed().unwrap_or(DEFAULT_SEED),
            reference: ReferenceKind::Auto,
            refine: DEFAULT_REFINE,
            truncation: None,
            record_every: 1,
            draws: 10,
            tol: solver.tol,
            max_iter: solver.max_iter,
            output: None,
        }
    }
}

/// Default seed, honouring [`SEED_ENV`].
pub fn default_seed() -> LabResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| LabError::Validation(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Values set on the command line; `None` keeps the lower layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub system: Option<String>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub sigma: Option<f64>,
    pub schemes: Option<Vec<String>>,
    pub systems: Option<Vec<String>>,
    pub q0: Option<Vec<f64>>,
    pub p0: Option<Vec<f64>>,
    pub t_final: Option<f64>,
    pub dt: Option<f64>,
    pub dt_levels: Option<Vec<f64>>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub reference: Option<ReferenceKind>,
    pub refine: Option<usize>,
    pub truncation: Option<f64>,
    pub record_every: Option<usize>,
    pub draws: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parse a JSON document; unspecified fields keep their defaults.
    pub fn from_json(text: &str, path: &Path) -> LabResult<Self> {
        serde_json::from_str(text).map_err(|source| LabError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    /// Defaults, then the optional file, then flags. The experiment kind
    /// always comes from the subcommand.
    pub fn resolve(experiment: Experiment, file: Option<&Path>, o: Overrides) -> LabResult<Self> {
        default_seed()?;
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => ExperimentConfig::default(),
        };
        c.experiment = experiment;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { c.$f = v; } )* };
        }
        set!(
            system,
            beta,
            gamma,
            sigma,
            schemes,
            systems,
            q0,
            p0,
            t_final,
            dt,
            dt_levels,
            paths,
            seed,
            reference,
            refine,
            record_every,
            draws,
            tol,
            max_iter
        );
        if o.truncation.is_some() {
            c.truncation = o.truncation;
        }
        if o.output.is_some() {
            c.output = o.output;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("configuration serializes")
    }

    pub fn params(&self) -> BuiltinParams {
        BuiltinParams {
            beta: self.beta,
            gamma: self.gamma,
            sigma: self.sigma,
        }
    }

    pub fn build_system(&self) -> LabResult<BuiltinSystem> {
        Ok(BuiltinSystem::from_name(&self.system, &self.params())?)
    }

    /// Selected methods; `all` expands to every registry scheme.
    pub fn methods(&self) -> LabResult<Vec<Method>> {
        if self.schemes.is_empty() {
            return Err(LabError::Validation("no schemes selected".into()));
        }
        let mut out = Vec::new();
        for s in &self.schemes {
            if s.trim().eq_ignore_ascii_case("all") {
                out.extend(SchemeId::ALL.iter().map(|&id| Method::Scheme(id)));
            } else {
                out.push(Method::parse(s)?);
            }
        }
        Ok(out)
    }

    pub fn initial_state(&self) -> LabResult<PhaseState> {
        Ok(PhaseState::new(self.q0.clone(), self.p0.clone())?)
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            ..SolverConfig::default()
        }
    }

    pub fn truncation_rule(&self) -> Option<Truncation> {
        self.truncation.map(|a| Truncation::Fixed { a })
    }

    /// The reference actually used for `system`.
    pub fn reference_for(&self, sys: &BuiltinSystem) -> LabResult<Reference> {
        let has_exact = matches!(sys, BuiltinSystem::Kubo { .. });
        match self.reference {
            ReferenceKind::Exact if !has_exact => Err(LabError::Validation(format!(
                "system {} has no exact solution",
                sys.name()
            ))),
            ReferenceKind::Exact => Ok(Reference::Exact),
            ReferenceKind::Auto if has_exact => Ok(Reference::Exact),
            _ => Ok(Reference::FineStep { refine: self.refine }),
        }
    }

    pub fn validate(&self) -> LabResult<()> {
        let bad = |m: String| Err(LabError::Validation(m));
        let sys = self.build_system()?;
        if !matches!(self.experiment, Experiment::Tableau | Experiment::Check) {
            let z = self.initial_state()?;
            if z.dim() != sys.dim() {
                return bad(format!(
                    "system {} needs {} coordinates in q0 and p0",
                    sys.name(),
                    sys.dim()
                ));
            }
        }
        self.methods()?;
        for s in &self.systems {
            BuiltinSystem::from_name(s, &self.params())?;
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("sigma", self.sigma)] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if !(self.t_final > 0.0) || !(self.dt > 0.0) {
            return bad("T and dt must be positive".into());
        }
        if self.dt_levels.iter().any(|d| !(*d > 0.0)) {
            return bad("dt levels must be positive".into());
        }
        if self.paths == 0 || self.record_every == 0 || self.draws == 0 || self.refine == 0 {
            return bad("paths, record_every, draws and refine must be at least 1".into());
        }
        if let Some(a) = self.truncation {
            if !(a > 0.0) {
                return bad("truncation bound must be positive".into());
            }
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return bad("solver tolerance and iteration cap must be positive".into());
        }
        Ok(())
    }
}

use alloc::string::String;
use core::fmt;

/// Which user-supplied evaluator produced a bad value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evaluator {
    Hamiltonian,
    HamiltonianGradQ,
    HamiltonianGradP,
    NoiseHamiltonian(usize),
    NoiseGradQ(usize),
    NoiseGradP(usize),
    HamiltonianHessian,
    NoiseHessian(usize),
}

impl fmt::Display for Evaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Evaluator::Hamiltonian => write!(f, "H"),
            Evaluator::HamiltonianGradQ => write!(f, "dH/dq"),
            Evaluator::HamiltonianGradP => write!(f, "dH/dp"),
            Evaluator::NoiseHamiltonian(m) => write!(f, "h[{m}]"),
            Evaluator::NoiseGradQ(m) => write!(f, "dh[{m}]/dq"),
            Evaluator::NoiseGradP(m) => write!(f, "dh[{m}]/dp"),
            Evaluator::HamiltonianHessian => write!(f, "Hessian of H"),
            Evaluator::NoiseHessian(m) => write!(f, "Hessian of h[{m}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A vector or array had the wrong length.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// An argument violated an operation's precondition.
    InvalidArgument(&'static str),
    /// An evaluator returned NaN or infinity.
    NonFinite(Evaluator),
    /// The scheme, system and inputs cannot be combined.
    Configuration(&'static str),
    /// Name lookup failed (quadrature rules, schemes, systems).
    UnknownName(String),
    /// Newton iteration did not reach the residual tolerance.
    StepFailure { iterations: usize, residual: f64 },
    /// A Galerkin scheme has no equivalent SPRK tableau.
    Conversion(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { what, expected, found } => {
                write!(f, "{what}: expected length {expected}, found {found}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(which) => write!(f, "evaluator {which} returned a non-finite value"),
            Error::Configuration(msg) => write!(f, "configuration error: {msg}"),
            Error::UnknownName(name) => write!(f, "unknown name `{name}`"),
            Error::StepFailure { iterations, residual } => write!(
                f,
                "Newton iteration failed after {iterations} iterations (residual {residual:e})"
            ),
            Error::Conversion(msg) => write!(f, "no SPRK form: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

//! Stochastic Hamiltonian systems on `R^N × R^N`.
//!
//! A system supplies the drift Hamiltonian `H`, noise Hamiltonians
//! `h_1..h_M` and their first derivatives. Gradient evaluators *accumulate*:
//! `add_*_grad_*(.., scale, out)` performs `out += scale * ∇`. Every scheme in
//! this crate is a linear combination of gradient evaluations, so this keeps
//! the stepping loops free of temporaries.
//!
//! Second derivatives are optional. When absent they are recovered by central
//! differences of the gradients (step [`HESSIAN_FD_STEP`]) unless the caller
//! forbids it.
//!
//! No attempt is made to verify global Lipschitz bounds on the Itô
//! coefficients; the anharmonic oscillator shipped here violates them.

use alloc::boxed::Box;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Evaluator, Result};

/// Central-difference step used when a Hessian is not supplied.
pub const HESSIAN_FD_STEP: f64 = 1e-5;

/// Canonical coordinates `(q, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseState {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidArgument("phase state needs N >= 1"));
        }
        if q.len() != p.len() {
            return Err(Error::DimensionMismatch {
                what: "momentum",
                expected: q.len(),
                found: p.len(),
            });
        }
        if q.iter().chain(p.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("phase state entries must be finite"));
        }
        Ok(PhaseState { q, p })
    }

    /// One degree of freedom.
    pub fn scalar(q: f64, p: f64) -> Self {
        PhaseState { q: vec![q], p: vec![p] }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// `z = (q, p)` as a single vector of length `2N`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * self.dim());
        z.extend_from_slice(&self.q);
        z.extend_from_slice(&self.p);
        z
    }

    pub fn from_slice(z: &[f64]) -> Self {
        let n = z.len() / 2;
        PhaseState {
            q: z[..n].to_vec(),
            p: z[n..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|x| x.is_finite())
    }

    /// Euclidean distance in phase space.
    pub fn distance(&self, other: &PhaseState) -> f64 {
        let s: f64 = self
            .q
            .iter()
            .zip(&other.q)
            .chain(self.p.iter().zip(&other.p))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        libm::sqrt(s)
    }
}

/// Structural facts about a system that schemes may exploit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Structure {
    /// `H = T0(p) + U0(q)` and every `h_m = T_m(p) + U_m(q)`.
    pub separable: bool,
    /// Every `∂h_m/∂p ≡ 0`.
    pub h_independent_of_p: bool,
    /// Every `∇h_m` is constant (noise Hamiltonians linear in `q, p`).
    pub additive_noise: bool,
}

/// Second derivatives of a scalar function of `(q, p)`, row-major `N × N`
/// blocks. `qp[a * n + b] = ∂²f / ∂q_a ∂p_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hessian {
    pub n: usize,
    pub qq: Vec<f64>,
    pub qp: Vec<f64>,
    pub pp: Vec<f64>,
}

impl Hessian {
    pub fn zeros(n: usize) -> Self {
        Hessian {
            n,
            qq: vec![0.0; n * n],
            qp: vec![0.0; n * n],
            pp: vec![0.0; n * n],
        }
    }

    /// `c · I` in the qq and pp blocks.
    pub fn diagonal(n: usize, cq: f64, cp: f64) -> Self {
        let mut h = Hessian::zeros(n);
        for i in 0..n {
            h.qq[i * n + i] = cq;
            h.pp[i * n + i] = cp;
        }
        h
    }

    fn is_finite(&self) -> bool {
        self.qq.iter().chain(&self.qp).chain(&self.pp).all(|x| x.is_finite())
    }
}

/// A stochastic Hamiltonian system with `channels()` independent
/// Stratonovich noise channels.
///
/// Implementations must be pure: evaluators may be called from many threads
/// at once and must not depend on hidden mutable state.
pub trait StochasticHamiltonian {
    fn dim(&self) -> usize;

    fn channels(&self) -> usize;

    fn structure(&self) -> Structure {
        Structure::default()
    }

    fn hamiltonian(&self, q: &[f64], p: &[f64]) -> f64;

    fn add_hamiltonian_grad_q(&self, q: &[f64], p: &[f64], scale: f64, out: &mut [f64]);

    fn add_hamiltonian_grad_p(&self, q: &[f64], p: &[f64], scale: f64, out: &mut [f64]);

    fn noise_hamiltonian(&self, m: usize, q: &[f64], p: &[f64]) -> f64;

    fn add_noise_grad_q(&self, m: usize, q: &[f64], p: &[f64], scale: f64, out: &mut [f64]);

    fn add_noise_grad_p(&self, m: usize, q: &[f64], p: &[f64], scale: f64, out: &mut [f64]);

    fn hamiltonian_hessian(&self, _q: &[f64], _p: &[f64]) -> Option<Hessian> {
        None
    }

    fn noise_hessian(&self, _m: usize, _q: &[f64], _p: &[f64]) -> Option<Hessian> {
        None
    }

    /// Closed-form solution at time `t` given the Wiener values `W_m(t)`,
    /// when one is known.
    fn exact_solution(&self, _z0: &PhaseState, _t: f64, _w: &[f64]) -> Option<PhaseState> {
        None
    }
}

/// `out += scale · Σ_m dw[m] ∂h_m/∂q`.
#[inline]
pub fn add_noise_grad_q_sum<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    dw: &[f64],
    q: &[f64],
    p: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    for (m, &w) in dw.iter().enumerate() {
        if w != 0.0 {
            sys.add_noise_grad_q(m, q, p, scale * w, out);
        }
    }
}

/// `out += scale · Σ_m dw[m] ∂h_m/∂p`.
#[inline]
pub fn add_noise_grad_p_sum<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    dw: &[f64],
    q: &[f64],
    p: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    for (m, &w) in dw.iter().enumerate() {
        if w != 0.0 {
            sys.add_noise_grad_p(m, q, p, scale * w, out);
        }
    }
}

/// Whether second derivatives may be approximated numerically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianPolicy {
    #[default]
    AnalyticOrFiniteDifference,
    AnalyticOnly,
}

type ScalarFn = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync>;
type HessFn = Box<dyn Fn(&[f64], &[f64]) -> Hessian + Send + Sync>;

/// One noise channel of a [`SystemDef`].
pub struct NoiseChannel {
    pub h: ScalarFn,
    pub grad_q: GradFn,
    pub grad_p: GradFn,
    pub hessian: Option<HessFn>,
}

impl NoiseChannel {
    pub fn new<H, GQ, GP>(h: H, grad_q: GQ, grad_p: GP) -> Self
    where
        H: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        GQ: Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync + 'static,
        GP: Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        NoiseChannel {
            h: Box::new(h),
            grad_q: Box::new(grad_q),
            grad_p: Box::new(grad_p),
            hessian: None,
        }
    }

    pub fn with_hessian<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Hessian + Send + Sync + 'static,
    {
        self.hessian = Some(Box::new(f));
        self
    }
}

/// A system assembled from closures. Gradient closures accumulate
/// (`out += scale * ∇`).
pub struct SystemDef {
    dim: usize,
    structure: Structure,
    h: ScalarFn,
    grad_q: GradFn,
    grad_p: GradFn,
    hessian: Option<HessFn>,
    noise: Vec<NoiseChannel>,
}

impl SystemDef {
    pub fn new<H, GQ, GP>(dim: usize, h: H, grad_q: GQ, grad_p: GP) -> Self
    where
        H: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        GQ: Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync + 'static,
        GP: Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        SystemDef {
            dim,
            structure: Structure::default(),
            h: Box::new(h),
            grad_q: Box::new(grad_q),
            grad_p: Box::new(grad_p),
            hessian: None,
            noise: Vec::new(),
        }
    }

    pub fn with_hessian<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Hessian + Send + Sync + 'static,
    {
        self.hessian = Some(Box::new(f));
        self
    }

    pub fn with_noise(mut self, channel: NoiseChannel) -> Self {
        self.noise.push(channel);
        self
    }

    pub fn with_structure(mut self, structure: Structure) -> Self {
        self.structure = structure;
        self
    }
}

impl StochasticHamiltonian for SystemDef {
    fn dim(&self) -> usize {
        self.dim
    }
    fn channels(&self) -> usize {
        self.noise.len()
    }
    fn structure(&self) -> Structure {
        self.structure
    }
    fn hamiltonian(&self, q: &[f64], p: &[f64]) -> f64 {
        (self.h)(q, p)
    }
    fn add_hamiltonian_grad_q(&self, q: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
        (self.grad_q)(q, p, scale, out)
    }
    fn add_hamiltonian_grad_p(&self, q: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
        (self.grad_p)(q, p, scale, out)
    }
    fn noise_hamiltonian(&self, m: usize, q: &[f64], p: &[f64]) -> f64 {
        (self.noise[m].h)(q, p)
    }
    fn add_noise_grad_q(&self, m: usize, q: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
        (self.noise[m].grad_q)(q, p, scale, out)
    }
    fn add_noise_grad_p(&self, m: usize, q: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
        (self.noise[m].grad_p)(q, p, scale, out)
    }
    fn hamiltonian_hessian(&self, q: &[f64], p: &[f64]) -> Option<Hessian> {
        self.hessian.as_ref().map(|f| f(q, p))
    }
    fn noise_hessian(&self, m: usize, q: &[f64], p: &[f64]) -> Option<Hessian> {
        self.noise[m].hessian.as_ref().map(|f| f(q, p))
    }
}

/// Parameters for [`BuiltinSystem::from_name`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuiltinParams {
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
}

impl Default for BuiltinParams {
    fn default() -> Self {
        BuiltinParams {
            beta: 0.1,
            gamma: 0.1,
            sigma: 0.1,
        }
    }
}

/// The test systems used throughout the experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuiltinSystem {
    /// `H = p²/2 + q²/2`, `h = β (p²/2 + q²/2)`.
    Kubo { beta: f64 },
    /// `H = p²/2 − cos q`, `h = β sin q`.
    Synchrotron { beta: f64 },
    /// `H = p²/2 + γ q⁴`, `h = β q`.
    Anharmonic { gamma: f64, beta: f64 },
    /// Two degrees of freedom, `H = |p|²/2 + |q|⁴/4`, `h = σ |q|²/2`.
    /// Invariant under simultaneous rotation of `q` and `p`.
    PlanarRotational { sigma: f64 },
}

impl BuiltinSystem {
    pub const NAMES: [&'static str; 4] = ["kubo", "synchrotron", "anharmonic", "planar-rotational"];

    pub fn from_name(name: &str, params: &BuiltinParams) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "kubo" => Ok(BuiltinSystem::Kubo { beta: params.beta }),
            "synchrotron" => Ok(BuiltinSystem::Synchrotron { beta: params.beta }),
            "anharmonic" => Ok(BuiltinSystem::Anharmonic {
                gamma: params.gamma,
                beta: params.beta,
            }),
            "planar-rotational" => Ok(BuiltinSystem::PlanarRotational { sigma: params.sigma }),
            _ => Err(Error::UnknownName(name.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BuiltinSystem::Kubo { .. } => "kubo",
            BuiltinSystem::Synchrotron { .. } => "synchrotron",
            BuiltinSystem::Anharmonic { .. } => "anharmonic",
            BuiltinSystem::PlanarRotational { .. } => "planar-rotational",
        }
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl StochasticHamiltonian for BuiltinSystem {
    fn dim(&self) -> usize {
        match self {
            BuiltinSystem::PlanarRotational { .. } => 2,
            _ => 1,
        }
    }

    fn channels(&self) -> usize {
        1
    }

    fn structure(&self) -> Structure {
        match self {
            BuiltinSystem::Kubo { .. } => Structure {
                separable: true,
                h_independent_of_p: false,
                additive_noise: false,
            },
            BuiltinSystem::Synchrotron { .. } | BuiltinSystem::PlanarRotational { .. } => Structure {
                separable: true,
                h_independent_of_p: true,
                additive_noise: false,
            },
            BuiltinSystem::Anharmonic { .. } => Structure {
                separable: true,
                h_independent_of_p: true,
                additive_noise: true,
            },
        }
    }

    fn hamiltonian(&self, q: &[f64], p: &[f64]) -> f64 {
        match *self {
            BuiltinSystem::Kubo { .. } => 0.5 * (p[0] * p[0] + q[0] * q[0]),
            BuiltinSystem::Synchrotron { .. } => 0.5 * p[0] * p[0] - libm::cos(q[0]),
            BuiltinSystem::Anharmonic { gamma, .. } => {
                let q2 = q[0] * q[0];
                0.5 * p[0] * p[0] + gamma * q2 * q2
            }
            BuiltinSystem::PlanarRotational { .. } => {
                let r2 = norm_sq(q);
                0.5 * norm_sq(p) + 0.25 * r2 * r2
            }
        }
    }

    fn add_hamiltonian_grad_q(&self, q: &[f64], _p: &[f64], scale: f64, out: &mut [f64]) {
        match *self {
            BuiltinSystem::Kubo { .. } => out[0] += scale * q[0],
            BuiltinSystem::Synchrotron { .. } => out[0] += scale * libm::sin(q[0]),
            BuiltinSystem::Anharmonic { gamma, .. } => out[0] += scale * 4.0 * gamma * q[0] * q[0] * q[0],
            BuiltinSystem::PlanarRotational { .. } => {
                let r2 = norm_sq(q);
                out[0] += scale * r2 * q[0];
                out[1] += scale * r2 * q[1];
            }
        }
    }

    fn add_hamiltonian_grad_p(&self, _q: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
        for (o, pi) in out.iter_mut().zip(p) {
            *o += scale * pi;
        }
    }

    fn noise_hamiltonian(&self, _m: usize, q: &[f64], p: &[f64]) -> f64 {
        match *self {
            BuiltinSystem::Kubo { beta } => beta * 0.5 * (p[0] * p[0] + q[0] * q[0]),
            BuiltinSystem::Synchrotron { beta } => beta * libm::sin(q[0]),
            BuiltinSystem::Anharmonic { beta, .. } => beta * q[0],
            BuiltinSystem::PlanarRotational { sigma } => 0.5 * sigma * norm_sq(q),
        }
    }

    fn add_noise_grad_q(&self, _m: usize, q: &[f64], _p: &[f64], scale: f64, out: &mut [f64]) {
        match *self {
            BuiltinSystem::Kubo { beta } => out[0] += scale * beta * q[0],
            BuiltinSystem::Synchrotron { beta } => out[0] += scale * beta * libm::cos(q[0]),
            BuiltinSystem::Anharmonic { beta, .. } => out[0] += scale * beta,
            BuiltinSystem::PlanarRotational { sigma } => {
                out[0] += scale * sigma * q[0];
                out[1] += scale * sigma * q[1];
            }
        }
    }

    fn add_noise_grad_p(&self, _m: usize, _q: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
        if let BuiltinSystem::Kubo { beta } = *self {
            out[0] += scale * beta * p[0];
        }
    }

    fn hamiltonian_hessian(&self, q: &[f64], _p: &[f64]) -> Option<Hessian> {
        Some(match *self {
            BuiltinSystem::Kubo { .. } => Hessian::diagonal(1, 1.0, 1.0),
            BuiltinSystem::Synchrotron { .. } => Hessian::diagonal(1, libm::cos(q[0]), 1.0),
            BuiltinSystem::Anharmonic { gamma, .. } => Hessian::diagonal(1, 12.0 * gamma * q[0] * q[0], 1.0),
            BuiltinSystem::PlanarRotational { .. } => {
                let r2 = norm_sq(q);
                let mut h = Hessian::diagonal(2, r2, 1.0);
                for a in 0..2 {
                    for b in 0..2 {
                        h.qq[a * 2 + b] += 2.0 * q[a] * q[b];
                    }
                }
                h
            }
        })
    }

    fn noise_hessian(&self, _m: usize, q: &[f64], _p: &[f64]) -> Option<Hessian> {
        Some(match *self {
            BuiltinSystem::Kubo { beta } => Hessian::diagonal(1, beta, beta),
            BuiltinSystem::Synchrotron { beta } => Hessian::diagonal(1, -beta * libm::sin(q[0]), 0.0),
            BuiltinSystem::Anharmonic { .. } => Hessian::zeros(1),
            BuiltinSystem::PlanarRotational { sigma } => Hessian::diagonal(2, sigma, 0.0),
        })
    }

    fn exact_solution(&self, z0: &PhaseState, t: f64, w: &[f64]) -> Option<PhaseState> {
        match *self {
            BuiltinSystem::Kubo { beta } => Some(crate::reference::kubo_exact(z0.q[0], z0.p[0], beta, t, w[0])),
            _ => None,
        }
    }
}

/// Hessian of `f` from central differences of its gradient.
fn fd_hessian<GQ, GP>(n: usize, q: &[f64], p: &[f64], grad_q: GQ, grad_p: GP) -> Hessian
where
    GQ: Fn(&[f64], &[f64], &mut [f64]),
    GP: Fn(&[f64], &[f64], &mut [f64]),
{
    let h = HESSIAN_FD_STEP;
    let mut out = Hessian::zeros(n);
    let mut qw = q.to_vec();
    let mut pw = p.to_vec();
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let mut gp2 = vec![0.0; n];
    let mut gm2 = vec![0.0; n];
    for b in 0..n {
        let step = h * (1.0 + q[b].abs());
        qw[b] = q[b] + step;
        grad_q(&qw, p, &mut gp);
        qw[b] = q[b] - step;
        grad_q(&qw, p, &mut gm);
        qw[b] = q[b];
        for a in 0..n {
            out.qq[a * n + b] = (gp[a] - gm[a]) / (2.0 * step);
        }

        let step = h * (1.0 + p[b].abs());
        pw[b] = p[b] + step;
        grad_q(q, &pw, &mut gp);
        grad_p(q, &pw, &mut gp2);
        pw[b] = p[b] - step;
        grad_q(q, &pw, &mut gm);
        grad_p(q, &pw, &mut gm2);
        pw[b] = p[b];
        for a in 0..n {
            out.qp[a * n + b] = (gp[a] - gm[a]) / (2.0 * step);
            out.pp[a * n + b] = (gp2[a] - gm2[a]) / (2.0 * step);
        }
    }
    out
}

fn set_grad<F: Fn(&mut [f64])>(out: &mut [f64], f: F) {
    out.iter_mut().for_each(|x| *x = 0.0);
    f(out);
}

/// Hessian of `H`, analytic if supplied.
pub fn hamiltonian_hessian<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    q: &[f64],
    p: &[f64],
    policy: HessianPolicy,
) -> Result<Hessian> {
    let hess = match sys.hamiltonian_hessian(q, p) {
        Some(h) => h,
        None if policy == HessianPolicy::AnalyticOrFiniteDifference => fd_hessian(
            sys.dim(),
            q,
            p,
            |q, p, out| set_grad(out, |o| sys.add_hamiltonian_grad_q(q, p, 1.0, o)),
            |q, p, out| set_grad(out, |o| sys.add_hamiltonian_grad_p(q, p, 1.0, o)),
        ),
        None => {
            return Err(Error::Configuration(
                "Hessian of H not supplied and finite differences disabled",
            ))
        }
    };
    if !hess.is_finite() {
        return Err(Error::NonFinite(Evaluator::HamiltonianHessian));
    }
    Ok(hess)
}

/// Hessian of `h_m`, analytic if supplied.
pub fn noise_hessian<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    m: usize,
    q: &[f64],
    p: &[f64],
    policy: HessianPolicy,
) -> Result<Hessian> {
    let hess = match sys.noise_hessian(m, q, p) {
        Some(h) => h,
        None if policy == HessianPolicy::AnalyticOrFiniteDifference => fd_hessian(
            sys.dim(),
            q,
            p,
            |q, p, out| set_grad(out, |o| sys.add_noise_grad_q(m, q, p, 1.0, o)),
            |q, p, out| set_grad(out, |o| sys.add_noise_grad_p(m, q, p, 1.0, o)),
        ),
        None => {
            return Err(Error::Configuration(
                "Hessian of h not supplied and finite differences disabled",
            ))
        }
    };
    if !hess.is_finite() {
        return Err(Error::NonFinite(Evaluator::NoiseHessian(m)));
    }
    Ok(hess)
}

/// Worst relative gradient error per evaluator, measured as
/// `|analytic − central difference| / (1 + |analytic|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub hamiltonian_q: f64,
    pub hamiltonian_p: f64,
    pub noise_q: Vec<f64>,
    pub noise_p: Vec<f64>,
}

impl GradientReport {
    pub fn max(&self) -> f64 {
        self.noise_q
            .iter()
            .chain(&self.noise_p)
            .fold(self.hamiltonian_q.max(self.hamiltonian_p), |m, x| m.max(*x))
    }
}

fn checked(v: f64, which: Evaluator) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(which))
    }
}

fn grad_error<F, G>(
    q: &[f64],
    p: &[f64],
    step: f64,
    wrt_q: bool,
    f: F,
    grad: G,
    which: (Evaluator, Evaluator),
) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> f64,
    G: Fn(&[f64], &[f64], &mut [f64]),
{
    let n = q.len();
    let mut analytic = vec![0.0; n];
    grad(q, p, &mut analytic);
    if analytic.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(which.1));
    }
    let mut qw = q.to_vec();
    let mut pw = p.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..n {
        let (plus, minus) = if wrt_q {
            qw[i] = q[i] + step;
            let a = checked(f(&qw, p), which.0)?;
            qw[i] = q[i] - step;
            let b = checked(f(&qw, p), which.0)?;
            qw[i] = q[i];
            (a, b)
        } else {
            pw[i] = p[i] + step;
            let a = checked(f(q, &pw), which.0)?;
            pw[i] = p[i] - step;
            let b = checked(f(q, &pw), which.0)?;
            pw[i] = p[i];
            (a, b)
        };
        let fd = (plus - minus) / (2.0 * step);
        worst = worst.max((analytic[i] - fd).abs() / (1.0 + analytic[i].abs()));
    }
    Ok(worst)
}

/// Compare every supplied gradient with central differences of the
/// corresponding Hamiltonian at `point`.
pub fn check_gradients<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    point: &PhaseState,
    step: f64,
) -> Result<GradientReport> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::InvalidArgument("gradient check step must lie in (0, 1e-2]"));
    }
    if !point.is_finite() {
        return Err(Error::InvalidArgument("gradient check point must be finite"));
    }
    if point.dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            what: "check point",
            expected: sys.dim(),
            found: point.dim(),
        });
    }
    let (q, p) = (&point.q[..], &point.p[..]);
    let hq = grad_error(
        q,
        p,
        step,
        true,
        |q, p| sys.hamiltonian(q, p),
        |q, p, o| sys.add_hamiltonian_grad_q(q, p, 1.0, o),
        (Evaluator::Hamiltonian, Evaluator::HamiltonianGradQ),
    )?;
    let hp = grad_error(
        q,
        p,
        step,
        false,
        |q, p| sys.hamiltonian(q, p),
        |q, p, o| sys.add_hamiltonian_grad_p(q, p, 1.0, o),
        (Evaluator::Hamiltonian, Evaluator::HamiltonianGradP),
    )?;
    let mut noise_q = Vec::with_capacity(sys.channels());
    let mut noise_p = Vec::with_capacity(sys.channels());
    for m in 0..sys.channels() {
        noise_q.push(grad_error(
            q,
            p,
            step,
            true,
            |q, p| sys.noise_hamiltonian(m, q, p),
            |q, p, o| sys.add_noise_grad_q(m, q, p, 1.0, o),
            (Evaluator::NoiseHamiltonian(m), Evaluator::NoiseGradQ(m)),
        )?);
        noise_p.push(grad_error(
            q,
            p,
            step,
            false,
            |q, p| sys.noise_hamiltonian(m, q, p),
            |q, p, o| sys.add_noise_grad_p(m, q, p, 1.0, o),
            (Evaluator::NoiseHamiltonian(m), Evaluator::NoiseGradP(m)),
        )?);
    }
    Ok(GradientReport {
        hamiltonian_q: hq,
        hamiltonian_p: hp,
        noise_q,
        noise_p,
    })
}

/// Itô form `dz = A dt + Σ_m B_m dW_m` of the Stratonovich system.
#[derive(Debug, Clone, PartialEq)]
pub struct ItoCoefficients {
    /// Length `2N`, `(q-part, p-part)`.
    pub drift: Vec<f64>,
    /// One length-`2N` vector per channel.
    pub diffusion: Vec<Vec<f64>>,
}

/// `B_m = (∂h_m/∂p, −∂h_m/∂q)`.
pub fn diffusion_vector<S: StochasticHamiltonian + ?Sized>(sys: &S, m: usize, q: &[f64], p: &[f64], out: &mut [f64]) {
    let n = q.len();
    out.iter_mut().for_each(|x| *x = 0.0);
    let (bq, bp) = out.split_at_mut(n);
    sys.add_noise_grad_p(m, q, p, 1.0, bq);
    sys.add_noise_grad_q(m, q, p, -1.0, bp);
}

/// `out += scale · (∂B_m) B_m`, where `∂B_m` is assembled from the Hessian
/// of `h_m`. This is the Itô–Stratonovich drift correction (times two).
pub fn add_diffusion_self_derivative(hess: &Hessian, b: &[f64], scale: f64, out: &mut [f64]) {
    let n = hess.n;
    let (bq, bp) = b.split_at(n);
    for a in 0..n {
        let mut dq = 0.0;
        let mut dp = 0.0;
        for c in 0..n {
            // ∂B^q_a/∂q_c = ∂²h/∂q_c∂p_a, ∂B^q_a/∂p_c = ∂²h/∂p_a∂p_c
            dq += hess.qp[c * n + a] * bq[c] + hess.pp[a * n + c] * bp[c];
            // ∂B^p_a/∂q_c = −∂²h/∂q_a∂q_c, ∂B^p_a/∂p_c = −∂²h/∂q_a∂p_c
            dp -= hess.qq[a * n + c] * bq[c] + hess.qp[a * n + c] * bp[c];
        }
        out[a] += scale * dq;
        out[n + a] += scale * dp;
    }
}

/// Stratonovich drift `(∂H/∂p, −∂H/∂q)`.
pub fn stratonovich_drift<S: StochasticHamiltonian + ?Sized>(sys: &S, q: &[f64], p: &[f64], out: &mut [f64]) {
    let n = q.len();
    out.iter_mut().for_each(|x| *x = 0.0);
    let (aq, ap) = out.split_at_mut(n);
    sys.add_hamiltonian_grad_p(q, p, 1.0, aq);
    sys.add_hamiltonian_grad_q(q, p, -1.0, ap);
}

/// Drift and diffusion of the equivalent Itô SDE.
pub fn ito_coefficients<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    z: &PhaseState,
    policy: HessianPolicy,
) -> Result<ItoCoefficients> {
    let channels = sys.channels();
    if channels == 0 {
        return Err(Error::InvalidArgument(
            "Itô coefficients need at least one noise channel",
        ));
    }
    let n = sys.dim();
    if z.dim() != n {
        return Err(Error::DimensionMismatch {
            what: "phase state",
            expected: n,
            found: z.dim(),
        });
    }
    let mut drift = vec![0.0; 2 * n];
    stratonovich_drift(sys, &z.q, &z.p, &mut drift);
    let mut diffusion = Vec::with_capacity(channels);
    for m in 0..channels {
        let mut b = vec![0.0; 2 * n];
        diffusion_vector(sys, m, &z.q, &z.p, &mut b);
        let hess = noise_hessian(sys, m, &z.q, &z.p, policy)?;
        add_diffusion_self_derivative(&hess, &b, 0.5, &mut drift);
        diffusion.push(b);
    }
    Ok(ItoCoefficients { drift, diffusion })
}

/// Spot-check the declared [`Structure`] flags at `samples` pseudo-random
/// points in `[-2, 2]^{2N}`.
pub fn verify_structure<S: StochasticHamiltonian + ?Sized>(sys: &S, seed: u64, samples: usize) -> Result<()> {
    let n = sys.dim();
    let st = sys.structure();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for _ in 0..samples {
        let q: Vec<f64> = (0..n).map(|_| uniform()).collect();
        let p: Vec<f64> = (0..n).map(|_| uniform()).collect();
        let q2: Vec<f64> = (0..n).map(|_| uniform()).collect();
        let p2: Vec<f64> = (0..n).map(|_| uniform()).collect();
        if st.h_independent_of_p {
            for m in 0..sys.channels() {
                set_grad(&mut a, |o| sys.add_noise_grad_p(m, &q, &p, 1.0, o));
                if a.iter().any(|x| *x != 0.0) {
                    return Err(Error::Configuration("h declared independent of p but dh/dp is nonzero"));
                }
            }
        }
        if st.separable {
            set_grad(&mut a, |o| sys.add_hamiltonian_grad_q(&q, &p, 1.0, o));
            set_grad(&mut b, |o| sys.add_hamiltonian_grad_q(&q, &p2, 1.0, o));
            let q_ok = a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            set_grad(&mut a, |o| sys.add_hamiltonian_grad_p(&q, &p, 1.0, o));
            set_grad(&mut b, |o| sys.add_hamiltonian_grad_p(&q2, &p, 1.0, o));
            let p_ok = a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            if !(q_ok && p_ok) {
                return Err(Error::Configuration(
                    "H declared separable but its gradients are coupled",
                ));
            }
        }
        if st.additive_noise {
            for m in 0..sys.channels() {
                set_grad(&mut a, |o| sys.add_noise_grad_q(m, &q, &p, 1.0, o));
                set_grad(&mut b, |o| sys.add_noise_grad_q(m, &q2, &p2, 1.0, o));
                if a.iter().zip(&b).any(|(x, y)| x != y) {
                    return Err(Error::Configuration("noise declared additive but dh/dq varies"));
                }
            }
        }
    }
    Ok(())
}

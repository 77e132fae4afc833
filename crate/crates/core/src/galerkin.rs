//! The generic stochastic Galerkin variational integrator.
//!
//! Trajectories on `[t_k, t_k + Δt]` are degree-`s` polynomials
//! `q_d(τ) = Σ_μ q^μ l_μ(τ)` with `q^0 = q_k`. Momenta `P_i` live on the
//! drift quadrature nodes. One step solves for the unknowns
//! `x = (q^1, …, q^s, P_1, …, P_r̄)`, each an `N`-vector, from
//!
//! ```text
//! R_0 + p_k = 0
//! R_μ       = 0                                        μ = 1..s-1
//! α_i (V_i − Δt ∂H/∂p(Q_i,P_i)) − β_i Σ_m ΔW_m ∂h_m/∂p(Q_i,P_i) = 0
//! ```
//!
//! where `Q_i = q_d(c̄_i)`, `V_i = q̇_d(c̄_i)` and
//!
//! ```text
//! R_μ = Σ_i ᾱ_i [P_i l̇_μ(c̄_i) − Δt ∂H/∂q(Q_i,P_i) l_μ(c̄_i)]
//!     − Σ_m ΔW_m Σ_j β̃_j ∂h_m/∂q(Q̃_j, P̃_j) l_μ(c̃_j).
//! ```
//!
//! Then `q_{k+1} = q^s` and `p_{k+1} = R_s`.
//!
//! A *coupled* scheme evaluates the noise on the drift nodes at `(Q_i, P_i)`.
//! A *decoupled* scheme may use separate diffusion nodes `c̃_j`; it needs
//! `h = h(q)` and drops the noise term from the node equations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Hessian, PhaseState, StochasticHamiltonian};
use crate::newton::Newton;
use crate::quadrature::{LagrangeBasis, QuadratureRule};

pub use crate::newton::NewtonStats as StepStats;

/// How the Newton Jacobian is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianMode {
    #[default]
    FiniteDifference,
    /// Assemble from Hessians when the system supplies all of them,
    /// otherwise fall back to finite differences.
    AnalyticIfAvailable,
}

/// Newton settings shared by every implicit stepper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Max-norm residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub jacobian: JacobianMode,
    /// Relative forward-difference step.
    pub fd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-12,
            max_iter: 50,
            jacobian: JacobianMode::FiniteDifference,
            fd_step: 1e-7,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("solver tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("solver needs max_iter >= 1"));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidArgument("finite-difference step must be positive"));
        }
        Ok(())
    }

    pub fn newton(&self) -> Newton {
        Newton::new(self.tol, self.max_iter, self.fd_step)
    }
}

/// Stage unknowns of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StageVector {
    pub n: usize,
    /// `q^1..q^s`, concatenated.
    pub q_controls: Vec<f64>,
    /// `P_1..P_r̄`, concatenated.
    pub p_stages: Vec<f64>,
}

impl StageVector {
    /// Every control point at `q` and every momentum stage at `p`.
    pub fn replicate(z: &PhaseState, s: usize, r: usize) -> Self {
        let mut q_controls = Vec::with_capacity(s * z.dim());
        let mut p_stages = Vec::with_capacity(r * z.dim());
        for _ in 0..s {
            q_controls.extend_from_slice(&z.q);
        }
        for _ in 0..r {
            p_stages.extend_from_slice(&z.p);
        }
        StageVector {
            n: z.dim(),
            q_controls,
            p_stages,
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut x = self.q_controls.clone();
        x.extend_from_slice(&self.p_stages);
        x
    }

    fn from_flat(n: usize, s: usize, x: &[f64]) -> Self {
        StageVector {
            n,
            q_controls: x[..s * n].to_vec(),
            p_stages: x[s * n..].to_vec(),
        }
    }
}

/// A Galerkin scheme: basis of degree `s`, drift rule `(ᾱ, c̄)` and
/// diffusion rule `(β̃, c̃)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GalerkinScheme {
    basis: LagrangeBasis,
    drift: QuadratureRule,
    diffusion: QuadratureRule,
    coupled: bool,
    /// `l_μ(c̄_i)` at `[i * (s+1) + μ]`
    l_drift: Vec<f64>,
    dl_drift: Vec<f64>,
    /// `l_μ(c̃_j)`
    l_diff: Vec<f64>,
}

impl GalerkinScheme {
    /// Drift and diffusion share nodes; `h` may depend on `p`.
    pub fn coupled(basis: LagrangeBasis, drift: QuadratureRule, diffusion: QuadratureRule) -> Result<Self> {
        if drift.nodes != diffusion.nodes {
            return Err(Error::Configuration(
                "coupled scheme needs one node set for drift and diffusion",
            ));
        }
        if drift
            .weights
            .iter()
            .zip(&diffusion.weights)
            .any(|(a, b)| *a == 0.0 && *b == 0.0)
        {
            return Err(Error::Configuration(
                "every node needs a nonzero drift or diffusion weight",
            ));
        }
        Self::build(basis, drift, diffusion, true)
    }

    /// Independent node sets; only valid for `h = h(q)`.
    pub fn decoupled(basis: LagrangeBasis, drift: QuadratureRule, diffusion: QuadratureRule) -> Result<Self> {
        if drift.weights.contains(&0.0) {
            return Err(Error::Configuration("decoupled scheme needs nonzero drift weights"));
        }
        Self::build(basis, drift, diffusion, false)
    }

    fn build(basis: LagrangeBasis, drift: QuadratureRule, diffusion: QuadratureRule, coupled: bool) -> Result<Self> {
        let table = |nodes: &[f64], f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
            nodes
                .iter()
                .flat_map(|&c| (0..=basis.degree()).map(move |mu| (c, mu)))
                .map(|(c, mu)| f(mu, c))
                .collect()
        };
        let l_drift = table(&drift.nodes, &|mu, c| basis.eval(mu, c));
        let dl_drift = table(&drift.nodes, &|mu, c| basis.deriv(mu, c));
        let l_diff = table(&diffusion.nodes, &|mu, c| basis.eval(mu, c));
        Ok(GalerkinScheme {
            basis,
            drift,
            diffusion,
            coupled,
            l_drift,
            dl_drift,
            l_diff,
        })
    }

    pub fn degree(&self) -> usize {
        self.basis.degree()
    }

    pub fn basis(&self) -> &LagrangeBasis {
        &self.basis
    }

    pub fn drift_rule(&self) -> &QuadratureRule {
        &self.drift
    }

    pub fn diffusion_rule(&self) -> &QuadratureRule {
        &self.diffusion
    }

    pub fn requires_h_independent_of_p(&self) -> bool {
        !self.coupled
    }

    pub fn momentum_stages(&self) -> usize {
        self.drift.len()
    }

    /// Total number of scalar unknowns for dimension `n`.
    pub fn unknowns(&self, n: usize) -> usize {
        (self.degree() + self.momentum_stages()) * n
    }

    /// Reject incompatible systems and increment shapes.
    pub fn check<S: StochasticHamiltonian + ?Sized>(&self, sys: &S, z: &PhaseState, dw: &[f64]) -> Result<()> {
        if z.dim() != sys.dim() {
            return Err(Error::DimensionMismatch {
                what: "phase state",
                expected: sys.dim(),
                found: z.dim(),
            });
        }
        if dw.len() != sys.channels() {
            return Err(Error::DimensionMismatch {
                what: "Wiener increments",
                expected: sys.channels(),
                found: dw.len(),
            });
        }
        if !self.coupled && !sys.structure().h_independent_of_p {
            return Err(Error::Configuration(
                "scheme requires noise Hamiltonians independent of p",
            ));
        }
        Ok(())
    }

    /// Residual of the stage system at `stages`.
    pub fn residual<S: StochasticHamiltonian + ?Sized>(
        &self,
        sys: &S,
        z: &PhaseState,
        stages: &StageVector,
        dt: f64,
        dw: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(sys, z, dw)?;
        let n = z.dim();
        let x = stages.flatten();
        if x.len() != self.unknowns(n) || stages.n != n {
            return Err(Error::DimensionMismatch {
                what: "stage vector",
                expected: self.unknowns(n),
                found: x.len(),
            });
        }
        let mut ws = GalerkinWorkspace::new(self, n, &SolverConfig::default());
        let mut out = vec![0.0; x.len()];
        ws.bufs.residual(self, sys, &z.q, &z.p, &x, dt, dw, &mut out);
        Ok(out)
    }

    /// One step from `z` with an optional initial guess.
    pub fn step<S: StochasticHamiltonian + ?Sized>(
        &self,
        sys: &S,
        z: &PhaseState,
        dt: f64,
        dw: &[f64],
        cfg: &SolverConfig,
        warm_start: Option<&StageVector>,
    ) -> Result<(PhaseState, StageVector, StepStats)> {
        cfg.validate()?;
        self.check(sys, z, dw)?;
        let n = z.dim();
        let mut ws = GalerkinWorkspace::new(self, n, cfg);
        match warm_start {
            Some(w) => {
                let x = w.flatten();
                if x.len() != ws.x.len() {
                    return Err(Error::DimensionMismatch {
                        what: "warm start",
                        expected: ws.x.len(),
                        found: x.len(),
                    });
                }
                ws.x.copy_from_slice(&x);
            }
            None => ws.initial_guess(self, &z.q, &z.p),
        }
        let mut q = z.q.clone();
        let mut p = z.p.clone();
        let stats = ws.solve_and_update(self, sys, &mut q, &mut p, dt, dw)?;
        let stages = StageVector::from_flat(n, self.degree(), &ws.x);
        Ok((PhaseState { q, p }, stages, stats))
    }
}

/// Reusable buffers for stepping one trajectory.
#[derive(Debug, Clone)]
pub struct GalerkinWorkspace {
    newton: Newton,
    analytic: bool,
    x: Vec<f64>,
    bufs: Buffers,
}

#[derive(Debug, Clone)]
struct Buffers {
    n: usize,
    q_drift: Vec<f64>,
    v_drift: Vec<f64>,
    q_diff: Vec<f64>,
    grad_h: Vec<f64>,
    grad_noise: Vec<f64>,
    tmp: Vec<f64>,
}

impl GalerkinWorkspace {
    pub fn new(scheme: &GalerkinScheme, n: usize, cfg: &SolverConfig) -> Self {
        let r = scheme.drift.len();
        let rt = scheme.diffusion.len();
        GalerkinWorkspace {
            newton: cfg.newton(),
            analytic: cfg.jacobian == JacobianMode::AnalyticIfAvailable,
            x: vec![0.0; scheme.unknowns(n)],
            bufs: Buffers {
                n,
                q_drift: vec![0.0; r * n],
                v_drift: vec![0.0; r * n],
                q_diff: vec![0.0; rt * n],
                grad_h: vec![0.0; r * n],
                grad_noise: vec![0.0; rt * n],
                tmp: vec![0.0; n],
            },
        }
    }

    /// Replicate `(q_k, p_k)` into every unknown.
    pub fn initial_guess(&mut self, scheme: &GalerkinScheme, q: &[f64], p: &[f64]) {
        let n = q.len();
        let s = scheme.degree();
        for mu in 0..s {
            self.x[mu * n..(mu + 1) * n].copy_from_slice(q);
        }
        for i in 0..scheme.momentum_stages() {
            self.x[(s + i) * n..(s + i + 1) * n].copy_from_slice(p);
        }
    }

    /// Solve from the current guess and overwrite `(q, p)` with the next
    /// state. On failure `(q, p)` are untouched.
    pub fn solve_and_update<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        scheme: &GalerkinScheme,
        sys: &S,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let GalerkinWorkspace {
            newton,
            analytic,
            x,
            bufs,
        } = self;
        let use_analytic = *analytic
            && sys.hamiltonian_hessian(q, p).is_some()
            && (0..sys.channels()).all(|m| sys.noise_hessian(m, q, p).is_some());
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let stats = if use_analytic {
            // Both closures need the buffers; the Jacobian keeps its own copy.
            let mut jb = bufs.clone();
            newton.solve_analytic(
                x,
                |x, r| bufs.residual(scheme, sys, qk, pk, x, dt, dw, r),
                |x, jac| jb.jacobian(scheme, sys, qk, x, dt, dw, jac),
            )?
        } else {
            newton.solve(x, |x, r| bufs.residual(scheme, sys, qk, pk, x, dt, dw, r))?
        };
        let n = q.len();
        let s = scheme.degree();
        let mut p_next = vec![0.0; n];
        bufs.stage_values(scheme, sys, qk, pk, x, dt, dw);
        bufs.momentum_row(scheme, s, x, dt, &mut p_next);
        q.copy_from_slice(&x[(s - 1) * n..s * n]);
        p.copy_from_slice(&p_next);
        Ok(stats)
    }
}

impl Buffers {
    /// Control value `q^μ` (with `q^0 = q_k`).
    #[inline]
    fn control<'a>(x: &'a [f64], qk: &'a [f64], mu: usize, n: usize) -> &'a [f64] {
        if mu == 0 {
            qk
        } else {
            &x[(mu - 1) * n..mu * n]
        }
    }

    /// Fill node positions, velocities and gradient sums.
    #[allow(clippy::too_many_arguments)]
    fn stage_values<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        scheme: &GalerkinScheme,
        sys: &S,
        qk: &[f64],
        pk: &[f64],
        x: &[f64],
        dt: f64,
        dw: &[f64],
    ) {
        let n = self.n;
        let s = scheme.degree();
        let sp1 = s + 1;
        let r = scheme.drift.len();
        self.q_drift.iter_mut().for_each(|v| *v = 0.0);
        self.v_drift.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..r {
            for mu in 0..sp1 {
                let c = Self::control(x, qk, mu, n);
                let l = scheme.l_drift[i * sp1 + mu];
                let dl = scheme.dl_drift[i * sp1 + mu];
                for a in 0..n {
                    self.q_drift[i * n + a] += l * c[a];
                    self.v_drift[i * n + a] += dl * c[a];
                }
            }
        }
        let ps = &x[s * n..];
        self.grad_h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..r {
            let (qi, pi) = (&self.q_drift[i * n..(i + 1) * n], &ps[i * n..(i + 1) * n]);
            sys.add_hamiltonian_grad_q(qi, pi, dt, &mut self.grad_h[i * n..(i + 1) * n]);
        }
        self.grad_noise.iter_mut().for_each(|v| *v = 0.0);
        if scheme.coupled {
            for i in 0..r {
                let (qi, pi) = (&self.q_drift[i * n..(i + 1) * n], &ps[i * n..(i + 1) * n]);
                let out = &mut self.grad_noise[i * n..(i + 1) * n];
                for (m, &w) in dw.iter().enumerate() {
                    if w != 0.0 {
                        sys.add_noise_grad_q(m, qi, pi, w, out);
                    }
                }
            }
        } else {
            let rt = scheme.diffusion.len();
            self.q_diff.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..rt {
                for mu in 0..sp1 {
                    let c = Self::control(x, qk, mu, n);
                    let l = scheme.l_diff[j * sp1 + mu];
                    for a in 0..n {
                        self.q_diff[j * n + a] += l * c[a];
                    }
                }
                let qj = &self.q_diff[j * n..(j + 1) * n];
                let out = &mut self.grad_noise[j * n..(j + 1) * n];
                for (m, &w) in dw.iter().enumerate() {
                    if w != 0.0 {
                        sys.add_noise_grad_q(m, qj, pk, w, out);
                    }
                }
            }
        }
    }

    /// `out = R_μ`, assuming [`Buffers::stage_values`] is current.
    fn momentum_row(&self, scheme: &GalerkinScheme, mu: usize, x: &[f64], _dt: f64, out: &mut [f64]) {
        let n = self.n;
        let s = scheme.degree();
        let sp1 = s + 1;
        let ps = &x[s * n..];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &alpha) in scheme.drift.weights.iter().enumerate() {
            let l = scheme.l_drift[i * sp1 + mu];
            let dl = scheme.dl_drift[i * sp1 + mu];
            for a in 0..n {
                out[a] += alpha * (ps[i * n + a] * dl - self.grad_h[i * n + a] * l);
            }
        }
        let table = if scheme.coupled {
            &scheme.l_drift
        } else {
            &scheme.l_diff
        };
        for (j, &beta) in scheme.diffusion.weights.iter().enumerate() {
            let l = table[j * sp1 + mu];
            for a in 0..n {
                out[a] -= beta * l * self.grad_noise[j * n + a];
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn residual<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        scheme: &GalerkinScheme,
        sys: &S,
        qk: &[f64],
        pk: &[f64],
        x: &[f64],
        dt: f64,
        dw: &[f64],
        out: &mut [f64],
    ) {
        let n = self.n;
        let s = scheme.degree();
        self.stage_values(scheme, sys, qk, pk, x, dt, dw);
        for mu in 0..s {
            let (head, _) = out[mu * n..].split_at_mut(n);
            self.momentum_row(scheme, mu, x, dt, head);
            if mu == 0 {
                for a in 0..n {
                    head[a] += pk[a];
                }
            }
        }
        let ps = &x[s * n..];
        for (i, &alpha) in scheme.drift.weights.iter().enumerate() {
            let (qi, pi) = (&self.q_drift[i * n..(i + 1) * n], &ps[i * n..(i + 1) * n]);
            // α_i (V_i − Δt H_p) − β_i Σ ΔW h_p, divided by α_i when possible
            let (wa, wb) = if alpha != 0.0 {
                (
                    1.0,
                    if scheme.coupled {
                        scheme.diffusion.weights[i] / alpha
                    } else {
                        0.0
                    },
                )
            } else {
                (0.0, scheme.diffusion.weights[i])
            };
            self.tmp.iter_mut().for_each(|v| *v = 0.0);
            if wa != 0.0 {
                sys.add_hamiltonian_grad_p(qi, pi, -dt, &mut self.tmp);
            }
            if wb != 0.0 {
                for (m, &w) in dw.iter().enumerate() {
                    if w != 0.0 {
                        sys.add_noise_grad_p(m, qi, pi, -wb * w, &mut self.tmp);
                    }
                }
            }
            let row = &mut out[(s + i) * n..(s + i + 1) * n];
            for a in 0..n {
                row[a] = wa * self.v_drift[i * n + a] + self.tmp[a];
            }
        }
    }

    /// Analytic Jacobian of [`Buffers::residual`]. Every Hessian must exist.
    #[allow(clippy::too_many_arguments)]
    fn jacobian<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        scheme: &GalerkinScheme,
        sys: &S,
        qk: &[f64],
        x: &[f64],
        dt: f64,
        dw: &[f64],
        jac: &mut [f64],
    ) {
        let n = self.n;
        let s = scheme.degree();
        let sp1 = s + 1;
        let r = scheme.drift.len();
        let dim = (s + r) * n;
        jac.iter_mut().for_each(|v| *v = 0.0);
        // positions on the nodes
        self.q_drift.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..r {
            for mu in 0..sp1 {
                let c = Self::control(x, qk, mu, n);
                let l = scheme.l_drift[i * sp1 + mu];
                for a in 0..n {
                    self.q_drift[i * n + a] += l * c[a];
                }
            }
        }
        let ps = &x[s * n..];
        let noise_hess = |q: &[f64], p: &[f64]| -> Hessian {
            let mut acc = Hessian::zeros(n);
            for (m, &w) in dw.iter().enumerate() {
                if w != 0.0 {
                    let h = sys.noise_hessian(m, q, p).unwrap_or_else(|| Hessian::zeros(n));
                    for (dst, src) in [(&mut acc.qq, &h.qq), (&mut acc.qp, &h.qp), (&mut acc.pp, &h.pp)] {
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += w * v);
                    }
                }
            }
            acc
        };
        let hh: Vec<Hessian> = (0..r)
            .map(|i| {
                let (qi, pi) = (&self.q_drift[i * n..(i + 1) * n], &ps[i * n..(i + 1) * n]);
                sys.hamiltonian_hessian(qi, pi).unwrap_or_else(|| Hessian::zeros(n))
            })
            .collect();
        let (gh, l_noise): (Vec<Hessian>, &[f64]) = if scheme.coupled {
            (
                (0..r)
                    .map(|i| noise_hess(&self.q_drift[i * n..(i + 1) * n], &ps[i * n..(i + 1) * n]))
                    .collect(),
                &scheme.l_drift,
            )
        } else {
            let rt = scheme.diffusion.len();
            self.q_diff.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..rt {
                for mu in 0..sp1 {
                    let c = Self::control(x, qk, mu, n);
                    let l = scheme.l_diff[j * sp1 + mu];
                    for a in 0..n {
                        self.q_diff[j * n + a] += l * c[a];
                    }
                }
            }
            (
                (0..rt)
                    .map(|j| noise_hess(&self.q_diff[j * n..(j + 1) * n], qk))
                    .collect(),
                &scheme.l_diff,
            )
        };
        let mut set = |row_block: usize, col_block: usize, a: usize, c: usize, v: f64| {
            jac[(row_block * n + a) * dim + col_block * n + c] += v;
        };
        // momentum rows μ = 0..s-1
        for mu in 0..s {
            for nu in 1..=s {
                for (i, &alpha) in scheme.drift.weights.iter().enumerate() {
                    let f = -alpha * dt * scheme.l_drift[i * sp1 + mu] * scheme.l_drift[i * sp1 + nu];
                    for a in 0..n {
                        for c in 0..n {
                            set(mu, nu - 1, a, c, f * hh[i].qq[a * n + c]);
                        }
                    }
                }
                for (j, &beta) in scheme.diffusion.weights.iter().enumerate() {
                    let f = -beta * l_noise[j * sp1 + mu] * l_noise[j * sp1 + nu];
                    for a in 0..n {
                        for c in 0..n {
                            set(mu, nu - 1, a, c, f * gh[j].qq[a * n + c]);
                        }
                    }
                }
            }
            for (k, &alpha) in scheme.drift.weights.iter().enumerate() {
                let l = scheme.l_drift[k * sp1 + mu];
                let dl = scheme.dl_drift[k * sp1 + mu];
                let beta = if scheme.coupled {
                    scheme.diffusion.weights[k]
                } else {
                    0.0
                };
                for a in 0..n {
                    set(mu, s + k, a, a, alpha * dl);
                    for c in 0..n {
                        set(
                            mu,
                            s + k,
                            a,
                            c,
                            -alpha * dt * l * hh[k].qp[a * n + c] - beta * l * gh[k].qp[a * n + c],
                        );
                    }
                }
            }
        }
        // node rows
        for (i, &alpha) in scheme.drift.weights.iter().enumerate() {
            let (wa, wb) = if alpha != 0.0 {
                (
                    1.0,
                    if scheme.coupled {
                        scheme.diffusion.weights[i] / alpha
                    } else {
                        0.0
                    },
                )
            } else {
                (0.0, scheme.diffusion.weights[i])
            };
            for nu in 1..=s {
                let l = scheme.l_drift[i * sp1 + nu];
                let dl = scheme.dl_drift[i * sp1 + nu];
                for a in 0..n {
                    set(s + i, nu - 1, a, a, wa * dl);
                    for c in 0..n {
                        // ∂(∂f/∂p_a)/∂q_c = qp[c][a]
                        let v = -wa * dt * l * hh[i].qp[c * n + a] - wb * l * gh[i].qp[c * n + a];
                        set(s + i, nu - 1, a, c, v);
                    }
                }
            }
            for a in 0..n {
                for c in 0..n {
                    let v = -wa * dt * hh[i].pp[a * n + c] - wb * gh[i].pp[a * n + c];
                    set(s + i, s + i, a, c, v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BuiltinSystem, NoiseChannel, SystemDef};
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn midpoint() -> GalerkinScheme {
        GalerkinScheme::coupled(
            LagrangeBasis::equispaced(1).unwrap(),
            QuadratureRule::named("midpoint").unwrap(),
            QuadratureRule::named("midpoint").unwrap(),
        )
        .unwrap()
    }

    fn lobatto2() -> GalerkinScheme {
        let t = QuadratureRule::named("trapezoidal").unwrap();
        GalerkinScheme::coupled(LagrangeBasis::equispaced(2).unwrap(), t.clone(), t).unwrap()
    }

    fn rect_lob() -> GalerkinScheme {
        GalerkinScheme::decoupled(
            LagrangeBasis::equispaced(1).unwrap(),
            QuadratureRule::named("rectangle").unwrap(),
            QuadratureRule::named("trapezoidal").unwrap(),
        )
        .unwrap()
    }

    /// Closed-form stochastic midpoint step for the Kubo oscillator: with
    /// `ε = Δt + βΔW`, the step is the Cayley transform of `ε J`.
    fn kubo_midpoint(q: f64, p: f64, eps: f64) -> (f64, f64) {
        let e = 0.5 * eps;
        let d = 1.0 + e * e;
        (
            ((1.0 - e * e) * q + 2.0 * e * p) / d,
            ((1.0 - e * e) * p - 2.0 * e * q) / d,
        )
    }

    #[test]
    fn deterministic_midpoint_stages_solve_residual() {
        let sys = BuiltinSystem::Synchrotron { beta: 0.0 };
        let z = PhaseState::scalar(0.4, 0.9);
        let dt = 0.1;
        // fixed point iteration on the implicit midpoint rule
        let (mut q1, mut p1) = (z.q[0], z.p[0]);
        for _ in 0..200 {
            let qm = 0.5 * (z.q[0] + q1);
            let pm = 0.5 * (z.p[0] + p1);
            q1 = z.q[0] + dt * pm;
            p1 = z.p[0] - dt * libm::sin(qm);
        }
        let stages = StageVector {
            n: 1,
            q_controls: vec![q1],
            p_stages: vec![0.5 * (z.p[0] + p1)],
        };
        let r = midpoint().residual(&sys, &z, &stages, dt, &[0.0]).unwrap();
        assert!(r.iter().all(|v| v.abs() <= 1e-12), "{r:?}");
    }

    #[test]
    fn kubo_midpoint_stages_solve_residual() {
        let beta = 0.1;
        let sys = BuiltinSystem::Kubo { beta };
        let z = PhaseState::scalar(0.3, -0.8);
        let (dt, dw) = (0.05, 0.2);
        let (q1, p1) = kubo_midpoint(0.3, -0.8, dt + beta * dw);
        let stages = StageVector {
            n: 1,
            q_controls: vec![q1],
            p_stages: vec![0.5 * (-0.8 + p1)],
        };
        let r = midpoint().residual(&sys, &z, &stages, dt, &[dw]).unwrap();
        assert!(r.iter().all(|v| v.abs() <= 1e-10), "{r:?}");
        let bogus = StageVector {
            n: 1,
            q_controls: vec![1.7],
            p_stages: vec![-2.0],
        };
        let r = midpoint().residual(&sys, &z, &bogus, dt, &[dw]).unwrap();
        assert!(r.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn kubo_midpoint_step_matches_closed_form_and_conserves_h() {
        let sys = BuiltinSystem::Kubo { beta: 0.1 };
        let z = PhaseState::scalar(0.0, 1.0);
        let cfg = SolverConfig::default();
        let (z1, _, _) = midpoint().step(&sys, &z, 0.01, &[0.0], &cfg, None).unwrap();
        let (q1, p1) = kubo_midpoint(0.0, 1.0, 0.01);
        assert!((z1.q[0] - q1).abs() <= 1e-12 && (z1.p[0] - p1).abs() <= 1e-12);

        let (z2, _, _) = midpoint().step(&sys, &z, 0.1, &[0.37], &cfg, None).unwrap();
        let h0 = sys.hamiltonian(&z.q, &z.p);
        assert!((sys.hamiltonian(&z2.q, &z2.p) - h0).abs() <= 1e-10);
    }

    #[test]
    fn zero_step_is_identity() {
        let sys = BuiltinSystem::Kubo { beta: 0.1 };
        let z = PhaseState::scalar(0.7, -0.2);
        for scheme in [midpoint(), lobatto2()] {
            let (z1, _, stats) = scheme
                .step(&sys, &z, 0.0, &[0.0], &SolverConfig::default(), None)
                .unwrap();
            assert!(z1.distance(&z) <= 1e-15);
            assert_eq!(stats.iterations, 0);
        }
    }

    #[test]
    fn decoupled_scheme_rejects_p_dependent_noise() {
        let sys = BuiltinSystem::Kubo { beta: 0.1 };
        let z = PhaseState::scalar(0.0, 1.0);
        let err = rect_lob()
            .step(&sys, &z, 0.1, &[0.1], &SolverConfig::default(), None)
            .unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
    }

    #[test]
    fn dimension_errors() {
        let sys = BuiltinSystem::Kubo { beta: 0.1 };
        let z = PhaseState::scalar(0.0, 1.0);
        assert!(matches!(
            midpoint().step(&sys, &z, 0.1, &[0.1, 0.2], &SolverConfig::default(), None),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = StageVector {
            n: 1,
            q_controls: vec![0.0, 0.0],
            p_stages: vec![0.0],
        };
        assert!(midpoint().residual(&sys, &z, &bad, 0.1, &[0.1]).is_err());
    }

    #[test]
    fn warm_start_converges_to_same_point() {
        let sys = BuiltinSystem::Synchrotron { beta: 0.2 };
        let z = PhaseState::scalar(1.0, 0.3);
        let cfg = SolverConfig::default();
        let (a, stages, _) = lobatto2().step(&sys, &z, 0.2, &[0.3], &cfg, None).unwrap();
        let (b, _, stats) = lobatto2().step(&sys, &z, 0.2, &[0.3], &cfg, Some(&stages)).unwrap();
        assert!(a.distance(&b) <= 1e-12);
        assert!(stats.iterations <= 1);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut u = move || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        let schemes = [midpoint(), lobatto2(), rect_lob()];
        let systems = [
            BuiltinSystem::Kubo { beta: 0.3 },
            BuiltinSystem::Synchrotron { beta: 0.3 },
            BuiltinSystem::PlanarRotational { sigma: 0.4 },
        ];
        for scheme in &schemes {
            for sys in &systems {
                if scheme.requires_h_independent_of_p() && !sys.structure().h_independent_of_p {
                    continue;
                }
                let n = sys.dim();
                let q: Vec<f64> = (0..n).map(|_| u()).collect();
                let p: Vec<f64> = (0..n).map(|_| u()).collect();
                let dim = scheme.unknowns(n);
                let x: Vec<f64> = (0..dim).map(|_| u()).collect();
                let (dt, dw) = (0.3, [0.4 * u()]);
                let mut ws = GalerkinWorkspace::new(scheme, n, &SolverConfig::default());
                let mut jac = vec![0.0; dim * dim];
                ws.bufs.jacobian(scheme, sys, &q, &x, dt, &dw, &mut jac);
                let mut r0 = vec![0.0; dim];
                let mut r1 = vec![0.0; dim];
                for j in 0..dim {
                    let h = 1e-6;
                    let mut xp = x.clone();
                    xp[j] += h;
                    let mut xm = x.clone();
                    xm[j] -= h;
                    ws.bufs.residual(scheme, sys, &q, &p, &xp, dt, &dw, &mut r1);
                    ws.bufs.residual(scheme, sys, &q, &p, &xm, dt, &dw, &mut r0);
                    for i in 0..dim {
                        let fd = (r1[i] - r0[i]) / (2.0 * h);
                        assert!((fd - jac[i * dim + j]).abs() <= 1e-7, "{scheme:?} {sys:?} ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn analytic_and_fd_newton_agree() {
        let sys = BuiltinSystem::Synchrotron { beta: 0.2 };
        let z = PhaseState::scalar(0.5, -0.4);
        let fd = SolverConfig::default();
        let an = SolverConfig {
            jacobian: JacobianMode::AnalyticIfAvailable,
            ..fd
        };
        for scheme in [midpoint(), lobatto2(), rect_lob()] {
            let (a, _, _) = scheme.step(&sys, &z, 0.2, &[0.25], &fd, None).unwrap();
            let (b, _, _) = scheme.step(&sys, &z, 0.2, &[0.25], &an, None).unwrap();
            assert!(a.distance(&b) <= 1e-12);
        }
    }

    #[test]
    fn two_channel_noise_matches_summed_channel() {
        // h_1 = a sin q, h_2 = b sin q behaves like one channel (a ΔW_1 + b ΔW_2) sin q
        let two = SystemDef::new(
            1,
            |q, p| 0.5 * p[0] * p[0] - libm::cos(q[0]),
            |q, _, s, o| o[0] += s * libm::sin(q[0]),
            |_, p, s, o| o[0] += s * p[0],
        )
        .with_noise(NoiseChannel::new(
            |q, _| 0.1 * libm::sin(q[0]),
            |q, _, s, o| o[0] += s * 0.1 * libm::cos(q[0]),
            |_, _, _, _| {},
        ))
        .with_noise(NoiseChannel::new(
            |q, _| 0.3 * libm::sin(q[0]),
            |q, _, s, o| o[0] += s * 0.3 * libm::cos(q[0]),
            |_, _, _, _| {},
        ));
        let one = BuiltinSystem::Synchrotron { beta: 1.0 };
        let z = PhaseState::scalar(0.2, 0.6);
        let (w1, w2) = (0.15, -0.4);
        let cfg = SolverConfig::default();
        let (a, _, _) = lobatto2().step(&two, &z, 0.1, &[w1, w2], &cfg, None).unwrap();
        let (b, _, _) = lobatto2()
            .step(&one, &z, 0.1, &[0.1 * w1 + 0.3 * w2], &cfg, None)
            .unwrap();
        assert!(a.distance(&b) <= 1e-12);
    }
}

//! Stochastic partitioned Runge–Kutta (SPRK) methods.
//!
//! ```text
//! Q_i = q_k + Δt Σ_j a_ij ∂H/∂p(Q_j,P_j) + ΔW Σ_j b_ij ∂h/∂p(Q_j,P_j)
//! P_i = p_k − Δt Σ_j ā_ij ∂H/∂q(Q_j,P_j) − ΔW Σ_j b̄_ij ∂h/∂q(Q_j,P_j)
//! q_{k+1} = q_k + Δt Σ_i α_i ∂H/∂p(Q_i,P_i) + ΔW Σ_i β_i ∂h/∂p(Q_i,P_i)
//! p_{k+1} = p_k − Δt Σ_i α_i ∂H/∂q(Q_i,P_i) − ΔW Σ_i β_i ∂h/∂q(Q_i,P_i)
//! ```
//!
//! With several channels every `ΔW ∂h` term becomes `Σ_m ΔW_m ∂h_m`.
//! [`Sprk32Tableau`] is the separable variant that also uses `ΔZ`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::galerkin::{GalerkinScheme, SolverConfig, StepStats};
use crate::model::{PhaseState, StochasticHamiltonian};
use crate::newton::Newton;
use crate::noise::Increments;
use crate::quadrature::{partial_integrals, weights_from_nodes};

/// Square matrices are stored row-major, `m[i * s + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SprkTableau {
    pub s: usize,
    pub a: Vec<f64>,
    pub a_bar: Vec<f64>,
    pub b: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SprkTableau {
    pub fn new(
        a: Vec<f64>,
        a_bar: Vec<f64>,
        b: Vec<f64>,
        b_bar: Vec<f64>,
        alpha: Vec<f64>,
        beta: Vec<f64>,
    ) -> Result<Self> {
        let s = alpha.len();
        if s == 0 {
            return Err(Error::InvalidArgument("tableau needs at least one stage"));
        }
        for (what, m) in [("a", &a), ("a_bar", &a_bar), ("b", &b), ("b_bar", &b_bar)] {
            if m.len() != s * s {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: s * s,
                    found: m.len(),
                });
            }
        }
        if beta.len() != s {
            return Err(Error::DimensionMismatch {
                what: "beta",
                expected: s,
                found: beta.len(),
            });
        }
        Ok(SprkTableau {
            s,
            a,
            a_bar,
            b,
            b_bar,
            alpha,
            beta,
        })
    }

    /// One-stage tableau with every entry ½ and weights 1.
    pub fn midpoint() -> Self {
        SprkTableau::new(vec![0.5], vec![0.5], vec![0.5], vec![0.5], vec![1.0], vec![1.0]).unwrap()
    }

    /// Two-stage Lobatto IIIA–IIIB pair.
    pub fn stormer_verlet() -> Self {
        let a = vec![0.0, 0.0, 0.5, 0.5];
        let a_bar = vec![0.5, 0.0, 0.5, 0.0];
        SprkTableau::new(a.clone(), a_bar.clone(), a, a_bar, vec![0.5, 0.5], vec![0.5, 0.5]).unwrap()
    }

    /// Largest violation of the four symplecticity identities.
    pub fn check_symplectic(&self) -> f64 {
        let s = self.s;
        let (al, be) = (&self.alpha, &self.beta);
        let mut worst = 0.0_f64;
        for i in 0..s {
            for j in 0..s {
                let ij = i * s + j;
                let ji = j * s + i;
                let c1 = al[i] * self.a_bar[ij] + al[j] * self.a[ji] - al[i] * al[j];
                let c2 = be[i] * self.a_bar[ij] + al[j] * self.b[ji] - be[i] * al[j];
                let c3 = al[i] * self.b_bar[ij] + be[j] * self.a[ji] - al[i] * be[j];
                let c4 = be[i] * self.b_bar[ij] + be[j] * self.b[ji] - be[i] * be[j];
                worst = worst.max(c1.abs()).max(c2.abs()).max(c3.abs()).max(c4.abs());
            }
        }
        worst
    }

    /// SPRK form of a coupled Galerkin scheme with `r = s` interpolatory
    /// drift weights.
    pub fn from_galerkin(scheme: &GalerkinScheme) -> Result<Self> {
        let s = scheme.degree();
        let drift = scheme.drift_rule();
        let diffusion = scheme.diffusion_rule();
        if scheme.requires_h_independent_of_p() || drift.nodes != diffusion.nodes {
            return Err(Error::Conversion("drift and diffusion must share one node set"));
        }
        if drift.len() != s {
            return Err(Error::Conversion("number of nodes must equal the polynomial degree"));
        }
        let alpha = &drift.weights;
        if alpha.contains(&0.0) {
            return Err(Error::Conversion("drift weights must be nonzero"));
        }
        let interp = weights_from_nodes(&drift.nodes).map_err(|_| Error::Conversion("nodes must be distinct"))?;
        if interp.iter().zip(alpha).any(|(x, y)| (x - y).abs() > 1e-13) {
            return Err(Error::Conversion(
                "drift weights must be the interpolatory weights of the nodes",
            ));
        }
        let beta = &diffusion.weights;
        let a = partial_integrals(&drift.nodes)?;
        let mut a_bar = vec![0.0; s * s];
        let mut b = vec![0.0; s * s];
        let mut b_bar = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                let (ij, ji) = (i * s + j, j * s + i);
                a_bar[ij] = alpha[j] * (alpha[i] - a[ji]) / alpha[i];
                b[ij] = beta[j] * a[ij] / alpha[j];
                b_bar[ij] = beta[j] * (alpha[i] - a[ji]) / alpha[i];
            }
        }
        SprkTableau::new(a, a_bar, b, b_bar, alpha.clone(), beta.clone())
    }

    /// One step, allocating a fresh workspace.
    pub fn step<S: StochasticHamiltonian + ?Sized>(
        &self,
        sys: &S,
        z: &PhaseState,
        dt: f64,
        dw: &[f64],
        cfg: &SolverConfig,
    ) -> Result<(PhaseState, StepStats)> {
        cfg.validate()?;
        check_shapes(sys, z, dw)?;
        let mut ws = SprkWorkspace::new(self.s, z.dim(), cfg);
        let mut q = z.q.clone();
        let mut p = z.p.clone();
        let stats = ws.step(self, sys, &mut q, &mut p, dt, dw)?;
        Ok((PhaseState { q, p }, stats))
    }
}

fn check_shapes<S: StochasticHamiltonian + ?Sized>(sys: &S, z: &PhaseState, dw: &[f64]) -> Result<()> {
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
    Ok(())
}

/// Per-stage gradient sums: `Δt ∂H/∂· + Σ_m ΔW_m ∂h_m/∂·`, split into the
/// drift and noise parts.
#[derive(Debug, Clone)]
struct StageGrads {
    hp: Vec<f64>,
    hq: Vec<f64>,
    np: Vec<f64>,
    nq: Vec<f64>,
}

impl StageGrads {
    fn new(len: usize) -> Self {
        StageGrads {
            hp: vec![0.0; len],
            hq: vec![0.0; len],
            np: vec![0.0; len],
            nq: vec![0.0; len],
        }
    }

    fn fill<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        n: usize,
        qs: &[f64],
        ps: &[f64],
        dt: f64,
        dw: &[f64],
    ) {
        for v in [&mut self.hp, &mut self.hq, &mut self.np, &mut self.nq] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        let stages = qs.len() / n;
        for j in 0..stages {
            let r = j * n..(j + 1) * n;
            let (qj, pj) = (&qs[r.clone()], &ps[r.clone()]);
            sys.add_hamiltonian_grad_p(qj, pj, dt, &mut self.hp[r.clone()]);
            sys.add_hamiltonian_grad_q(qj, pj, dt, &mut self.hq[r.clone()]);
            for (m, &w) in dw.iter().enumerate() {
                if w != 0.0 {
                    sys.add_noise_grad_p(m, qj, pj, w, &mut self.np[r.clone()]);
                    sys.add_noise_grad_q(m, qj, pj, w, &mut self.nq[r.clone()]);
                }
            }
        }
    }
}

/// Reusable buffers for SPRK stepping.
#[derive(Debug, Clone)]
pub struct SprkWorkspace {
    newton: Newton,
    x: Vec<f64>,
    grads: StageGrads,
}

impl SprkWorkspace {
    pub fn new(s: usize, n: usize, cfg: &SolverConfig) -> Self {
        SprkWorkspace {
            newton: cfg.newton(),
            x: vec![0.0; 2 * s * n],
            grads: StageGrads::new(s * n),
        }
    }

    /// Advance `(q, p)` in place. On failure they are untouched.
    pub fn step<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        tab: &SprkTableau,
        sys: &S,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let n = q.len();
        let s = tab.s;
        let sn = s * n;
        for i in 0..s {
            self.x[i * n..(i + 1) * n].copy_from_slice(q);
            self.x[sn + i * n..sn + (i + 1) * n].copy_from_slice(p);
        }
        let SprkWorkspace { newton, x, grads } = self;
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let stats = newton.solve(x, |x, r| {
            let (qs, ps) = x.split_at(sn);
            grads.fill(sys, n, qs, ps, dt, dw);
            for i in 0..s {
                for a in 0..n {
                    let mut dq = 0.0;
                    let mut dp = 0.0;
                    for j in 0..s {
                        let ij = i * s + j;
                        let k = j * n + a;
                        dq += tab.a[ij] * grads.hp[k] + tab.b[ij] * grads.np[k];
                        dp += tab.a_bar[ij] * grads.hq[k] + tab.b_bar[ij] * grads.nq[k];
                    }
                    r[i * n + a] = qs[i * n + a] - qk[a] - dq;
                    r[sn + i * n + a] = ps[i * n + a] - pk[a] + dp;
                }
            }
        })?;
        let (qs, ps) = x.split_at(sn);
        grads.fill(sys, n, qs, ps, dt, dw);
        for a in 0..n {
            let mut dq = 0.0;
            let mut dp = 0.0;
            for i in 0..s {
                let k = i * n + a;
                dq += tab.alpha[i] * grads.hp[k] + tab.beta[i] * grads.np[k];
                dp += tab.alpha[i] * grads.hq[k] + tab.beta[i] * grads.nq[k];
            }
            q[a] += dq;
            p[a] -= dp;
        }
        Ok(stats)
    }
}

/// Order-3/2 SPRK tableau for `H = T(p) + U(q)` and `h = h(q)`:
///
/// ```text
/// Q_i = q_k + Δt Σ_j a_ij T'(P_j)
/// P_i = p_k − Δt Σ_j ā_ij U'(Q_j) − Σ_j (b̄_ij ΔW + λ̄_ij ΔZ/Δt) h'(Q_j)
/// q_{k+1} = q_k + Δt Σ_i α_i T'(P_i)
/// p_{k+1} = p_k − Δt Σ_i ᾱ_i U'(Q_i) − Σ_i (β̄_i ΔW + γ̄_i ΔZ/Δt) h'(Q_i)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Sprk32Tableau {
    pub s: usize,
    pub a: Vec<f64>,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub lambda_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub gamma_bar: Vec<f64>,
}

impl Sprk32Tableau {
    /// The two-stage coefficient set of Milstein, Repin and Tretyakov.
    pub fn milstein() -> Self {
        Sprk32Tableau {
            s: 2,
            a: vec![0.0, 0.0, 2.0 / 3.0, 0.0],
            a_bar: vec![1.0 / 4.0, 0.0, 1.0 / 4.0, 3.0 / 4.0],
            b_bar: vec![-1.0 / 2.0, 0.0, -1.0 / 2.0, 3.0 / 2.0],
            lambda_bar: vec![3.0 / 2.0, 0.0, 3.0 / 2.0, -3.0 / 2.0],
            alpha: vec![2.0 / 3.0, 1.0 / 3.0],
            alpha_bar: vec![1.0 / 4.0, 3.0 / 4.0],
            beta_bar: vec![-1.0 / 2.0, 3.0 / 2.0],
            gamma_bar: vec![3.0 / 2.0, -3.0 / 2.0],
        }
    }

    /// Embed a plain SPRK tableau (no `ΔZ` terms). Only `a, ā, b̄, α, β`
    /// matter for separable systems with `h = h(q)`.
    pub fn from_sprk(t: &SprkTableau) -> Self {
        Sprk32Tableau {
            s: t.s,
            a: t.a.clone(),
            a_bar: t.a_bar.clone(),
            b_bar: t.b_bar.clone(),
            lambda_bar: vec![0.0; t.s * t.s],
            alpha: t.alpha.clone(),
            alpha_bar: t.alpha.clone(),
            beta_bar: t.beta.clone(),
            gamma_bar: vec![0.0; t.s],
        }
    }

    /// `Q_i` depends only on `P_j, j < i` and `P_i` only on `Q_j, j ≤ i`.
    pub fn is_explicit(&self) -> bool {
        let s = self.s;
        (0..s).all(|i| {
            (i..s).all(|j| self.a[i * s + j] == 0.0)
                && (i + 1..s).all(|j| {
                    self.a_bar[i * s + j] == 0.0 && self.b_bar[i * s + j] == 0.0 && self.lambda_bar[i * s + j] == 0.0
                })
        })
    }

    /// One step, allocating a fresh workspace.
    pub fn step<S: StochasticHamiltonian + ?Sized>(
        &self,
        sys: &S,
        z: &PhaseState,
        dt: f64,
        inc: Increments<'_>,
        cfg: &SolverConfig,
    ) -> Result<(PhaseState, StepStats)> {
        cfg.validate()?;
        check_shapes(sys, z, inc.dw)?;
        let mut ws = Sprk32Workspace::new(self.s, z.dim(), cfg);
        let mut q = z.q.clone();
        let mut p = z.p.clone();
        let stats = ws.step(self, sys, &mut q, &mut p, dt, inc)?;
        Ok((PhaseState { q, p }, stats))
    }
}

/// Reusable buffers for [`Sprk32Tableau`] stepping.
#[derive(Debug, Clone)]
pub struct Sprk32Workspace {
    newton: Newton,
    x: Vec<f64>,
    tp: Vec<f64>,
    uq: Vec<f64>,
    hq: Vec<f64>,
}

impl Sprk32Workspace {
    pub fn new(s: usize, n: usize, cfg: &SolverConfig) -> Self {
        Sprk32Workspace {
            newton: cfg.newton(),
            x: vec![0.0; 2 * s * n],
            tp: vec![0.0; s * n],
            uq: vec![0.0; s * n],
            hq: vec![0.0; s * n],
        }
    }

    pub fn step<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        tab: &Sprk32Tableau,
        sys: &S,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        inc: Increments<'_>,
    ) -> Result<StepStats> {
        let st = sys.structure();
        if !(st.separable && st.h_independent_of_p) {
            return Err(Error::Configuration("order-3/2 SPRK needs separable H and h = h(q)"));
        }
        if sys.channels() != 1 || inc.dw.len() != 1 {
            return Err(Error::Configuration("order-3/2 SPRK supports a single noise channel"));
        }
        let dz = match inc.dz {
            Some(z) if z.len() == 1 => z[0],
            _ => return Err(Error::Configuration("order-3/2 SPRK needs dZ increments")),
        };
        let dw = inc.dw[0];
        let zt = if dt != 0.0 { dz / dt } else { 0.0 };
        let n = q.len();
        let s = tab.s;
        let sn = s * n;
        let Sprk32Workspace { newton, x, tp, uq, hq } = self;
        // T'(P) and U'(Q), h'(Q) are evaluated with the other argument at
        // the current state; separability makes that choice irrelevant.
        let stats = if tab.is_explicit() {
            let (qs, ps) = x.split_at_mut(sn);
            for i in 0..s {
                let r = i * n..(i + 1) * n;
                qs[r.clone()].copy_from_slice(q);
                for j in 0..i {
                    let aij = tab.a[i * s + j];
                    for a in 0..n {
                        qs[i * n + a] += aij * tp[j * n + a];
                    }
                }
                uq[r.clone()].iter_mut().for_each(|v| *v = 0.0);
                hq[r.clone()].iter_mut().for_each(|v| *v = 0.0);
                sys.add_hamiltonian_grad_q(&qs[r.clone()], p, 1.0, &mut uq[r.clone()]);
                sys.add_noise_grad_q(0, &qs[r.clone()], p, 1.0, &mut hq[r.clone()]);
                ps[r.clone()].copy_from_slice(p);
                for j in 0..=i {
                    let ij = i * s + j;
                    let cu = dt * tab.a_bar[ij];
                    let ch = tab.b_bar[ij] * dw + tab.lambda_bar[ij] * zt;
                    for a in 0..n {
                        ps[i * n + a] -= cu * uq[j * n + a] + ch * hq[j * n + a];
                    }
                }
                tp[r.clone()].iter_mut().for_each(|v| *v = 0.0);
                sys.add_hamiltonian_grad_p(q, &ps[r.clone()], dt, &mut tp[r]);
            }
            StepStats::default()
        } else {
            for i in 0..s {
                x[i * n..(i + 1) * n].copy_from_slice(q);
                x[sn + i * n..sn + (i + 1) * n].copy_from_slice(p);
            }
            let (qk, pk): (&[f64], &[f64]) = (q, p);
            let stats = newton.solve(x, |x, r| {
                let (qs, ps) = x.split_at(sn);
                fill32(sys, n, s, qk, pk, qs, ps, dt, tp, uq, hq);
                for i in 0..s {
                    for a in 0..n {
                        let mut dq = 0.0;
                        let mut dp = 0.0;
                        for j in 0..s {
                            let ij = i * s + j;
                            let k = j * n + a;
                            dq += tab.a[ij] * tp[k];
                            dp += dt * tab.a_bar[ij] * uq[k] + (tab.b_bar[ij] * dw + tab.lambda_bar[ij] * zt) * hq[k];
                        }
                        r[i * n + a] = qs[i * n + a] - qk[a] - dq;
                        r[sn + i * n + a] = ps[i * n + a] - pk[a] + dp;
                    }
                }
            })?;
            let (qs, ps) = x.split_at(sn);
            fill32(sys, n, s, qk, pk, qs, ps, dt, tp, uq, hq);
            stats
        };
        for a in 0..n {
            let mut dq = 0.0;
            let mut dp = 0.0;
            for i in 0..s {
                let k = i * n + a;
                dq += tab.alpha[i] * tp[k];
                dp += dt * tab.alpha_bar[i] * uq[k] + (tab.beta_bar[i] * dw + tab.gamma_bar[i] * zt) * hq[k];
            }
            q[a] += dq;
            p[a] -= dp;
        }
        Ok(stats)
    }
}

/// `tp = Δt T'(P_j)`, `uq = U'(Q_j)`, `hq = h'(Q_j)`.
#[allow(clippy::too_many_arguments)]
fn fill32<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    n: usize,
    s: usize,
    qk: &[f64],
    pk: &[f64],
    qs: &[f64],
    ps: &[f64],
    dt: f64,
    tp: &mut [f64],
    uq: &mut [f64],
    hq: &mut [f64],
) {
    for v in [&mut *tp, &mut *uq, &mut *hq] {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    for j in 0..s {
        let r = j * n..(j + 1) * n;
        sys.add_hamiltonian_grad_p(qk, &ps[r.clone()], dt, &mut tp[r.clone()]);
        sys.add_hamiltonian_grad_q(&qs[r.clone()], pk, 1.0, &mut uq[r.clone()]);
        sys.add_noise_grad_q(0, &qs[r.clone()], pk, 1.0, &mut hq[r]);
    }
}

//! Named methods and their structure-exploiting steppers.
//!
//! Every Galerkin-type id has a generic description ([`GalerkinScheme`])
//! and a reduced implementation that solves as few unknowns as the method
//! allows, becoming explicit where the system structure permits it. Names
//! follow the `PsNrQu` convention: polynomial degree `s`, `r` quadrature
//! nodes, quadrature order `u` and the rule (`Gau`ss, `Lob`atto, `Otr` open
//! trapezoidal, `Mil`ne, `Rec`tangle). A second `NrQu` block names the
//! diffusion rule when it differs from the drift rule.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::galerkin::{GalerkinScheme, GalerkinWorkspace, SolverConfig, StepStats};
use crate::model::{HessianPolicy, PhaseState, StochasticHamiltonian, Structure};
use crate::newton::Newton;
use crate::noise::{Increments, WienerPath};
use crate::quadrature::{LagrangeBasis, QuadratureRule};
use crate::reference::{milstein_step, taylor32_step};
use crate::sprk::{Sprk32Tableau, Sprk32Workspace, SprkTableau, SprkWorkspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeId {
    P1N1Q2Gau,
    P2N2Q2Lob,
    P1N2Q2Lob,
    P1N3Q4Lob,
    P1N2Q2Otr,
    P2N2Q2Otr,
    P1N3Q4Mil,
    P1N1Q1Rec,
    P1N1Q1RecN2Q2Lob,
    P1N1Q1RecN1Q2Gau,
    P2N2Q2LobN1Q1Rec,
    P1N1Q2GauN2Q2Lob,
    P1N2Q2LobN1Q2Gau,
    Sprk32Milstein,
}

impl SchemeId {
    pub const ALL: [SchemeId; 14] = [
        SchemeId::P1N1Q2Gau,
        SchemeId::P2N2Q2Lob,
        SchemeId::P1N2Q2Lob,
        SchemeId::P1N3Q4Lob,
        SchemeId::P1N2Q2Otr,
        SchemeId::P2N2Q2Otr,
        SchemeId::P1N3Q4Mil,
        SchemeId::P1N1Q1Rec,
        SchemeId::P1N1Q1RecN2Q2Lob,
        SchemeId::P1N1Q1RecN1Q2Gau,
        SchemeId::P2N2Q2LobN1Q1Rec,
        SchemeId::P1N1Q2GauN2Q2Lob,
        SchemeId::P1N2Q2LobN1Q2Gau,
        SchemeId::Sprk32Milstein,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::P1N1Q2Gau => "P1N1Q2Gau",
            SchemeId::P2N2Q2Lob => "P2N2Q2Lob",
            SchemeId::P1N2Q2Lob => "P1N2Q2Lob",
            SchemeId::P1N3Q4Lob => "P1N3Q4Lob",
            SchemeId::P1N2Q2Otr => "P1N2Q2Otr",
            SchemeId::P2N2Q2Otr => "P2N2Q2Otr",
            SchemeId::P1N3Q4Mil => "P1N3Q4Mil",
            SchemeId::P1N1Q1Rec => "P1N1Q1Rec",
            SchemeId::P1N1Q1RecN2Q2Lob => "P1N1Q1RecN2Q2Lob",
            SchemeId::P1N1Q1RecN1Q2Gau => "P1N1Q1RecN1Q2Gau",
            SchemeId::P2N2Q2LobN1Q1Rec => "P2N2Q2LobN1Q1Rec",
            SchemeId::P1N1Q2GauN2Q2Lob => "P1N1Q2GauN2Q2Lob",
            SchemeId::P1N2Q2LobN1Q2Gau => "P1N2Q2LobN1Q2Gau",
            SchemeId::Sprk32Milstein => "SPRK32Milstein",
        }
    }

    /// Case-insensitive lookup.
    pub fn parse(name: &str) -> Result<Self> {
        SchemeId::ALL
            .iter()
            .copied()
            .find(|id| id.name().eq_ignore_ascii_case(name.trim()))
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SchemeId::parse(s)
    }
}

/// What a scheme needs from a system and what it exploits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    /// No Newton iterations on separable systems.
    pub explicit_for_separable: bool,
    /// No Newton iterations on separable systems with additive noise.
    pub explicit_for_separable_additive: bool,
    pub requires_h_independent_of_p: bool,
    pub supports_multichannel: bool,
    /// Safe under Kubo-type truncated increments (its stage equations stay
    /// solvable for `|ΔW| ≤ (3 − Δt)/(2|β|)`).
    pub truncation_safe: bool,
}

impl Capabilities {
    /// Whether the stepper performs zero Newton iterations on a system with
    /// this structure.
    pub fn explicit_on(&self, st: Structure) -> bool {
        (self.explicit_for_separable && st.separable)
            || (self.explicit_for_separable_additive && st.separable && st.additive_noise)
    }
}

/// How an id is realized.
#[derive(Debug, Clone, PartialEq)]
pub enum Construction {
    Galerkin(GalerkinScheme),
    /// A Galerkin scheme stepped through its partitioned Runge-Kutta form.
    Sprk(GalerkinScheme, SprkTableau),
    Sprk32(Sprk32Tableau),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeDescriptor {
    pub id: SchemeId,
    pub construction: Construction,
    pub capabilities: Capabilities,
}

impl SchemeDescriptor {
    /// The generic Galerkin description, if the id has one.
    pub fn galerkin(&self) -> Option<&GalerkinScheme> {
        match &self.construction {
            Construction::Galerkin(g) | Construction::Sprk(g, _) => Some(g),
            Construction::Sprk32(_) => None,
        }
    }

    /// Reject systems and increments the scheme cannot handle.
    pub fn check<S: StochasticHamiltonian + ?Sized>(&self, sys: &S, has_dz: bool) -> Result<()> {
        let st = sys.structure();
        let caps = &self.capabilities;
        if caps.requires_h_independent_of_p && !st.h_independent_of_p {
            return Err(Error::Configuration(
                "scheme requires noise Hamiltonians independent of p",
            ));
        }
        if !caps.supports_multichannel && sys.channels() != 1 {
            return Err(Error::Configuration("scheme supports a single noise channel only"));
        }
        if let Construction::Sprk32(_) = self.construction {
            if !st.separable {
                return Err(Error::Configuration("order-3/2 SPRK needs a separable system"));
            }
            if !has_dz {
                return Err(Error::Configuration("order-3/2 SPRK needs dZ increments"));
            }
        }
        Ok(())
    }
}

fn coupled(s: usize, rule: &str) -> GalerkinScheme {
    let r = QuadratureRule::named(rule).expect("built-in rule");
    GalerkinScheme::coupled(LagrangeBasis::equispaced(s).expect("degree >= 1"), r.clone(), r).expect("valid scheme")
}

fn decoupled(s: usize, drift: &str, diffusion: &str) -> GalerkinScheme {
    GalerkinScheme::decoupled(
        LagrangeBasis::equispaced(s).expect("degree >= 1"),
        QuadratureRule::named(drift).expect("built-in rule"),
        QuadratureRule::named(diffusion).expect("built-in rule"),
    )
    .expect("valid scheme")
}

/// Construct the descriptor of a named method.
pub fn build(id: SchemeId) -> SchemeDescriptor {
    use SchemeId::*;
    let caps = |explicit: bool, explicit_additive: bool, h_of_q: bool| Capabilities {
        explicit_for_separable: explicit,
        explicit_for_separable_additive: explicit_additive,
        requires_h_independent_of_p: h_of_q,
        supports_multichannel: true,
        truncation_safe: false,
    };
    let (construction, capabilities) = match id {
        P1N1Q2Gau => (
            Construction::Galerkin(coupled(1, "midpoint")),
            caps(false, false, false),
        ),
        P2N2Q2Lob => (
            Construction::Galerkin(coupled(2, "trapezoidal")),
            caps(true, false, false),
        ),
        P1N2Q2Lob => (
            Construction::Galerkin(coupled(1, "trapezoidal")),
            caps(true, false, false),
        ),
        P1N3Q4Lob => (Construction::Galerkin(coupled(1, "simpson")), caps(false, false, false)),
        P1N2Q2Otr => (
            Construction::Galerkin(coupled(1, "open-trapezoidal")),
            caps(false, false, false),
        ),
        P2N2Q2Otr => {
            let g = coupled(2, "open-trapezoidal");
            let t = SprkTableau::from_galerkin(&g).expect("interpolatory open trapezoidal rule");
            let mut c = caps(false, false, false);
            c.truncation_safe = true;
            (Construction::Sprk(g, t), c)
        }
        P1N3Q4Mil => (Construction::Galerkin(coupled(1, "milne")), caps(false, false, false)),
        P1N1Q1Rec => (
            Construction::Galerkin(decoupled(1, "rectangle", "rectangle")),
            caps(true, false, true),
        ),
        P1N1Q1RecN2Q2Lob => (
            Construction::Galerkin(decoupled(1, "rectangle", "trapezoidal")),
            caps(true, false, true),
        ),
        P1N1Q1RecN1Q2Gau => (
            Construction::Galerkin(decoupled(1, "rectangle", "midpoint")),
            caps(false, true, true),
        ),
        P2N2Q2LobN1Q1Rec => (
            Construction::Galerkin(decoupled(2, "trapezoidal", "rectangle")),
            caps(true, false, true),
        ),
        P1N1Q2GauN2Q2Lob => (
            Construction::Galerkin(decoupled(1, "midpoint", "trapezoidal")),
            caps(false, false, true),
        ),
        P1N2Q2LobN1Q2Gau => (
            Construction::Galerkin(decoupled(1, "trapezoidal", "midpoint")),
            caps(false, true, true),
        ),
        Sprk32Milstein => {
            let mut c = caps(true, false, true);
            c.supports_multichannel = false;
            (Construction::Sprk32(Sprk32Tableau::milstein()), c)
        }
    };
    SchemeDescriptor {
        id,
        construction,
        capabilities,
    }
}

/// Any integrator the experiments can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Scheme(SchemeId),
    Milstein,
    Taylor32,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Scheme(id) => id.name(),
            Method::Milstein => "milstein",
            Method::Taylor32 => "taylor32",
        }
    }

    /// Case-insensitive lookup over scheme ids, `milstein` and `taylor32`.
    pub fn parse(name: &str) -> Result<Self> {
        let t = name.trim();
        if t.eq_ignore_ascii_case("milstein") {
            Ok(Method::Milstein)
        } else if t.eq_ignore_ascii_case("taylor32") {
            Ok(Method::Taylor32)
        } else {
            SchemeId::parse(t).map(Method::Scheme)
        }
    }

    pub fn is_symplectic(self) -> bool {
        matches!(self, Method::Scheme(_))
    }

    /// Whether steps consume `ΔZ` as well as `ΔW`.
    pub fn needs_dz(self) -> bool {
        matches!(self, Method::Scheme(SchemeId::Sprk32Milstein) | Method::Taylor32)
    }

    /// Mean-square order the method is expected to reach.
    pub fn expected_order(self) -> f64 {
        if self.needs_dz() {
            1.5
        } else {
            1.0
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::parse(s)
    }
}

/// `out += w (Δt ∂H/∂q + Σ_m ΔW_m ∂h_m/∂q)` at `(q, p)`.
#[inline]
fn force_q<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    q: &[f64],
    p: &[f64],
    dt: f64,
    dw: &[f64],
    w: f64,
    out: &mut [f64],
) {
    sys.add_hamiltonian_grad_q(q, p, w * dt, out);
    noise_q(sys, q, p, dw, w, out);
}

/// `out += w (Δt ∂H/∂p + Σ_m ΔW_m ∂h_m/∂p)` at `(q, p)`.
#[inline]
fn force_p<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    q: &[f64],
    p: &[f64],
    dt: f64,
    dw: &[f64],
    w: f64,
    out: &mut [f64],
) {
    sys.add_hamiltonian_grad_p(q, p, w * dt, out);
    for (m, &d) in dw.iter().enumerate() {
        if d != 0.0 {
            sys.add_noise_grad_p(m, q, p, w * d, out);
        }
    }
}

/// `out += w Σ_m ΔW_m ∂h_m/∂q` at `(q, p)`.
#[inline]
fn noise_q<S: StochasticHamiltonian + ?Sized>(sys: &S, q: &[f64], p: &[f64], dw: &[f64], w: f64, out: &mut [f64]) {
    for (m, &d) in dw.iter().enumerate() {
        if d != 0.0 {
            sys.add_noise_grad_q(m, q, p, w * d, out);
        }
    }
}

/// `out = a x + b y`
#[inline]
fn lin(out: &mut [f64], a: f64, x: &[f64], b: f64, y: &[f64]) {
    for ((o, u), v) in out.iter_mut().zip(x).zip(y) {
        *o = a * u + b * v;
    }
}

fn merge(a: StepStats, b: StepStats) -> StepStats {
    StepStats {
        iterations: a.iterations + b.iterations,
        residual: a.residual.max(b.residual),
    }
}

fn all_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::StepFailure {
            iterations: 0,
            residual: f64::INFINITY,
        })
    }
}

#[derive(Debug, Clone)]
enum Engine {
    Reduced(Option<GalerkinWorkspace>),
    Sprk(SprkWorkspace),
    Sprk32(Sprk32Workspace),
    Milstein,
    Taylor32,
}

/// Reusable per-trajectory stepper for any [`Method`].
#[derive(Debug, Clone)]
pub struct Stepper {
    method: Method,
    descriptor: Option<SchemeDescriptor>,
    n: usize,
    newton: Newton,
    engine: Engine,
    policy: HessianPolicy,
    x: Vec<f64>,
    t: [Vec<f64>; 4],
}

impl Stepper {
    pub fn new(method: Method, n: usize, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1"));
        }
        let descriptor = match method {
            Method::Scheme(id) => Some(build(id)),
            _ => None,
        };
        let engine = match (&method, descriptor.as_ref().map(|d| &d.construction)) {
            (Method::Milstein, _) => Engine::Milstein,
            (Method::Taylor32, _) => Engine::Taylor32,
            (_, Some(Construction::Galerkin(g))) => Engine::Reduced(Some(GalerkinWorkspace::new(g, n, cfg))),
            (_, Some(Construction::Sprk(_, t))) => Engine::Sprk(SprkWorkspace::new(t.s, n, cfg)),
            (_, Some(Construction::Sprk32(t))) => Engine::Sprk32(Sprk32Workspace::new(t.s, n, cfg)),
            (Method::Scheme(_), None) => unreachable!(),
        };
        Ok(Stepper {
            method,
            descriptor,
            n,
            newton: cfg.newton(),
            engine,
            policy: HessianPolicy::default(),
            x: vec![0.0; 2 * n],
            t: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn descriptor(&self) -> Option<&SchemeDescriptor> {
        self.descriptor.as_ref()
    }

    /// Validate a system and increment layout before stepping.
    pub fn check<S: StochasticHamiltonian + ?Sized>(&self, sys: &S, has_dz: bool) -> Result<()> {
        if sys.dim() != self.n {
            return Err(Error::DimensionMismatch {
                what: "system dimension",
                expected: self.n,
                found: sys.dim(),
            });
        }
        match (&self.descriptor, self.method) {
            (Some(d), _) => d.check(sys, has_dz),
            (None, Method::Taylor32) => {
                if sys.channels() != 1 {
                    Err(Error::Configuration(
                        "the order-1.5 Taylor scheme supports a single noise channel",
                    ))
                } else if !has_dz {
                    Err(Error::Configuration("the order-1.5 Taylor scheme needs dZ increments"))
                } else {
                    Ok(())
                }
            }
            (None, _) => Ok(()),
        }
    }

    /// Step from a state value.
    pub fn step_state<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        z: &PhaseState,
        dt: f64,
        inc: Increments<'_>,
    ) -> Result<(PhaseState, StepStats)> {
        self.check(sys, inc.dz.is_some())?;
        if z.dim() != self.n {
            return Err(Error::DimensionMismatch {
                what: "phase state",
                expected: self.n,
                found: z.dim(),
            });
        }
        if inc.dw.len() != sys.channels() {
            return Err(Error::DimensionMismatch {
                what: "Wiener increments",
                expected: sys.channels(),
                found: inc.dw.len(),
            });
        }
        let mut q = z.q.clone();
        let mut p = z.p.clone();
        let stats = self.step(sys, &mut q, &mut p, dt, inc)?;
        Ok((PhaseState { q, p }, stats))
    }

    /// States at every step of `path`, starting with `z0`.
    pub fn trajectory<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        z0: &PhaseState,
        path: &WienerPath,
    ) -> Result<Vec<PhaseState>> {
        if path.channels != sys.channels() {
            return Err(Error::DimensionMismatch {
                what: "path channels",
                expected: sys.channels(),
                found: path.channels,
            });
        }
        self.check(sys, path.has_dz())?;
        if z0.dim() != self.n {
            return Err(Error::DimensionMismatch {
                what: "phase state",
                expected: self.n,
                found: z0.dim(),
            });
        }
        let mut out = Vec::with_capacity(path.n_steps + 1);
        let mut q = z0.q.clone();
        let mut p = z0.p.clone();
        out.push(z0.clone());
        for k in 0..path.n_steps {
            self.step(sys, &mut q, &mut p, path.dt, path.step(k))?;
            out.push(PhaseState {
                q: q.clone(),
                p: p.clone(),
            });
        }
        Ok(out)
    }

    /// Advance `(q, p)` in place. Call [`Stepper::check`] once beforehand;
    /// this hot path does not repeat it. On failure `(q, p)` are untouched.
    pub fn step<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        inc: Increments<'_>,
    ) -> Result<StepStats> {
        let dw = inc.dw;
        match &mut self.engine {
            Engine::Milstein => {
                let z = PhaseState {
                    q: q.to_vec(),
                    p: p.to_vec(),
                };
                let z1 = milstein_step(sys, &z, dt, dw, self.policy)?;
                q.copy_from_slice(&z1.q);
                p.copy_from_slice(&z1.p);
                return Ok(StepStats::default());
            }
            Engine::Taylor32 => {
                let z = PhaseState {
                    q: q.to_vec(),
                    p: p.to_vec(),
                };
                let z1 = taylor32_step(sys, &z, dt, inc, self.policy)?;
                q.copy_from_slice(&z1.q);
                p.copy_from_slice(&z1.p);
                return Ok(StepStats::default());
            }
            Engine::Sprk(ws) => {
                let Some(Construction::Sprk(_, t)) = self.descriptor.as_ref().map(|d| &d.construction) else {
                    unreachable!()
                };
                return ws.step(t, sys, q, p, dt, dw);
            }
            Engine::Sprk32(ws) => {
                let Some(Construction::Sprk32(t)) = self.descriptor.as_ref().map(|d| &d.construction) else {
                    unreachable!()
                };
                return ws.step(t, sys, q, p, dt, inc);
            }
            Engine::Reduced(_) => {}
        }
        let Method::Scheme(id) = self.method else {
            unreachable!()
        };
        let st = sys.structure();
        use SchemeId::*;
        match id {
            P1N1Q2Gau => self.midpoint(sys, st, q, p, dt, dw),
            P2N2Q2Lob => self.stormer_verlet(sys, st, q, p, dt, dw),
            P1N2Q2Lob => self.trapezoidal(sys, st, q, p, dt, dw),
            P1N3Q4Lob | P1N2Q2Otr | P1N3Q4Mil if st.separable => self.single_momentum(id, sys, q, p, dt, dw),
            P1N3Q4Lob | P1N2Q2Otr | P1N3Q4Mil => self.generic(sys, q, p, dt, dw),
            P1N1Q1Rec => self.symplectic_euler(sys, st, q, p, dt, dw),
            P1N1Q1RecN2Q2Lob => self.rec_lob(sys, st, q, p, dt, dw),
            P1N1Q1RecN1Q2Gau => self.rec_gau(sys, st, q, p, dt, dw),
            P2N2Q2LobN1Q1Rec => self.lob_rec(sys, st, q, p, dt, dw),
            P1N1Q2GauN2Q2Lob => self.gau_lob(sys, st, q, p, dt, dw),
            P1N2Q2LobN1Q2Gau => self.lob_gau(sys, st, q, p, dt, dw),
            P2N2Q2Otr | Sprk32Milstein => unreachable!(),
        }
    }

    fn generic<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let (Engine::Reduced(Some(ws)), Some(d)) = (&mut self.engine, &self.descriptor) else {
            unreachable!()
        };
        let g = d.galerkin().expect("Galerkin construction");
        ws.initial_guess(g, q, p);
        ws.solve_and_update(g, sys, q, p, dt, dw)
    }

    /// Implicit midpoint rule.
    fn midpoint<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        st: Structure,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let n = self.n;
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let [qm, pm, _, _] = &mut self.t;
        if st.separable {
            // N equations in q_{k+1}; P = p_k − ½ F_q(Q)
            let x = &mut self.x[..n];
            x.copy_from_slice(qk);
            let stats = self.newton.solve(x, |x, r| {
                lin(qm, 0.5, qk, 0.5, x);
                pm.copy_from_slice(pk);
                force_q(sys, qm, pk, dt, dw, -0.5, pm);
                lin(r, 1.0, x, -1.0, qk);
                force_p(sys, qm, pm, dt, dw, -1.0, r);
            })?;
            lin(qm, 0.5, qk, 0.5, x);
            let mut p1 = pk.to_vec();
            force_q(sys, qm, pk, dt, dw, -1.0, &mut p1);
            all_finite(&p1)?;
            q.copy_from_slice(x);
            p.copy_from_slice(&p1);
            return Ok(stats);
        }
        let x = &mut self.x[..2 * n];
        x[..n].copy_from_slice(qk);
        x[n..].copy_from_slice(pk);
        let stats = self.newton.solve(x, |x, r| {
            let (q1, p1) = x.split_at(n);
            lin(qm, 0.5, qk, 0.5, q1);
            lin(pm, 0.5, pk, 0.5, p1);
            let (rq, rp) = r.split_at_mut(n);
            lin(rq, 1.0, q1, -1.0, qk);
            force_p(sys, qm, pm, dt, dw, -1.0, rq);
            lin(rp, 1.0, p1, -1.0, pk);
            force_q(sys, qm, pm, dt, dw, 1.0, rp);
        })?;
        q.copy_from_slice(&x[..n]);
        p.copy_from_slice(&x[n..]);
        Ok(stats)
    }

    /// `P₁` first, then `q_{k+1}`, then the explicit momentum update.
    fn stormer_verlet<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        st: Structure,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let n = self.n;
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let [p1, q1, _, _] = &mut self.t;
        let mut stats = StepStats::default();
        p1.copy_from_slice(pk);
        if st.separable {
            force_q(sys, qk, pk, dt, dw, -0.5, p1);
            q1.copy_from_slice(qk);
            force_p(sys, qk, p1, dt, dw, 1.0, q1);
        } else {
            let s1 = self.newton.solve(p1, |x, r| {
                lin(r, 1.0, x, -1.0, pk);
                force_q(sys, qk, x, dt, dw, 0.5, r);
            })?;
            let pp: &[f64] = p1;
            let x = &mut self.x[..n];
            x.copy_from_slice(qk);
            let s2 = self.newton.solve(x, |x, r| {
                lin(r, 1.0, x, -1.0, qk);
                force_p(sys, qk, pp, dt, dw, -0.5, r);
                force_p(sys, x, pp, dt, dw, -0.5, r);
            })?;
            q1.copy_from_slice(x);
            stats = merge(s1, s2);
        }
        let mut pn = p1.clone();
        force_q(sys, q1, p1, dt, dw, -0.5, &mut pn);
        all_finite(q1)?;
        all_finite(&pn)?;
        q.copy_from_slice(q1);
        p.copy_from_slice(&pn);
        let _ = n;
        Ok(stats)
    }

    /// Unknowns `(P₁, P₂)`; `q_{k+1}` follows explicitly from `P₁`.
    fn trapezoidal<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        st: Structure,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let n = self.n;
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        if st.separable {
            // P₁ = P₂: the Störmer-Verlet sequence
            return self.stormer_verlet(sys, st, q, p, dt, dw);
        }
        let [q1, pbar, _, _] = &mut self.t;
        let x = &mut self.x[..2 * n];
        x[..n].copy_from_slice(pk);
        x[n..].copy_from_slice(pk);
        let stats = self.newton.solve(x, |x, r| {
            let (a, b) = x.split_at(n);
            q1.copy_from_slice(qk);
            force_p(sys, qk, a, dt, dw, 1.0, q1);
            let (r1, r2) = r.split_at_mut(n);
            for i in 0..n {
                r1[i] = 0.5 * (a[i] + b[i]) - pk[i];
            }
            force_q(sys, qk, a, dt, dw, 0.5, r1);
            lin(r2, 1.0, q1, -1.0, qk);
            force_p(sys, q1, b, dt, dw, -1.0, r2);
        })?;
        let (a, b) = x.split_at(n);
        q1.copy_from_slice(qk);
        force_p(sys, qk, a, dt, dw, 1.0, q1);
        lin(pbar, 0.5, a, 0.5, b);
        force_q(sys, q1, b, dt, dw, -0.5, pbar);
        all_finite(q1)?;
        all_finite(pbar)?;
        q.copy_from_slice(q1);
        p.copy_from_slice(pbar);
        Ok(stats)
    }

    /// Separable Simpson, open trapezoidal and Milne schemes: every momentum
    /// stage coincides, leaving `N` equations in `q_{k+1}`.
    fn single_momentum<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        id: SchemeId,
        sys: &S,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let n = self.n;
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        // (node position weight on q_{k+1}, weight in P, weight in p_{k+1} − p_k)
        let nodes: &[(f64, f64, f64)] = match id {
            SchemeId::P1N3Q4Lob => &[
                (0.0, 1.0 / 6.0, 1.0 / 6.0),
                (0.5, 1.0 / 3.0, 2.0 / 3.0),
                (1.0, 0.0, 1.0 / 6.0),
            ],
            SchemeId::P1N2Q2Otr => &[(1.0 / 3.0, 1.0 / 3.0, 0.5), (2.0 / 3.0, 1.0 / 6.0, 0.5)],
            SchemeId::P1N3Q4Mil => &[
                (0.25, 0.5, 2.0 / 3.0),
                (0.5, -1.0 / 6.0, -1.0 / 3.0),
                (0.75, 1.0 / 6.0, 2.0 / 3.0),
            ],
            _ => unreachable!(),
        };
        let [qi, pm, _, _] = &mut self.t;
        let x = &mut self.x[..n];
        x.copy_from_slice(qk);
        let stats = self.newton.solve(x, |x, r| {
            pm.copy_from_slice(pk);
            for &(c, w, _) in nodes {
                if w != 0.0 {
                    lin(qi, 1.0 - c, qk, c, x);
                    force_q(sys, qi, pk, dt, dw, -w, pm);
                }
            }
            lin(r, 1.0, x, -1.0, qk);
            force_p(sys, x, pm, dt, dw, -1.0, r);
        })?;
        let mut pn = pk.to_vec();
        for &(c, _, w) in nodes {
            lin(qi, 1.0 - c, qk, c, x);
            force_q(sys, qi, pk, dt, dw, -w, &mut pn);
        }
        all_finite(&pn)?;
        q.copy_from_slice(x);
        p.copy_from_slice(&pn);
        Ok(stats)
    }

    /// `q_{k+1} = q_k + Δt ∂H/∂p(q_{k+1}, p_k)`, then explicit momentum.
    fn symplectic_euler<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        st: Structure,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let [q1, _, _, _] = &mut self.t;
        let stats = solve_position(&mut self.newton, sys, st.separable, qk, pk, dt, q1)?;
        let mut pn = pk.to_vec();
        sys.add_hamiltonian_grad_q(q1, pk, -dt, &mut pn);
        noise_q(sys, q1, pk, dw, -1.0, &mut pn);
        all_finite(&pn)?;
        q.copy_from_slice(q1);
        p.copy_from_slice(&pn);
        Ok(stats)
    }

    fn rec_lob<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        st: Structure,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let [q1, p1, _, _] = &mut self.t;
        p1.copy_from_slice(pk);
        noise_q(sys, qk, pk, dw, -0.5, p1);
        let stats = solve_position(&mut self.newton, sys, st.separable, qk, p1, dt, q1)?;
        let mut pn = pk.to_vec();
        sys.add_hamiltonian_grad_q(q1, p1, -dt, &mut pn);
        noise_q(sys, qk, pk, dw, -0.5, &mut pn);
        noise_q(sys, q1, pk, dw, -0.5, &mut pn);
        all_finite(&pn)?;
        q.copy_from_slice(q1);
        p.copy_from_slice(&pn);
        Ok(stats)
    }

    fn rec_gau<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        st: Structure,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let n = self.n;
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let [q1, p1, qm, _] = &mut self.t;
        let stats = if st.additive_noise {
            // the noise gradient is constant: P₁ is explicit
            p1.copy_from_slice(pk);
            noise_q(sys, qk, pk, dw, -0.5, p1);
            solve_position(&mut self.newton, sys, st.separable, qk, p1, dt, q1)?
        } else {
            let x = &mut self.x[..n];
            x.copy_from_slice(qk);
            let s = self.newton.solve(x, |x, r| {
                lin(qm, 0.5, qk, 0.5, x);
                p1.copy_from_slice(pk);
                noise_q(sys, qm, pk, dw, -0.5, p1);
                lin(r, 1.0, x, -1.0, qk);
                sys.add_hamiltonian_grad_p(x, p1, -dt, r);
            })?;
            q1.copy_from_slice(x);
            s
        };
        lin(qm, 0.5, qk, 0.5, q1);
        p1.copy_from_slice(pk);
        noise_q(sys, qm, pk, dw, -0.5, p1);
        let mut pn = pk.to_vec();
        sys.add_hamiltonian_grad_q(q1, p1, -dt, &mut pn);
        noise_q(sys, qm, pk, dw, -1.0, &mut pn);
        all_finite(&pn)?;
        q.copy_from_slice(q1);
        p.copy_from_slice(&pn);
        Ok(stats)
    }

    fn lob_rec<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        st: Structure,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let n = self.n;
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let [p1, q1, _, _] = &mut self.t;
        p1.copy_from_slice(pk);
        let mut stats = StepStats::default();
        if st.separable {
            sys.add_hamiltonian_grad_q(qk, pk, -0.5 * dt, p1);
            q1.copy_from_slice(qk);
            sys.add_hamiltonian_grad_p(qk, p1, dt, q1);
        } else {
            let s1 = self.newton.solve(p1, |x, r| {
                lin(r, 1.0, x, -1.0, pk);
                sys.add_hamiltonian_grad_q(qk, x, 0.5 * dt, r);
            })?;
            let pp: &[f64] = p1;
            let x = &mut self.x[..n];
            x.copy_from_slice(qk);
            let s2 = self.newton.solve(x, |x, r| {
                lin(r, 1.0, x, -1.0, qk);
                sys.add_hamiltonian_grad_p(qk, pp, -0.5 * dt, r);
                sys.add_hamiltonian_grad_p(x, pp, -0.5 * dt, r);
            })?;
            q1.copy_from_slice(x);
            stats = merge(s1, s2);
        }
        let mut pn = p1.clone();
        sys.add_hamiltonian_grad_q(q1, p1, -0.5 * dt, &mut pn);
        noise_q(sys, q1, pk, dw, -1.0, &mut pn);
        all_finite(q1)?;
        all_finite(&pn)?;
        q.copy_from_slice(q1);
        p.copy_from_slice(&pn);
        Ok(stats)
    }

    /// Midpoint drift with trapezoidal noise.
    fn gau_lob<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        st: Structure,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let n = self.n;
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let [qm, p1, nk, _] = &mut self.t;
        // noise gradient at q_k is fixed for the whole step
        nk.iter_mut().for_each(|v| *v = 0.0);
        noise_q(sys, qk, pk, dw, 1.0, nk);
        let stats = if st.separable {
            let x = &mut self.x[..n];
            x.copy_from_slice(qk);
            let s = self.newton.solve(x, |x, r| {
                lin(qm, 0.5, qk, 0.5, x);
                lin(p1, 1.0, pk, -0.5, nk);
                sys.add_hamiltonian_grad_q(qm, pk, -0.5 * dt, p1);
                lin(r, 1.0, x, -1.0, qk);
                sys.add_hamiltonian_grad_p(qm, p1, -dt, r);
            })?;
            lin(qm, 0.5, qk, 0.5, x);
            lin(p1, 1.0, pk, -0.5, nk);
            sys.add_hamiltonian_grad_q(qm, pk, -0.5 * dt, p1);
            s
        } else {
            let x = &mut self.x[..2 * n];
            x[..n].copy_from_slice(qk);
            x[n..].copy_from_slice(pk);
            let nk: &[f64] = nk;
            let s = self.newton.solve(x, |x, r| {
                let (q1, pp) = x.split_at(n);
                lin(qm, 0.5, qk, 0.5, q1);
                let (rq, rp) = r.split_at_mut(n);
                lin(rq, 1.0, q1, -1.0, qk);
                sys.add_hamiltonian_grad_p(qm, pp, -dt, rq);
                for i in 0..n {
                    rp[i] = pp[i] - pk[i] + 0.5 * nk[i];
                }
                sys.add_hamiltonian_grad_q(qm, pp, 0.5 * dt, rp);
            })?;
            lin(qm, 0.5, qk, 0.5, &x[..n]);
            p1.copy_from_slice(&x[n..]);
            s
        };
        let q1 = self.x[..n].to_vec();
        let mut pn = pk.to_vec();
        sys.add_hamiltonian_grad_q(qm, p1, -dt, &mut pn);
        for i in 0..n {
            pn[i] -= 0.5 * nk[i];
        }
        noise_q(sys, &q1, pk, dw, -0.5, &mut pn);
        all_finite(&pn)?;
        q.copy_from_slice(&q1);
        p.copy_from_slice(&pn);
        Ok(stats)
    }

    /// Trapezoidal drift with midpoint noise.
    fn lob_gau<S: StochasticHamiltonian + ?Sized>(
        &mut self,
        sys: &S,
        st: Structure,
        q: &mut [f64],
        p: &mut [f64],
        dt: f64,
        dw: &[f64],
    ) -> Result<StepStats> {
        let n = self.n;
        let (qk, pk): (&[f64], &[f64]) = (q, p);
        let [q1, qm, pa, pb] = &mut self.t;
        let mut stats = StepStats::default();
        if st.separable {
            // P₁ = P₂
            let explicit_p1 = |qm: &[f64], out: &mut [f64]| {
                out.copy_from_slice(pk);
                sys.add_hamiltonian_grad_q(qk, pk, -0.5 * dt, out);
                noise_q(sys, qm, pk, dw, -0.5, out);
            };
            if st.additive_noise {
                explicit_p1(qk, pa);
            } else {
                pa.copy_from_slice(pk);
                stats = self.newton.solve(pa, |x, r| {
                    q1.copy_from_slice(qk);
                    sys.add_hamiltonian_grad_p(qk, x, dt, q1);
                    lin(qm, 0.5, qk, 0.5, q1);
                    explicit_p1(qm, r);
                    for (ri, xi) in r.iter_mut().zip(x) {
                        *ri = xi - *ri;
                    }
                })?;
            }
            pb.copy_from_slice(pa);
        } else {
            let x = &mut self.x[..2 * n];
            x[..n].copy_from_slice(pk);
            x[n..].copy_from_slice(pk);
            stats = self.newton.solve(x, |x, r| {
                let (a, b) = x.split_at(n);
                q1.copy_from_slice(qk);
                sys.add_hamiltonian_grad_p(qk, a, dt, q1);
                lin(qm, 0.5, qk, 0.5, q1);
                let (r1, r2) = r.split_at_mut(n);
                for i in 0..n {
                    r1[i] = 0.5 * (a[i] + b[i]) - pk[i];
                }
                sys.add_hamiltonian_grad_q(qk, a, 0.5 * dt, r1);
                noise_q(sys, qm, pk, dw, 0.5, r1);
                lin(r2, 1.0, q1, -1.0, qk);
                sys.add_hamiltonian_grad_p(q1, b, -dt, r2);
            })?;
            pa.copy_from_slice(&x[..n]);
            pb.copy_from_slice(&x[n..]);
        }
        q1.copy_from_slice(qk);
        sys.add_hamiltonian_grad_p(qk, pa, dt, q1);
        lin(qm, 0.5, qk, 0.5, q1);
        let mut pn = vec![0.0; n];
        lin(&mut pn, 0.5, pa, 0.5, pb);
        sys.add_hamiltonian_grad_q(q1, pb, -0.5 * dt, &mut pn);
        noise_q(sys, qm, pk, dw, -0.5, &mut pn);
        all_finite(q1)?;
        all_finite(&pn)?;
        q.copy_from_slice(q1);
        p.copy_from_slice(&pn);
        Ok(stats)
    }
}

/// Solve `q₁ = q_k + Δt ∂H/∂p(q₁, P)`, explicit when separable.
fn solve_position<S: StochasticHamiltonian + ?Sized>(
    newton: &mut Newton,
    sys: &S,
    separable: bool,
    qk: &[f64],
    pm: &[f64],
    dt: f64,
    out: &mut [f64],
) -> Result<StepStats> {
    out.copy_from_slice(qk);
    if separable {
        sys.add_hamiltonian_grad_p(qk, pm, dt, out);
        return all_finite(out).map(|_| StepStats::default());
    }
    newton.solve(out, |x, r| {
        lin(r, 1.0, x, -1.0, qk);
        sys.add_hamiltonian_grad_p(x, pm, -dt, r);
    })
}

/// One step of a named scheme from a state value.
pub fn fast_step<S: StochasticHamiltonian + ?Sized>(
    id: SchemeId,
    sys: &S,
    z: &PhaseState,
    dt: f64,
    inc: Increments<'_>,
    cfg: &SolverConfig,
) -> Result<(PhaseState, StepStats)> {
    Stepper::new(Method::Scheme(id), z.dim(), cfg)?.step_state(sys, z, dt, inc)
}

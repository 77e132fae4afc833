//! Structure-preservation measurements.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::galerkin::SolverConfig;
use crate::model::{noise_hessian, HessianPolicy, PhaseState, StochasticHamiltonian};
use crate::noise::Increments;
use crate::schemes::{Method, Stepper};

/// Newton tolerance used inside defect measurements.
pub const DEFECT_NEWTON_TOL: f64 = 1e-13;
/// Relative central-difference step for flow Jacobians.
pub const DEFECT_FD_REL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticReport {
    /// `‖JᵀΩJ − Ω‖_∞` (maximum absolute row sum).
    pub defect: f64,
    pub fd_step: f64,
    /// Flow Jacobian, row-major `2N × 2N`.
    pub jacobian: Vec<f64>,
}

/// `JᵀΩJ − Ω` for the canonical `Ω = [[0, I], [−I, 0]]`, applied through its
/// block structure.
pub fn symplectic_residual(jac: &[f64], n: usize) -> Vec<f64> {
    let d = 2 * n;
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += jac[i * d + a] * jac[(i + n) * d + b] - jac[(i + n) * d + a] * jac[i * d + b];
            }
            let omega = if b == a + n {
                1.0
            } else if a == b + n {
                -1.0
            } else {
                0.0
            };
            out[a * d + b] = s - omega;
        }
    }
    out
}

fn row_sum_norm(m: &[f64], d: usize) -> f64 {
    (0..d)
        .map(|a| m[a * d..(a + 1) * d].iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Defect of an arbitrary one-step map, Jacobian by central differences
/// with step `fd_step` in every phase coordinate.
pub fn symplectic_defect_of_map<F>(mut map: F, z: &PhaseState, fd_step: f64) -> Result<SymplecticReport>
where
    F: FnMut(&PhaseState) -> Result<PhaseState>,
{
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive"));
    }
    let n = z.dim();
    let d = 2 * n;
    let z0 = z.to_vec();
    let mut jac = vec![0.0; d * d];
    let mut zp = z0.clone();
    for j in 0..d {
        zp[j] = z0[j] + fd_step;
        let fp = map(&PhaseState::from_slice(&zp))?.to_vec();
        zp[j] = z0[j] - fd_step;
        let fm = map(&PhaseState::from_slice(&zp))?.to_vec();
        zp[j] = z0[j];
        for i in 0..d {
            jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * fd_step);
        }
    }
    let defect = row_sum_norm(&symplectic_residual(&jac, n), d);
    Ok(SymplecticReport {
        defect,
        fd_step,
        jacobian: jac,
    })
}

/// Symplecticity defect of one step of `method` at fixed increments, with
/// `ε = 10⁻⁶ (1 + ‖z‖_∞)` unless `fd_step` is given and a `10⁻¹³` Newton
/// tolerance.
pub fn symplectic_defect<S: StochasticHamiltonian + ?Sized>(
    method: Method,
    sys: &S,
    z: &PhaseState,
    dt: f64,
    inc: Increments<'_>,
    fd_step: Option<f64>,
) -> Result<SymplecticReport> {
    let cfg = SolverConfig {
        tol: DEFECT_NEWTON_TOL,
        ..SolverConfig::default()
    };
    let mut stepper = Stepper::new(method, z.dim(), &cfg)?;
    stepper.check(sys, inc.dz.is_some())?;
    let zn = z.q.iter().chain(&z.p).fold(0.0_f64, |m, x| m.max(x.abs()));
    let eps = fd_step.unwrap_or(DEFECT_FD_REL * (1.0 + zn));
    symplectic_defect_of_map(|x| stepper.step_state(sys, x, dt, inc).map(|(z1, _)| z1), z, eps)
}

/// Infinitesimal generator `ξ_Q(q) = A q + b` of a linear action on
/// configuration space.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub n: usize,
    /// Row-major `N × N`.
    pub matrix: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Generator {
    pub fn zero(n: usize) -> Self {
        Generator {
            n,
            matrix: vec![0.0; n * n],
            shift: vec![0.0; n],
        }
    }

    /// Rotation in the `(i, j)` plane: `ξ_Q(q)_i = −q_j`, `ξ_Q(q)_j = q_i`.
    pub fn rotation(n: usize, i: usize, j: usize) -> Result<Self> {
        if i >= n || j >= n || i == j {
            return Err(Error::InvalidArgument("rotation plane needs two distinct coordinates"));
        }
        let mut g = Self::zero(n);
        g.matrix[i * n + j] = -1.0;
        g.matrix[j * n + i] = 1.0;
        Ok(g)
    }

    pub fn translation(direction: &[f64]) -> Self {
        let mut g = Self::zero(direction.len());
        g.shift.copy_from_slice(direction);
        g
    }

    /// `J_ξ(q, p) = p · ξ_Q(q)`.
    pub fn momentum(&self, q: &[f64], p: &[f64]) -> f64 {
        let n = self.n;
        (0..n)
            .map(|a| {
                let xi = self.shift[a] + (0..n).map(|b| self.matrix[a * n + b] * q[b]).sum::<f64>();
                p[a] * xi
            })
            .sum()
    }
}

pub fn momentum_series(trajectory: &[PhaseState], generator: &Generator) -> Result<Vec<f64>> {
    trajectory
        .iter()
        .map(|z| {
            if z.dim() != generator.n {
                Err(Error::DimensionMismatch {
                    what: "generator",
                    expected: z.dim(),
                    found: generator.n,
                })
            } else {
                Ok(generator.momentum(&z.q, &z.p))
            }
        })
        .collect()
}

pub fn energy_series<S: StochasticHamiltonian + ?Sized>(trajectory: &[PhaseState], sys: &S) -> Vec<f64> {
    trajectory.iter().map(|z| sys.hamiltonian(&z.q, &z.p)).collect()
}

/// Largest `|x_k − x_0|` over a series.
pub fn max_drift(series: &[f64]) -> f64 {
    match series.first() {
        Some(&x0) => series.iter().fold(0.0, |m, x| m.max((x - x0).abs())),
        None => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommutativityReport {
    pub channels: usize,
    /// `Γ_ij` at `[i * M + j]`, each an `N`-vector.
    pub gamma: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub max_asymmetry: f64,
}

impl CommutativityReport {
    pub fn gamma(&self, i: usize, j: usize) -> &[f64] {
        &self.gamma[i * self.channels + j]
    }

    pub fn lambda(&self, i: usize, j: usize) -> &[f64] {
        &self.lambda[i * self.channels + j]
    }
}

/// `Γ_ij` and `Λ_ij` at `z`:
///
/// ```text
/// Γ_ij = Σ_b ∂²h_j/∂q_b∂p · ∂h_i/∂p_b − ∂²h_j/∂p_b∂p · ∂h_i/∂q_b
/// Λ_ij = Σ_b ∂²h_j/∂p_b∂q · ∂h_i/∂q_b − ∂²h_j/∂q_b∂q · ∂h_i/∂p_b
/// ```
///
/// The noise is commutative when both are symmetric in `(i, j)`.
pub fn commutativity_defect<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    z: &PhaseState,
    policy: HessianPolicy,
) -> Result<CommutativityReport> {
    let m_ch = sys.channels();
    if m_ch < 2 {
        return Err(Error::InvalidArgument(
            "commutativity needs at least two noise channels",
        ));
    }
    if z.dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            what: "phase state",
            expected: sys.dim(),
            found: z.dim(),
        });
    }
    let n = z.dim();
    let mut gq = Vec::with_capacity(m_ch);
    let mut gp = Vec::with_capacity(m_ch);
    let mut hess = Vec::with_capacity(m_ch);
    for m in 0..m_ch {
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        sys.add_noise_grad_q(m, &z.q, &z.p, 1.0, &mut a);
        sys.add_noise_grad_p(m, &z.q, &z.p, 1.0, &mut b);
        gq.push(a);
        gp.push(b);
        hess.push(noise_hessian(sys, m, &z.q, &z.p, policy)?);
    }
    let mut gamma = Vec::with_capacity(m_ch * m_ch);
    let mut lambda = Vec::with_capacity(m_ch * m_ch);
    for i in 0..m_ch {
        for j in 0..m_ch {
            let h = &hess[j];
            let mut g = vec![0.0; n];
            let mut l = vec![0.0; n];
            for a in 0..n {
                for b in 0..n {
                    g[a] += h.qp[b * n + a] * gp[i][b] - h.pp[b * n + a] * gq[i][b];
                    l[a] += h.qp[a * n + b] * gq[i][b] - h.qq[b * n + a] * gp[i][b];
                }
            }
            gamma.push(g);
            lambda.push(l);
        }
    }
    let mut max_asymmetry: f64 = 0.0;
    for i in 0..m_ch {
        for j in 0..m_ch {
            if i == j {
                continue;
            }
            for a in 0..n {
                max_asymmetry = max_asymmetry
                    .max((gamma[i * m_ch + j][a] - gamma[j * m_ch + i][a]).abs())
                    .max((lambda[i * m_ch + j][a] - lambda[j * m_ch + i][a]).abs());
            }
        }
    }
    Ok(CommutativityReport {
        channels: m_ch,
        gamma,
        lambda,
        max_asymmetry,
    })
}

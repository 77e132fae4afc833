//! Non-symplectic reference integrators and the exact Kubo solution.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Evaluator, Result};
use crate::model::{
    add_diffusion_self_derivative, diffusion_vector, noise_hessian, stratonovich_drift, HessianPolicy, PhaseState,
    StochasticHamiltonian,
};
use crate::noise::Increments;

/// Exact Kubo flow: a rotation of `(q, p)` by the angle `t + β W(t)`.
pub fn kubo_exact(q0: f64, p0: f64, beta: f64, t: f64, w: f64) -> PhaseState {
    let phase = t + beta * w;
    let (s, c) = (libm::sin(phase), libm::cos(phase));
    PhaseState::scalar(p0 * s + q0 * c, p0 * c - q0 * s)
}

fn finite(z: &[f64], which: Evaluator) -> Result<()> {
    if z.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(which))
    }
}

fn check_inputs<S: StochasticHamiltonian + ?Sized>(sys: &S, z: &PhaseState, channels: usize) -> Result<()> {
    if z.dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            what: "phase state",
            expected: sys.dim(),
            found: z.dim(),
        });
    }
    if channels != sys.channels() {
        return Err(Error::DimensionMismatch {
            what: "Wiener increments",
            expected: sys.channels(),
            found: channels,
        });
    }
    Ok(())
}

/// Milstein step written for the Stratonovich equation:
/// `z + A_S Δt + Σ_m B_m ΔW_m + ½ Σ_m (∂B_m B_m) ΔW_m²`.
pub fn milstein_step<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    z: &PhaseState,
    dt: f64,
    dw: &[f64],
    policy: HessianPolicy,
) -> Result<PhaseState> {
    check_inputs(sys, z, dw.len())?;
    let n = z.dim();
    let mut out = z.to_vec();
    let mut a = vec![0.0; 2 * n];
    stratonovich_drift(sys, &z.q, &z.p, &mut a);
    finite(&a, Evaluator::HamiltonianGradQ)?;
    for (o, v) in out.iter_mut().zip(&a) {
        *o += dt * v;
    }
    let mut b = vec![0.0; 2 * n];
    for (m, &w) in dw.iter().enumerate() {
        diffusion_vector(sys, m, &z.q, &z.p, &mut b);
        finite(&b, Evaluator::NoiseGradQ(m))?;
        for (o, v) in out.iter_mut().zip(&b) {
            *o += w * v;
        }
        let hess = noise_hessian(sys, m, &z.q, &z.p, policy)?;
        add_diffusion_self_derivative(&hess, &b, 0.5 * w * w, &mut out);
    }
    Ok(PhaseState::from_slice(&out))
}

/// Evaluates the Itô coefficients of a single-channel system at arbitrary
/// phase points and their derivatives by central differences.
struct ItoField<'a, S: StochasticHamiltonian + ?Sized> {
    sys: &'a S,
    n: usize,
    policy: HessianPolicy,
}

impl<'a, S: StochasticHamiltonian + ?Sized> ItoField<'a, S> {
    fn drift(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let (q, p) = z.split_at(self.n);
        stratonovich_drift(self.sys, q, p, out);
        let mut b = vec![0.0; 2 * self.n];
        diffusion_vector(self.sys, 0, q, p, &mut b);
        let hess = noise_hessian(self.sys, 0, q, p, self.policy)?;
        add_diffusion_self_derivative(&hess, &b, 0.5, out);
        Ok(())
    }

    fn diffusion(&self, z: &[f64], out: &mut [f64]) {
        let (q, p) = z.split_at(self.n);
        diffusion_vector(self.sys, 0, q, p, out);
    }

    /// `(∂b) b`, from the Hessian of `h`.
    fn diffusion_self(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let (q, p) = z.split_at(self.n);
        let mut b = vec![0.0; 2 * self.n];
        diffusion_vector(self.sys, 0, q, p, &mut b);
        let hess = noise_hessian(self.sys, 0, q, p, self.policy)?;
        out.iter_mut().for_each(|x| *x = 0.0);
        add_diffusion_self_derivative(&hess, &b, 1.0, out);
        Ok(())
    }
}

fn step_along(z: &[f64], v: &[f64], rel: f64) -> Option<f64> {
    let vn = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if vn == 0.0 {
        return None;
    }
    let zn = z.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    Some(rel * (1.0 + zn) / vn)
}

/// `∂f · v` by central differences.
fn directional<F>(f: &mut F, z: &[f64], v: &[f64], out: &mut [f64]) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let Some(h) = step_along(z, v, 1e-5) else {
        out.iter_mut().for_each(|x| *x = 0.0);
        return Ok(());
    };
    let zp: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let zm: Vec<f64> = z.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let mut fm = vec![0.0; out.len()];
    f(&zp, out)?;
    f(&zm, &mut fm)?;
    for (o, m) in out.iter_mut().zip(&fm) {
        *o = (*o - m) / (2.0 * h);
    }
    Ok(())
}

/// `∂²f [v, v]` by a central second difference.
fn second_directional<F>(f: &mut F, z: &[f64], v: &[f64], out: &mut [f64]) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let Some(h) = step_along(z, v, 1e-3) else {
        out.iter_mut().for_each(|x| *x = 0.0);
        return Ok(());
    };
    let zp: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let zm: Vec<f64> = z.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let mut f0 = vec![0.0; out.len()];
    let mut fm = vec![0.0; out.len()];
    f(&zp, out)?;
    f(z, &mut f0)?;
    f(&zm, &mut fm)?;
    for ((o, c), m) in out.iter_mut().zip(&f0).zip(&fm) {
        *o = (*o - 2.0 * c + m) / (h * h);
    }
    Ok(())
}

/// Strong order 1.5 Itô–Taylor step for one noise channel:
///
/// ```text
/// z + aΔ + bΔW + ½ L¹b (ΔW² − Δ) + L¹a ΔZ + L⁰b (ΔW Δ − ΔZ)
///   + ½ L⁰a Δ² + ½ L¹L¹b (ΔW²/3 − Δ) ΔW
/// ```
///
/// with `L¹ = b·∇` and `L⁰ = a·∇ + ½ ∇²[b, b]` applied to the Itô drift `a`
/// and diffusion `b`. `L¹b` uses the Hessian of `h`; the other derivative
/// terms are central differences.
pub fn taylor32_step<S: StochasticHamiltonian + ?Sized>(
    sys: &S,
    z: &PhaseState,
    dt: f64,
    inc: Increments<'_>,
    policy: HessianPolicy,
) -> Result<PhaseState> {
    if sys.channels() != 1 {
        return Err(Error::Configuration(
            "the order-1.5 Taylor scheme supports a single noise channel",
        ));
    }
    check_inputs(sys, z, inc.dw.len())?;
    let dz = match inc.dz {
        Some(d) if d.len() == 1 => d[0],
        _ => return Err(Error::Configuration("the order-1.5 Taylor scheme needs dZ increments")),
    };
    let dw = inc.dw[0];
    let n = z.dim();
    let field = ItoField { sys, n, policy };
    let z0 = z.to_vec();
    let d = 2 * n;
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    field.drift(&z0, &mut a)?;
    field.diffusion(&z0, &mut b);
    finite(&a, Evaluator::HamiltonianGradQ)?;
    finite(&b, Evaluator::NoiseGradQ(0))?;

    let mut l1b = vec![0.0; d];
    field.diffusion_self(&z0, &mut l1b)?;

    let mut drift = |x: &[f64], o: &mut [f64]| field.drift(x, o);
    let mut diff = |x: &[f64], o: &mut [f64]| {
        field.diffusion(x, o);
        Ok(())
    };
    let mut diff_self = |x: &[f64], o: &mut [f64]| field.diffusion_self(x, o);

    let mut l1a = vec![0.0; d];
    directional(&mut drift, &z0, &b, &mut l1a)?;

    let mut l0b = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    directional(&mut diff, &z0, &a, &mut l0b)?;
    second_directional(&mut diff, &z0, &b, &mut tmp)?;
    for (x, t) in l0b.iter_mut().zip(&tmp) {
        *x += 0.5 * t;
    }

    let mut l0a = vec![0.0; d];
    directional(&mut drift, &z0, &a, &mut l0a)?;
    second_directional(&mut drift, &z0, &b, &mut tmp)?;
    for (x, t) in l0a.iter_mut().zip(&tmp) {
        *x += 0.5 * t;
    }

    let mut l11b = vec![0.0; d];
    directional(&mut diff_self, &z0, &b, &mut l11b)?;

    let c_l1b = 0.5 * (dw * dw - dt);
    let c_l0b = dw * dt - dz;
    let c_l0a = 0.5 * dt * dt;
    let c_l11b = 0.5 * (dw * dw / 3.0 - dt) * dw;
    let out: Vec<f64> = (0..d)
        .map(|i| {
            z0[i]
                + a[i] * dt
                + b[i] * dw
                + c_l1b * l1b[i]
                + dz * l1a[i]
                + c_l0b * l0b[i]
                + c_l0a * l0a[i]
                + c_l11b * l11b[i]
        })
        .collect();
    finite(&out, Evaluator::HamiltonianGradQ)?;
    Ok(PhaseState::from_slice(&out))
}

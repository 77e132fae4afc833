//! Newton iteration for the small implicit stage systems.
//!
//! Systems here have at most a few dozen unknowns, so the Jacobian is a dense
//! row-major buffer factored in place with partial pivoting. All buffers are
//! owned by [`Newton`] and reused across solves.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Outcome of a converged solve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NewtonStats {
    pub iterations: usize,
    pub residual: f64,
}

pub(crate) fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Solve `a x = b` in place (`b` is overwritten by `x`). `a` is `n × n`
/// row-major and is destroyed. Returns `false` when a pivot vanishes.
pub(crate) fn lu_solve(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for k in 0..n {
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return false;
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            b.swap(k, piv);
        }
        let d = a[k * n + k];
        for i in (k + 1)..n {
            let f = a[i * n + k] / d;
            if f != 0.0 {
                a[i * n + k] = 0.0;
                for j in (k + 1)..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in (k + 1)..n {
            s -= a[k * n + j] * b[j];
        }
        b[k] = s / a[k * n + k];
    }
    true
}

/// Newton solver with a forward-difference or caller-supplied Jacobian.
#[derive(Debug, Clone)]
pub struct Newton {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative forward-difference step for the Jacobian.
    pub fd_step: f64,
    jac: Vec<f64>,
    r: Vec<f64>,
    r_pert: Vec<f64>,
}

impl Newton {
    pub fn new(tol: f64, max_iter: usize, fd_step: f64) -> Self {
        Newton {
            tol,
            max_iter,
            fd_step,
            jac: Vec::new(),
            r: Vec::new(),
            r_pert: Vec::new(),
        }
    }

    fn resize(&mut self, n: usize) {
        if self.r.len() != n {
            self.jac = vec![0.0; n * n];
            self.r = vec![0.0; n];
            self.r_pert = vec![0.0; n];
        }
    }

    /// Solve `residual(x) = 0` starting from the contents of `x`, building the
    /// Jacobian by forward differences.
    pub fn solve<F>(&mut self, x: &mut [f64], mut residual: F) -> Result<NewtonStats>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let fd = self.fd_step;
        self.solve_with(x, &mut residual, |x, r0, jac, scratch, res| {
            fd_jacobian(x, r0, jac, scratch, fd, res)
        })
    }

    /// Like [`Newton::solve`] but with an explicit Jacobian
    /// `jacobian(x, out)` filling `out` row-major.
    pub fn solve_analytic<F, J>(&mut self, x: &mut [f64], mut residual: F, mut jacobian: J) -> Result<NewtonStats>
    where
        F: FnMut(&[f64], &mut [f64]),
        J: FnMut(&[f64], &mut [f64]),
    {
        self.solve_with(x, &mut residual, |x, _r0, jac, _scratch, _res| jacobian(x, jac))
    }

    fn solve_with<F, J>(&mut self, x: &mut [f64], residual: &mut F, mut build: J) -> Result<NewtonStats>
    where
        F: FnMut(&[f64], &mut [f64]),
        J: FnMut(&mut [f64], &[f64], &mut [f64], &mut [f64], &mut F),
    {
        let n = x.len();
        self.resize(n);
        let mut r = core::mem::take(&mut self.r);
        let mut jac = core::mem::take(&mut self.jac);
        let mut scratch = core::mem::take(&mut self.r_pert);
        let mut iterations = 0;
        let out = loop {
            residual(x, &mut r);
            let norm = max_norm(&r);
            if !norm.is_finite() {
                break Err(Error::StepFailure {
                    iterations,
                    residual: norm,
                });
            }
            if norm <= self.tol {
                break Ok(NewtonStats {
                    iterations,
                    residual: norm,
                });
            }
            if iterations >= self.max_iter {
                break Err(Error::StepFailure {
                    iterations,
                    residual: norm,
                });
            }
            build(x, &r, &mut jac, &mut scratch, residual);
            if !lu_solve(&mut jac, &mut r, n) {
                break Err(Error::StepFailure {
                    iterations,
                    residual: norm,
                });
            }
            let mut step = 0.0_f64;
            let mut scale = 1.0_f64;
            for (xi, di) in x.iter_mut().zip(r.iter()) {
                *xi -= di;
                step = step.max(di.abs());
                scale = scale.max(xi.abs());
            }
            iterations += 1;
            // Update below rounding level: the residual sits at its floor.
            if step <= 4.0 * f64::EPSILON * scale {
                residual(x, &mut r);
                let norm = max_norm(&r);
                break if norm.is_finite() && norm <= self.tol.max(1e3 * f64::EPSILON * scale) {
                    Ok(NewtonStats {
                        iterations,
                        residual: norm,
                    })
                } else {
                    Err(Error::StepFailure {
                        iterations,
                        residual: norm,
                    })
                };
            }
        };
        self.r = r;
        self.jac = jac;
        self.r_pert = scratch;
        out
    }
}

/// Forward-difference Jacobian. `x` is restored on return.
fn fd_jacobian<F>(x: &mut [f64], r0: &[f64], jac: &mut [f64], rp: &mut [f64], rel: f64, residual: &mut F)
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = x.len();
    for j in 0..n {
        let xj = x[j];
        let h = rel * (1.0 + xj.abs());
        x[j] = xj + h;
        residual(x, rp);
        x[j] = xj;
        for i in 0..n {
            jac[i * n + j] = (rp[i] - r0[i]) / h;
        }
    }
}

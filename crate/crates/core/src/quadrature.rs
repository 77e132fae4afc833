//! Lagrange bases on `[0, 1]` and the quadrature rules used by the schemes.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Lagrange cardinal polynomials through control points
/// `0 = d_0 < d_1 < … < d_s = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeBasis {
    points: Vec<f64>,
    /// `denom[μ] = Π_{ν≠μ} (d_μ − d_ν)`
    denom: Vec<f64>,
}

impl LagrangeBasis {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument("Lagrange basis needs degree s >= 1"));
        }
        if points[0] != 0.0 || *points.last().unwrap() != 1.0 {
            return Err(Error::InvalidArgument("control points must start at 0 and end at 1"));
        }
        if points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("control points must be strictly increasing"));
        }
        let denom = (0..points.len())
            .map(|mu| {
                (0..points.len())
                    .filter(|&nu| nu != mu)
                    .map(|nu| points[mu] - points[nu])
                    .product()
            })
            .collect();
        Ok(LagrangeBasis { points, denom })
    }

    /// Equispaced control points `d_ν = ν / s`.
    pub fn equispaced(s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidArgument("Lagrange basis needs degree s >= 1"));
        }
        Self::new((0..=s).map(|nu| nu as f64 / s as f64).collect())
    }

    pub fn degree(&self) -> usize {
        self.points.len() - 1
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// `l_{μ,s}(τ)`.
    pub fn eval(&self, mu: usize, tau: f64) -> f64 {
        let mut num = 1.0;
        for (nu, d) in self.points.iter().enumerate() {
            if nu != mu {
                num *= tau - d;
            }
        }
        num / self.denom[mu]
    }

    /// `d/dτ l_{μ,s}(τ)`, by the product rule.
    pub fn deriv(&self, mu: usize, tau: f64) -> f64 {
        let mut sum = 0.0;
        for k in 0..self.points.len() {
            if k == mu {
                continue;
            }
            let mut prod = 1.0;
            for (nu, d) in self.points.iter().enumerate() {
                if nu != mu && nu != k {
                    prod *= tau - d;
                }
            }
            sum += prod;
        }
        sum / self.denom[mu]
    }
}

/// A quadrature rule `Σ_i w_i f(c_i) ≈ ∫_0^1 f`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Classical order `u`: polynomials of degree `< u` are integrated exactly.
    pub order: usize,
}

pub const RULE_NAMES: [&str; 6] = [
    "midpoint",
    "trapezoidal",
    "simpson",
    "open-trapezoidal",
    "milne",
    "rectangle",
];

impl QuadratureRule {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>, order: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("quadrature rule needs at least one node"));
        }
        if nodes.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                what: "quadrature weights",
                expected: nodes.len(),
                found: weights.len(),
            });
        }
        if nodes.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument("quadrature nodes must lie in [0, 1]"));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("quadrature nodes must be strictly increasing"));
        }
        Ok(QuadratureRule { nodes, weights, order })
    }

    pub fn named(name: &str) -> Result<Self> {
        let (c, w, u): (Vec<f64>, Vec<f64>, usize) = match name.to_ascii_lowercase().as_str() {
            "midpoint" => (vec![0.5], vec![1.0], 2),
            "trapezoidal" => (vec![0.0, 1.0], vec![0.5, 0.5], 2),
            "simpson" => (vec![0.0, 0.5, 1.0], vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], 4),
            "open-trapezoidal" => (vec![1.0 / 3.0, 2.0 / 3.0], vec![0.5, 0.5], 2),
            "milne" => (vec![0.25, 0.5, 0.75], vec![2.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0], 4),
            "rectangle" => (vec![1.0], vec![1.0], 1),
            _ => return Err(Error::UnknownName(name.to_string())),
        };
        QuadratureRule::new(c, w, u)
    }

    /// Interpolatory rule on the given nodes.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        let weights = weights_from_nodes(&nodes)?;
        let order = nodes.len();
        QuadratureRule::new(nodes, weights, order)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(c, w)| w * f(*c)).sum()
    }
}

/// Monomial coefficients (lowest degree first) of the cardinal polynomial
/// `l̄_i` through `nodes`.
pub fn cardinal_coefficients(nodes: &[f64], i: usize) -> Vec<f64> {
    let mut coef = vec![1.0];
    let mut denom = 1.0;
    for (j, &cj) in nodes.iter().enumerate() {
        if j == i {
            continue;
        }
        // multiply by (τ − c_j)
        let mut next = vec![0.0; coef.len() + 1];
        for (k, a) in coef.iter().enumerate() {
            next[k + 1] += a;
            next[k] -= a * cj;
        }
        coef = next;
        denom *= nodes[i] - cj;
    }
    coef.iter_mut().for_each(|a| *a /= denom);
    coef
}

/// `∫_0^x l̄_i(τ) dτ` for the cardinal polynomial on `nodes`.
pub fn cardinal_integral(nodes: &[f64], i: usize, x: f64) -> f64 {
    let coef = cardinal_coefficients(nodes, i);
    // Horner on Σ a_k x^{k+1}/(k+1)
    let mut acc = 0.0;
    for (k, a) in coef.iter().enumerate().rev() {
        acc = acc * x + a / (k + 1) as f64;
    }
    acc * x
}

fn check_distinct(nodes: &[f64]) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::InvalidArgument("need at least one node"));
    }
    for (i, a) in nodes.iter().enumerate() {
        if !(0.0..=1.0).contains(a) {
            return Err(Error::InvalidArgument("nodes must lie in [0, 1]"));
        }
        if nodes[..i].contains(a) {
            return Err(Error::InvalidArgument("nodes must be distinct"));
        }
    }
    Ok(())
}

/// Interpolatory weights `α_i = ∫_0^1 l̄_{i,s−1}(τ) dτ`.
pub fn weights_from_nodes(nodes: &[f64]) -> Result<Vec<f64>> {
    check_distinct(nodes)?;
    Ok((0..nodes.len()).map(|i| cardinal_integral(nodes, i, 1.0)).collect())
}

/// Matrix `a_ij = ∫_0^{c_i} l̄_{j,s−1}(τ) dτ`, row-major.
pub fn partial_integrals(nodes: &[f64]) -> Result<Vec<f64>> {
    check_distinct(nodes)?;
    let s = nodes.len();
    let mut a = vec![0.0; s * s];
    for j in 0..s {
        for i in 0..s {
            a[i * s + j] = cardinal_integral(nodes, j, nodes[i]);
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_basis() {
        let b = LagrangeBasis::equispaced(1).unwrap();
        assert_eq!(b.eval(0, 0.25), 0.75);
        assert_eq!(b.deriv(0, 0.25), -1.0);
        assert_eq!(b.deriv(1, 0.9), 1.0);
    }

    #[test]
    fn quadratic_basis() {
        let b = LagrangeBasis::equispaced(2).unwrap();
        assert_eq!(b.eval(1, 0.5), 1.0);
        assert_eq!(b.eval(1, 0.0), 0.0);
        assert_eq!(b.eval(1, 1.0), 0.0);
        assert!((b.deriv(2, 1.0) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn basis_rejects_bad_points() {
        assert!(LagrangeBasis::new(vec![0.0]).is_err());
        assert!(LagrangeBasis::new(vec![0.1, 1.0]).is_err());
        assert!(LagrangeBasis::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn cardinality_for_several_degrees() {
        for s in 1..=5 {
            let b = LagrangeBasis::equispaced(s).unwrap();
            for mu in 0..=s {
                for nu in 0..=s {
                    let want = if mu == nu { 1.0 } else { 0.0 };
                    assert!((b.eval(mu, b.points()[nu]) - want).abs() <= 1e-13);
                }
            }
        }
    }

    #[test]
    fn named_rules_have_listed_values() {
        let simpson = QuadratureRule::named("simpson").unwrap();
        assert_eq!(simpson.weights, vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]);
        let milne = QuadratureRule::named("milne").unwrap();
        assert_eq!(milne.weights, vec![2.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(milne.nodes, vec![0.25, 0.5, 0.75]);
        let rect = QuadratureRule::named("rectangle").unwrap();
        assert_eq!((rect.nodes.clone(), rect.weights.clone()), (vec![1.0], vec![1.0]));
        assert!(matches!(QuadratureRule::named("gauss7"), Err(Error::UnknownName(_))));
    }

    #[test]
    fn named_rules_exact_to_their_order() {
        for name in RULE_NAMES {
            let rule = QuadratureRule::named(name).unwrap();
            let sum: f64 = rule.weights.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-15, "{name}");
            for k in 0..rule.order {
                let got = rule.integrate(|x| libm::pow(x, k as f64));
                assert!((got - 1.0 / (k + 1) as f64).abs() <= 1e-12, "{name} degree {k}");
            }
            // one degree higher must fail, otherwise the stated order is too low
            let k = rule.order as f64;
            assert!(
                (rule.integrate(|x| libm::pow(x, k)) - 1.0 / (k + 1.0)).abs() > 1e-6,
                "{name}"
            );
        }
    }

    #[test]
    fn interpolatory_weights() {
        assert_eq!(weights_from_nodes(&[0.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(weights_from_nodes(&[0.5]).unwrap(), vec![1.0]);
        let w = weights_from_nodes(&[0.0, 0.5, 1.0]).unwrap();
        for (got, want) in w.iter().zip([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]) {
            assert!((got - want).abs() <= 1e-15);
        }
        assert!(weights_from_nodes(&[0.2, 0.2]).is_err());
    }

    #[test]
    fn named_rules_are_interpolatory() {
        for name in RULE_NAMES {
            let rule = QuadratureRule::named(name).unwrap();
            let w = weights_from_nodes(&rule.nodes).unwrap();
            for (a, b) in w.iter().zip(&rule.weights) {
                assert!((a - b).abs() <= 1e-13, "{name}");
            }
        }
    }

    #[test]
    fn partial_integrals_for_open_trapezoid() {
        let a = partial_integrals(&[1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let want = [0.5, -1.0 / 6.0, 2.0 / 3.0, 0.0];
        for (g, w) in a.iter().zip(want) {
            assert!((g - w).abs() <= 1e-15, "{a:?}");
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(s in 1usize..6, tau in 0.0f64..1.0) {
            let b = LagrangeBasis::equispaced(s).unwrap();
            let sum: f64 = (0..=s).map(|mu| b.eval(mu, tau)).sum();
            let dsum: f64 = (0..=s).map(|mu| b.deriv(mu, tau)).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(dsum.abs() <= 1e-10);
        }

        #[test]
        fn derivative_matches_difference(s in 1usize..5, mu_raw in 0usize..5, tau in 0.05f64..0.95) {
            let b = LagrangeBasis::equispaced(s).unwrap();
            let mu = mu_raw % (s + 1);
            let h = 1e-6;
            let fd = (b.eval(mu, tau + h) - b.eval(mu, tau - h)) / (2.0 * h);
            prop_assert!((fd - b.deriv(mu, tau)).abs() <= 1e-6);
        }
    }
}

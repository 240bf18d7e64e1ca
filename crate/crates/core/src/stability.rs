//! Characteristic polynomials of combined multi-step rules and the root
//! condition.
//!
//! Applied to `y' = f(t, y)`, the `(k, m)` rule couples `Y^n … Y^{n+k+m-1}`
//! with coefficients given by sliding sums of `m` consecutive weights. The
//! polynomial therefore factors as `(1 + λ + … + λ^{m-1}) · B(λ)` where
//! `B(λ) = Σ α_{k,i} λ^{k-i}` vanishes at one. The `m`-th roots of unity are
//! simple roots of every such polynomial; the reported maximum modulus is
//! taken over the remaining roots.

use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fdweights::{rational_to_f64, solve_weights, Rational, WeightError, WeightSet};

/// Radius tolerance for `|λ| ≤ 1` and for deciding that a root lies on the
/// unit circle.
pub const ROOT_TOL: f64 = 1e-9;

/// A root is simple when `|P'(λ)| > SIMPLE_ROOT_TOL · ‖P‖∞`.
pub const SIMPLE_ROOT_TOL: f64 = 1e-9;

/// Relative residual `|P(λ)| / ‖P‖∞` every returned root must meet.
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("polynomial must have degree >= 1 and a nonzero leading coefficient")]
    DegeneratePolynomial,
    #[error("root finder did not converge (worst relative residual {residual:e})")]
    NoConvergence { residual: f64 },
    #[error("coefficient {index} is not representable in binary64")]
    Overflow { index: usize },
}

/// Characteristic polynomial in descending powers: `coeffs[ℓ]` multiplies
/// `λ^{k+m-1-ℓ}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharPolynomial {
    pub k: usize,
    pub m: usize,
    pub coeffs: Vec<Rational>,
}

impl CharPolynomial {
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn to_f64(&self) -> Result<Vec<f64>, StabilityError> {
        to_f64_coeffs(&self.coeffs)
    }

    /// `P(1)`, computed exactly.
    pub fn value_at_one(&self) -> Rational {
        self.coeffs.iter().fold(Rational::zero(), |acc, c| acc + c)
    }

    /// `P'(1)`, computed exactly.
    pub fn derivative_at_one(&self) -> Rational {
        let deg = self.degree();
        self.coeffs
            .iter()
            .enumerate()
            .map(|(l, c)| c * Rational::from_integer((deg - l).into()))
            .fold(Rational::zero(), |acc, t| acc + t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub k: usize,
    pub m: usize,
    /// All `k + m - 1` roots, with multiplicity.
    pub roots: Vec<Complex64>,
    /// Largest modulus after removing the simple unit roots `λ^m = 1`.
    pub max_modulus_excl_one: f64,
    pub is_stable: bool,
    pub one_is_simple: bool,
}

fn to_f64_coeffs(coeffs: &[Rational]) -> Result<Vec<f64>, StabilityError> {
    coeffs
        .iter()
        .enumerate()
        .map(|(index, c)| rational_to_f64(c).ok_or(StabilityError::Overflow { index }))
        .collect()
}

/// Window sums of the weights: `c_ℓ = Σ_{s=max(0,ℓ-m+1)}^{min(ℓ,k)} w_s`.
pub fn characteristic_polynomial(w: &WeightSet) -> CharPolynomial {
    let (k, m) = (w.k(), w.m());
    let alpha = w.scaled_weights();
    let coeffs = (0..k + m)
        .map(|l| {
            let lo = (l + 1).saturating_sub(m);
            let hi = l.min(k);
            alpha[lo..=hi].iter().fold(Rational::zero(), |acc, a| acc + a)
        })
        .collect();
    CharPolynomial { k, m, coeffs }
}

/// Horner evaluation of `P` and `P'` at a complex point.
pub fn eval_with_derivative(coeffs: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(coeffs[0], 0.0);
    let mut dp = Complex64::zero();
    for &c in &coeffs[1..] {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

fn inf_norm(coeffs: &[f64]) -> f64 {
    coeffs.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()))
}

/// All complex roots of a real polynomial given in descending powers.
///
/// Eigenvalues of the companion matrix, each refined by a few Newton steps.
pub fn polynomial_roots(coeffs: &[f64]) -> Result<Vec<Complex64>, StabilityError> {
    if coeffs.len() < 2 || coeffs[0] == 0.0 || coeffs.iter().any(|c| !c.is_finite()) {
        return Err(StabilityError::DegeneratePolynomial);
    }
    let n = coeffs.len() - 1;
    let lead = coeffs[0];
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for (col, c) in coeffs[1..].iter().enumerate() {
        companion[(0, col)] = -c / lead;
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    let schur = Schur::try_new(companion, f64::EPSILON, 10_000).ok_or(StabilityError::NoConvergence {
        residual: f64::INFINITY,
    })?;
    let mut roots: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();

    let norm = inf_norm(coeffs);
    let mut worst = 0.0_f64;
    for root in roots.iter_mut() {
        let mut z = *root;
        let (mut p, _) = eval_with_derivative(coeffs, z);
        for _ in 0..8 {
            let (_, dp) = eval_with_derivative(coeffs, z);
            if dp.norm() == 0.0 {
                break;
            }
            let candidate = z - p / dp;
            let (pc, _) = eval_with_derivative(coeffs, candidate);
            if pc.norm() >= p.norm() {
                break;
            }
            z = candidate;
            p = pc;
        }
        *root = z;
        worst = worst.max(p.norm() / norm);
    }
    if !(worst < RESIDUAL_TOL) {
        return Err(StabilityError::NoConvergence { residual: worst });
    }
    Ok(roots)
}

/// Exact division of `p` by `λ^m − 1`; `None` if the remainder is nonzero.
fn divide_by_unit_roots(p: &[Rational], m: usize) -> Option<Vec<Rational>> {
    if p.len() <= m {
        return None;
    }
    let mut rem = p.to_vec();
    let qlen = p.len() - m;
    let mut quotient = Vec::with_capacity(qlen);
    for i in 0..qlen {
        let c = rem[i].clone();
        // subtract c·λ^{…}(λ^m − 1): the entry m places later gains +c
        rem[i + m] += &c;
        quotient.push(c);
    }
    rem[qlen..].iter().all(Zero::is_zero).then_some(quotient)
}

/// Roots and root-condition verdict for the `(k, m)` combined rule.
pub fn stability_report(k: usize, m: usize) -> Result<StabilityReport, StabilityError> {
    let weights = solve_weights(k, m)?;
    let poly = characteristic_polynomial(&weights);
    let one_is_simple = poly.value_at_one().is_zero() && !poly.derivative_at_one().is_zero();

    let unit_roots: Vec<Complex64> = (0..m)
        .map(|s| Complex64::from_polar(1.0, std::f64::consts::TAU * s as f64 / m as f64))
        .collect();
    let (mut roots, remaining) = match divide_by_unit_roots(&poly.coeffs, m) {
        Some(q) => {
            let q = to_f64_coeffs(&q)?;
            let rest = if q.len() > 1 { polynomial_roots(&q)? } else { Vec::new() };
            (unit_roots, rest)
        }
        None => (Vec::new(), polynomial_roots(&poly.to_f64()?)?),
    };
    let max_modulus_excl_one = remaining.iter().map(|z| z.norm()).fold(0.0, f64::max);
    roots.extend(remaining);

    let full = poly.to_f64()?;
    let norm = inf_norm(&full);
    let is_stable = roots.iter().all(|&z| {
        let r = z.norm();
        if r > 1.0 + ROOT_TOL {
            return false;
        }
        if r >= 1.0 - ROOT_TOL {
            let (_, dp) = eval_with_derivative(&full, z);
            return dp.norm() > SIMPLE_ROOT_TOL * norm;
        }
        true
    });

    Ok(StabilityReport { k, m, roots, max_modulus_excl_one, is_stable, one_is_simple })
}

/// True when the sum of all coefficients is exactly zero.
pub fn has_unit_root(poly: &CharPolynomial) -> bool {
    poly.value_at_one().is_zero()
}

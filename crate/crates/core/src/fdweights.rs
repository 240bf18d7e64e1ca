//! Combined multi-step finite-difference weights.
//!
//! For a step count `k` and a combination width `m`, the rule approximates
//! the first derivative at `t_0` on the uniform grid `t_i = i·Δt` by
//!
//! ```text
//! du/dt(t_0) ≈ Σ_{i=0}^{k} α_{k,i} · (u(t_i) + u(t_{i+1}) + … + u(t_{i+m-1}))
//! ```
//!
//! The scaled weights `α_{k,i}·Δt` solve the moment system
//! `Σ_i w_i · Σ_s (i+s)^j = δ_{j1}` for `j = 0..=k`, which is solved here
//! exactly over the rationals.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

/// Exact rational number with arbitrary-precision numerator and denominator.
///
/// Values are always kept in lowest terms with a positive denominator.
pub type Rational = BigRational;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightError {
    #[error("step count k and combination width m must both be positive (got k={k}, m={m})")]
    InvalidShape { k: usize, m: usize },
    #[error("moment system for k={k}, m={m} is singular")]
    SingularSystem { k: usize, m: usize },
    #[error("weight {index} does not fit in binary64")]
    Overflow { index: usize },
}

/// Scaled weights `α_{k,i}·Δt` of a combined multi-step rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSet {
    k: usize,
    m: usize,
    scaled: Vec<Rational>,
}

impl WeightSet {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Combination width (number of consecutive time points summed).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Entry `i` is `α_{k,i}·Δt`; always `k + 1` entries.
    pub fn scaled_weights(&self) -> &[Rational] {
        &self.scaled
    }

    /// Reduced fractions, e.g. `["-1/2", "1/2"]`.
    pub fn to_fraction_strings(&self) -> Vec<String> {
        self.scaled.iter().map(|w| w.to_string()).collect()
    }

    /// Residual of the moment condition of order `j`, computed exactly.
    ///
    /// Zero for every `j` in `0..=k` except `j = 1`, where it is one.
    pub fn moment(&self, j: u32) -> Rational {
        self.scaled
            .iter()
            .enumerate()
            .map(|(i, w)| w * shifted_power_sum(i, self.m, j))
            .fold(Rational::zero(), |acc, t| acc + t)
    }
}

/// `Σ_{s=0}^{m-1} (i+s)^j` with `0^0 = 1`.
fn shifted_power_sum(i: usize, m: usize, j: u32) -> Rational {
    let total: BigInt = (0..m).map(|s| BigInt::from(i + s).pow(j)).sum();
    Rational::from_integer(total)
}

/// Moment matrix of the combined rule; row `j`, column `i` holds
/// `Σ_{s=0}^{m-1} (i+s)^j`.
pub fn moment_matrix(k: usize, m: usize) -> Result<Vec<Vec<Rational>>, WeightError> {
    if k == 0 || m == 0 {
        return Err(WeightError::InvalidShape { k, m });
    }
    Ok((0..=k as u32)
        .map(|j| (0..=k).map(|i| shifted_power_sum(i, m, j)).collect())
        .collect())
}

/// Solve the moment system for the scaled weights of the `(k, m)` rule.
pub fn solve_weights(k: usize, m: usize) -> Result<WeightSet, WeightError> {
    let matrix = moment_matrix(k, m)?;
    let mut rhs = vec![Rational::zero(); k + 1];
    rhs[1] = Rational::one();
    let scaled = solve_exact(matrix, rhs).ok_or(WeightError::SingularSystem { k, m })?;
    Ok(WeightSet { k, m, scaled })
}

/// Gauss-Jordan elimination over the rationals with partial pivoting on the
/// largest absolute value. Returns `None` when the matrix is singular.
pub(crate) fn solve_exact(mut a: Vec<Vec<Rational>>, mut b: Vec<Rational>) -> Option<Vec<Rational>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|row| row.len() == n));
    for col in 0..n {
        let pivot = (col..n)
            .filter(|&r| !a[r][col].is_zero())
            .max_by(|&r1, &r2| a[r1][col].abs().cmp(&a[r2][col].abs()))?;
        a.swap(col, pivot);
        b.swap(col, pivot);

        let inv = a[col][col].recip();
        for c in col..n {
            a[col][c] = &a[col][c] * &inv;
        }
        b[col] = &b[col] * &inv;

        for r in 0..n {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let factor = a[r][col].clone();
            for c in col..n {
                let delta = &factor * &a[col][c];
                a[r][c] -= delta;
            }
            let delta = &factor * &b[col];
            b[r] -= delta;
        }
    }
    Some(b)
}

/// Round every weight to the nearest binary64.
pub fn weights_as_float(w: &WeightSet) -> Result<Vec<f64>, WeightError> {
    w.scaled
        .iter()
        .enumerate()
        .map(|(index, q)| rational_to_f64(q).ok_or(WeightError::Overflow { index }))
        .collect()
}

pub(crate) fn rational_to_f64(q: &Rational) -> Option<f64> {
    q.to_f64().filter(|v| v.is_finite())
}

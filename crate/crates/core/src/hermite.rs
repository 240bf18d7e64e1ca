//! Gauss-Hermite quadrature for the weight `e^{-x²}` and Gaussian
//! expectations built on tensor products of it.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::kahan::KahanSum;

pub const MAX_POINTS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuadratureError {
    #[error("number of quadrature points must lie in 1..={MAX_POINTS}, got {0}")]
    InvalidPointCount(usize),
    #[error("tensor rule dimension must be positive")]
    ZeroDimension,
}

/// Failure of the integrand at one tensor node.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("integrand failed at quadrature node {index:?}: {source}")]
pub struct ExpectationError<E: std::error::Error + 'static> {
    pub index: Vec<usize>,
    #[source]
    pub source: E,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule1D {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule1D {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Roots of `H_L`, strictly increasing.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ ω_j p(a_j)`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let mut acc = KahanSum::default();
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc.add(w * f(*x));
        }
        acc.value()
    }
}

/// Orthonormal Hermite polynomials `p_0 … p_{n}` at `x` (weight `e^{-x²}`).
fn orthonormal_hermite(x: f64, n: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(PI.powf(-0.25));
    if n == 0 {
        return;
    }
    out.push(std::f64::consts::SQRT_2 * x * out[0]);
    for k in 1..n {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * x * out[k] - (kf / (kf + 1.0)).sqrt() * out[k - 1];
        out.push(next);
    }
}

/// `L`-point Gauss-Hermite rule.
///
/// Nodes come from the Jacobi matrix eigenvalues, each polished by one
/// Newton step on `H_L`; weights use the Christoffel function
/// `1 / Σ_{k<L} p_k(a_j)²`, which stays accurate for the tiny outer weights.
pub fn gauss_hermite(points: usize) -> Result<QuadratureRule1D, QuadratureError> {
    if points == 0 || points > MAX_POINTS {
        return Err(QuadratureError::InvalidPointCount(points));
    }
    let l = points;
    let mut jacobi = DMatrix::<f64>::zeros(l, l);
    for i in 1..l {
        let off = (i as f64 / 2.0).sqrt();
        jacobi[(i - 1, i)] = off;
        jacobi[(i, i - 1)] = off;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);

    let mut p = Vec::with_capacity(l + 1);
    for x in nodes.iter_mut() {
        orthonormal_hermite(*x, l, &mut p);
        // p_L' = sqrt(2L) p_{L-1}
        let deriv = (2.0 * l as f64).sqrt() * p[l - 1];
        if deriv != 0.0 {
            *x -= p[l] / deriv;
        }
    }
    // exact antisymmetry
    for i in 0..l / 2 {
        let half = 0.5 * (nodes[l - 1 - i] - nodes[i]);
        nodes[i] = -half;
        nodes[l - 1 - i] = half;
    }
    if l % 2 == 1 {
        nodes[l / 2] = 0.0;
    }

    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            orthonormal_hermite(x, l - 1, &mut p);
            1.0 / p.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    for i in 0..l / 2 {
        let avg = 0.5 * (weights[i] + weights[l - 1 - i]);
        weights[i] = avg;
        weights[l - 1 - i] = avg;
    }
    Ok(QuadratureRule1D { nodes, weights })
}

/// Tensor product of a one-dimensional rule in `dim` dimensions.
///
/// The `L^dim` nodes are enumerated lazily in lexicographic multi-index
/// order (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRule {
    dim: usize,
    base: QuadratureRule1D,
}

impl TensorRule {
    pub fn new(dim: usize, base: QuadratureRule1D) -> Result<Self, QuadratureError> {
        if dim == 0 {
            return Err(QuadratureError::ZeroDimension);
        }
        Ok(Self { dim, base })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> &QuadratureRule1D {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.base.len().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lexicographic walk over all nodes; yields `(multi_index, node, weight)`.
    pub fn points(&self) -> TensorPoints<'_> {
        TensorPoints { rule: self, current: vec![0; self.dim], node: vec![0.0; self.dim], started: false, done: false }
    }

    /// Flattened nodes (`len() × dim`, row-major) and product weights.
    ///
    /// Convenient for hot loops that revisit the same small rule many times.
    pub fn materialize(&self) -> (Vec<f64>, Vec<f64>) {
        let mut nodes = Vec::with_capacity(self.len() * self.dim);
        let mut weights = Vec::with_capacity(self.len());
        let mut it = self.points();
        while let Some((_, node, w)) = it.next_point() {
            nodes.extend_from_slice(node);
            weights.push(w);
        }
        (nodes, weights)
    }
}

pub struct TensorPoints<'a> {
    rule: &'a TensorRule,
    current: Vec<usize>,
    node: Vec<f64>,
    started: bool,
    done: bool,
}

impl TensorPoints<'_> {
    /// Lending-iterator step; the slices borrow internal buffers.
    pub fn next_point(&mut self) -> Option<(&[usize], &[f64], f64)> {
        if self.done {
            return None;
        }
        let base = &self.rule.base;
        if self.started {
            let mut axis = self.rule.dim;
            loop {
                if axis == 0 {
                    self.done = true;
                    return None;
                }
                axis -= 1;
                self.current[axis] += 1;
                if self.current[axis] < base.len() {
                    break;
                }
                self.current[axis] = 0;
            }
        }
        self.started = true;
        let mut weight = 1.0;
        for (axis, &i) in self.current.iter().enumerate() {
            self.node[axis] = base.nodes[i];
            weight *= base.weights[i];
        }
        Some((&self.current, &self.node, weight))
    }
}

/// `E[g(ξ)]` for `ξ ~ N(0, I_dim)`, approximated by
/// `π^{-dim/2} Σ_j ω_j g(√2 a_j)`.
///
/// `g` writes its `p` outputs into the provided buffer. Summation runs in
/// lexicographic node order with compensation, so results are reproducible.
pub fn gaussian_expectation<E, G>(
    rule: &TensorRule,
    p: usize,
    mut g: G,
) -> Result<Vec<f64>, ExpectationError<E>>
where
    E: std::error::Error + 'static,
    G: FnMut(&[f64], &mut [f64]) -> Result<(), E>,
{
    let norm = PI.powf(-(rule.dim as f64) / 2.0);
    let mut acc = vec![KahanSum::default(); p];
    let mut value = vec![0.0; p];
    let mut scaled = vec![0.0; rule.dim];
    let mut it = rule.points();
    while let Some((index, node, w)) = it.next_point() {
        for (s, a) in scaled.iter_mut().zip(node) {
            *s = std::f64::consts::SQRT_2 * a;
        }
        g(&scaled, &mut value).map_err(|source| ExpectationError { index: index.to_vec(), source })?;
        for (a, v) in acc.iter_mut().zip(&value) {
            a.add(w * v);
        }
    }
    Ok(acc.iter().map(|a| norm * a.value()).collect())
}

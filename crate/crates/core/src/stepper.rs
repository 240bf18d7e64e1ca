//! Backward time marching of the fully discrete combined multi-step scheme.
//!
//! With scaled weights `w_i = α_{k,i}·Δt` and window sums
//! `c_ℓ = Σ_{s=max(0,ℓ-m+1)}^{min(ℓ,k)} w_s`, one step computes at every
//! lattice node `x` of level `n`
//!
//! ```text
//! Z^n = (1/Δt) Σ_{j=1}^{W} c_j E[Y^{n+j}(X^{n,j}) ΔW_jᵀ]
//! c_0 Y^n = -Σ_{j=1}^{W} c_j E[Y^{n+j}(X^{n,j})] - Δt f(t_n, x, Y^n, Z^n)
//! ```
//!
//! with `W = k + m - 1`, `X^{n,j} = x + a jΔt + b ΔW_j` and the expectations
//! replaced by Gauss-Hermite sums over interpolated values. Coupled problems
//! wrap this in an outer fixed-point loop that feeds `(Y, Z)` back into `a`
//! and `b`.
//!
//! Each level lives on its own lattice centred at `x0` with the same mesh
//! width. Level radii grow with the time index so that every Euler node of
//! level `n` lands inside the lattices of levels `n+1..n+W`.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbsde::FbsdeProblem;
use crate::fdweights::{rational_to_f64, solve_weights, Rational, WeightError};
use crate::hermite::{gauss_hermite, QuadratureError, TensorRule};
use crate::kahan::KahanSum;
use crate::lattice::{build_lattice_capped, covered_radius, Lattice, LatticeError, Stencil, ValueLevel};
use crate::stability::characteristic_polynomial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Terminal window sampled from the analytic solution.
    Exact,
    /// Terminal window built by lower-order steps on a refined time grid.
    Ramp,
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "ramp" => Ok(Self::Ramp),
            other => Err(format!("unknown init mode {other:?}; expected exact or ramp")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Step count of the weight rule, `3..=9`.
    pub k: usize,
    /// Number of consecutive levels summed per weight.
    pub m_comb: usize,
    /// Number of time steps `N_T`.
    pub n_steps: usize,
    /// Interpolation degree.
    pub r: usize,
    /// Mesh width; derived as `Δt^{(k+1)/(r+1)}` when absent.
    pub h: Option<f64>,
    /// Gauss-Hermite points per Brownian dimension.
    pub gh_points: usize,
    /// Absolute tolerance of the inner `Y` iteration.
    pub picard_tol: f64,
    pub picard_max: usize,
    /// Stopping tolerance of the coupled outer loop.
    pub epsilon0: f64,
    pub outer_max: usize,
    pub init_mode: InitMode,
    /// Width of the lattice per Euler step, in units of `|b|·√(jΔt)`.
    /// Never below the reach of the outermost quadrature node.
    pub domain_sigma: f64,
    /// Time-grid refinement factor used while ramping up the terminal window.
    pub ramp_substeps: usize,
    pub max_nodes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            k: 3,
            m_comb: 4,
            n_steps: 16,
            r: 10,
            h: None,
            gh_points: 10,
            picard_tol: 1e-14,
            picard_max: 100,
            epsilon0: 1e-12,
            outer_max: 200,
            init_mode: InitMode::Exact,
            domain_sigma: 6.0,
            ramp_substeps: 8,
            max_nodes: crate::lattice::DEFAULT_MAX_NODES,
        }
    }
}

impl SolverConfig {
    pub fn dt(&self, problem: &FbsdeProblem) -> f64 {
        problem.horizon() / self.n_steps as f64
    }

    /// Mesh width actually used.
    pub fn mesh_width(&self, problem: &FbsdeProblem) -> f64 {
        self.h.unwrap_or_else(|| self.dt(problem).powf((self.k as f64 + 1.0) / (self.r as f64 + 1.0)))
    }

    /// Number of future levels one step reads.
    pub fn window(&self) -> usize {
        self.k + self.m_comb - 1
    }

    pub fn validate(&self, problem: &FbsdeProblem) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidConfig(msg));
        if !(3..=9).contains(&self.k) {
            return bad(format!("k must lie in 3..=9, got {}", self.k));
        }
        if self.m_comb == 0 {
            return bad("m_comb must be positive".into());
        }
        if self.n_steps < self.window() {
            return bad(format!("N_T = {} is below the window k + m_comb - 1 = {}", self.n_steps, self.window()));
        }
        if self.r == 0 || self.r > crate::lattice::MAX_DEGREE {
            return bad(format!("interpolation degree {} is out of range", self.r));
        }
        if let Some(h) = self.h {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("mesh width must be positive, got {h}"));
            }
        }
        if !(self.picard_tol > 0.0) || self.picard_max == 0 {
            return bad("Picard tolerance and cap must be positive".into());
        }
        if !(self.epsilon0 > 0.0) || self.outer_max == 0 {
            return bad("outer tolerance and cap must be positive".into());
        }
        if !(self.domain_sigma > 0.0 && self.domain_sigma.is_finite()) {
            return bad(format!("domain_sigma must be positive, got {}", self.domain_sigma));
        }
        if self.ramp_substeps == 0 {
            return bad("ramp_substeps must be positive".into());
        }
        if self.init_mode == InitMode::Exact && !problem.has_analytic() {
            return Err(SolverError::MissingAnalytic);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("exact initialization needs an analytic solution")]
    MissingAnalytic,
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("level {time_index}: {source}")]
    Lattice {
        time_index: usize,
        #[source]
        source: LatticeError,
    },
    #[error("level {time_index}, node {x:?}: Euler node {node:?} (j={j}, q={q}) is off the lattice of level {}: {source}", time_index + j)]
    OutOfDomain {
        time_index: usize,
        x: Vec<f64>,
        j: usize,
        q: usize,
        node: Vec<f64>,
        #[source]
        source: LatticeError,
    },
    #[error("level {time_index}, node {x:?}: Y iteration did not reach tolerance, last update {residual:e}")]
    PicardDivergence { time_index: usize, x: Vec<f64>, residual: f64 },
    #[error("level {time_index}, node {x:?}: outer iteration did not reach tolerance, last change {change:e}")]
    OuterDivergence { time_index: usize, x: Vec<f64>, change: f64 },
    #[error("level {time_index}, node {x:?}: non-finite value")]
    NonFinite { time_index: usize, x: Vec<f64> },
    #[error("time budget exhausted after {elapsed:.1} s at level {time_index}")]
    BudgetExceeded { elapsed: f64, time_index: usize },
}

/// Window sums `c_0..c_W` of a `(k, m)` rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeCoefficients {
    k: usize,
    m: usize,
    exact: Vec<Rational>,
    c: Vec<f64>,
}

impl SchemeCoefficients {
    pub fn new(k: usize, m: usize) -> Result<Self, SolverError> {
        let poly = characteristic_polynomial(&solve_weights(k, m)?);
        let c = poly
            .coeffs
            .iter()
            .enumerate()
            .map(|(index, q)| rational_to_f64(q).ok_or(WeightError::Overflow { index }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { k, m, exact: poly.coeffs, c })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of future levels read.
    pub fn window(&self) -> usize {
        self.c.len() - 1
    }

    /// `c_0..=c_W` rounded to binary64.
    pub fn values(&self) -> &[f64] {
        &self.c
    }

    pub fn exact(&self) -> &[Rational] {
        &self.exact
    }
}

/// Tensor Gauss-Hermite rule over the Brownian dimensions with weights
/// pre-scaled by `π^{-d/2}`.
#[derive(Debug, Clone)]
pub struct Quadrature {
    d: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    max_abs_node: f64,
}

impl Quadrature {
    pub fn new(d: usize, points: usize) -> Result<Self, QuadratureError> {
        let rule = TensorRule::new(d, gauss_hermite(points)?)?;
        let (nodes, weights) = rule.materialize();
        let norm = std::f64::consts::PI.powf(-(d as f64) / 2.0);
        let max_abs_node = rule.base().nodes().iter().fold(0.0f64, |acc, a| acc.max(a.abs()));
        Ok(Self { d, nodes, weights: weights.iter().map(|w| w * norm).collect(), max_abs_node })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Gauss-Hermite node `q` (not yet scaled by `√2`).
    pub fn node(&self, q: usize) -> &[f64] {
        &self.nodes[q * self.d..(q + 1) * self.d]
    }

    /// Weight `q` including the factor `π^{-d/2}`.
    pub fn weight(&self, q: usize) -> f64 {
        self.weights[q]
    }
}

/// One quadrature node of an Euler predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerPoint {
    pub position: Vec<f64>,
    /// Normalized quadrature weight (the weights sum to one).
    pub weight: f64,
    /// Brownian increment `ΔW_j = √(2jΔt)·a_q` represented by this node.
    pub increment: Vec<f64>,
}

/// Euler predictor nodes `x + a(t,x,y,z) jΔt + b(t,x,y,z) √(2jΔt) a_q`.
#[allow(clippy::too_many_arguments)]
pub fn euler_points(
    problem: &FbsdeProblem,
    quad: &Quadrature,
    x: &[f64],
    t: f64,
    j: usize,
    dt: f64,
    y: &[f64],
    z: &[f64],
) -> Vec<EulerPoint> {
    let (n, d) = (problem.n(), problem.d());
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n * d];
    problem.drift(t, x, y, z, &mut a);
    problem.diffusion(t, x, y, z, &mut b);
    let tau = j as f64 * dt;
    let scale = (2.0 * tau).sqrt();
    (0..quad.len())
        .map(|q| {
            let increment: Vec<f64> = quad.node(q).iter().map(|v| scale * v).collect();
            let mut position = vec![0.0; n];
            predictor(x, &a, &b, tau, &increment, &mut position);
            EulerPoint { position, weight: quad.weight(q), increment }
        })
        .collect()
}

#[inline]
fn predictor(x: &[f64], a: &[f64], b: &[f64], tau: f64, dw: &[f64], out: &mut [f64]) {
    let d = dw.len();
    for i in 0..x.len() {
        let mut v = x[i] + a[i] * tau;
        for l in 0..d {
            v += b[i * d + l] * dw[l];
        }
        out[i] = v;
    }
}

/// Per-thread buffers for one node.
#[derive(Debug, Default)]
struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
    dw: Vec<f64>,
    node: Vec<f64>,
    yv: Vec<f64>,
    stencil: Stencil,
    ey: Vec<KahanSum>,
    eyw: Vec<KahanSum>,
}

/// Everything one backward step reads.
pub struct StepContext<'a> {
    pub problem: &'a FbsdeProblem,
    pub quad: &'a Quadrature,
    pub coeffs: &'a SchemeCoefficients,
    /// `window[j-1]` holds level `n + j`.
    pub window: &'a [ValueLevel],
    pub dt: f64,
    pub r: usize,
    pub time_index: usize,
    pub t: f64,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub epsilon0: f64,
    pub outer_max: usize,
}

/// `Σ_j c_j E[Y^{n+j}]` and `Σ_j c_j E[Y^{n+j} ΔW_jᵀ]` at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedExpectations {
    pub y: Vec<f64>,
    pub yw: Vec<f64>,
}

/// Per-node iteration counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub picard: usize,
    pub outer: usize,
}

/// Iteration counts of one level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub time_index: usize,
    pub nodes: usize,
    pub picard_max: usize,
    pub picard_mean: f64,
    pub outer_max: usize,
}

impl StepContext<'_> {
    fn scratch(&self) -> Scratch {
        let (n, m, d) = (self.problem.n(), self.problem.m(), self.problem.d());
        Scratch {
            a: vec![0.0; n],
            b: vec![0.0; n * d],
            dw: vec![0.0; d],
            node: vec![0.0; n],
            yv: vec![0.0; m],
            stencil: Stencil::default(),
            ey: vec![KahanSum::default(); m],
            eyw: vec![KahanSum::default(); m * d],
        }
    }

    /// `(E[Y^{n+j}], E[Y^{n+j} ΔW_jᵀ])` at `x`, with `a` and `b` frozen at
    /// `(t_n, x, y, z)`.
    pub fn conditional_expectations(
        &self,
        x: &[f64],
        j: usize,
        y: &[f64],
        z: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
        let mut s = self.scratch();
        self.problem.drift(self.t, x, y, z, &mut s.a);
        self.problem.diffusion(self.t, x, y, z, &mut s.b);
        self.expectations_into(x, j, &mut s)?;
        Ok((s.ey.iter().map(KahanSum::value).collect(), s.eyw.iter().map(KahanSum::value).collect()))
    }

    /// Fills `s.ey`, `s.eyw` for level `n + j`; `s.a`, `s.b` must be set.
    fn expectations_into(&self, x: &[f64], j: usize, s: &mut Scratch) -> Result<(), SolverError> {
        let (m, d) = (self.problem.m(), self.problem.d());
        let level = &self.window[j - 1];
        let tau = j as f64 * self.dt;
        let scale = (2.0 * tau).sqrt();
        s.ey.fill(KahanSum::default());
        s.eyw.fill(KahanSum::default());
        for q in 0..self.quad.len() {
            for (dw, a) in s.dw.iter_mut().zip(self.quad.node(q)) {
                *dw = scale * a;
            }
            predictor(x, &s.a, &s.b, tau, &s.dw, &mut s.node);
            level.interpolate_y_into(&s.node, self.r, &mut s.stencil, &mut s.yv).map_err(|source| {
                SolverError::OutOfDomain {
                    time_index: self.time_index,
                    x: x.to_vec(),
                    j,
                    q,
                    node: s.node.clone(),
                    source,
                }
            })?;
            let w = self.quad.weight(q);
            for c in 0..m {
                let wy = w * s.yv[c];
                s.ey[c].add(wy);
                for l in 0..d {
                    s.eyw[c * d + l].add(wy * s.dw[l]);
                }
            }
        }
        Ok(())
    }

    /// Coefficient-weighted expectations over the whole window, summed in
    /// the fixed order `j` outer, `q` inner.
    pub fn weighted_expectations(&self, x: &[f64], y: &[f64], z: &[f64]) -> Result<WeightedExpectations, SolverError> {
        let mut s = self.scratch();
        self.weighted_into(x, y, z, &mut s)
    }

    fn weighted_into(&self, x: &[f64], y: &[f64], z: &[f64], s: &mut Scratch) -> Result<WeightedExpectations, SolverError> {
        let (m, d) = (self.problem.m(), self.problem.d());
        self.problem.drift(self.t, x, y, z, &mut s.a);
        self.problem.diffusion(self.t, x, y, z, &mut s.b);
        let c = self.coeffs.values();
        let mut sy = vec![KahanSum::default(); m];
        let mut syw = vec![KahanSum::default(); m * d];
        for j in 1..=self.coeffs.window() {
            self.expectations_into(x, j, s)?;
            for (acc, e) in sy.iter_mut().zip(&s.ey) {
                acc.add(c[j] * e.value());
            }
            for (acc, e) in syw.iter_mut().zip(&s.eyw) {
                acc.add(c[j] * e.value());
            }
        }
        Ok(WeightedExpectations {
            y: sy.iter().map(KahanSum::value).collect(),
            yw: syw.iter().map(KahanSum::value).collect(),
        })
    }

    /// Explicit `Z^n`.
    pub fn z_update(&self, sums: &WeightedExpectations) -> Vec<f64> {
        sums.yw.iter().map(|v| v / self.dt).collect()
    }

    /// Solves `c_0 Y = -Σ c_j E[Y^{n+j}] - Δt f(t_n, x, Y, Z)` by fixed-point
    /// iteration from `seed`. Returns `Y` and the iteration count.
    pub fn y_update(
        &self,
        x: &[f64],
        sums: &WeightedExpectations,
        z: &[f64],
        seed: &[f64],
    ) -> Result<(Vec<f64>, usize), SolverError> {
        let c0 = self.coeffs.values()[0];
        let m = self.problem.m();
        let mut y = seed.to_vec();
        let mut f = vec![0.0; m];
        let mut change = f64::INFINITY;
        for it in 1..=self.picard_max {
            self.problem.driver(self.t, x, &y, z, &mut f);
            change = 0.0;
            for c in 0..m {
                let next = (-sums.y[c] - self.dt * f[c]) / c0;
                if !next.is_finite() {
                    return Err(SolverError::NonFinite { time_index: self.time_index, x: x.to_vec() });
                }
                change = change.max((next - y[c]).abs());
                y[c] = next;
            }
            if change < self.picard_tol {
                return Ok((y, it));
            }
        }
        Err(SolverError::PicardDivergence { time_index: self.time_index, x: x.to_vec(), residual: change })
    }

    /// `Y^n, Z^n` at one node with forward coefficients evaluated at
    /// `(seed_y, seed_z)`.
    fn decoupled_node(&self, x: &[f64], seed_y: &[f64], seed_z: &[f64], s: &mut Scratch) -> Result<(Vec<f64>, Vec<f64>, NodeStats), SolverError> {
        let sums = self.weighted_into(x, seed_y, seed_z, s)?;
        let z = self.z_update(&sums);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite { time_index: self.time_index, x: x.to_vec() });
        }
        let (y, picard) = self.y_update(x, &sums, &z, seed_y)?;
        Ok((y, z, NodeStats { picard, outer: 1 }))
    }

    fn coupled_node(&self, x: &[f64], seed_y: &[f64], seed_z: &[f64], s: &mut Scratch) -> Result<(Vec<f64>, Vec<f64>, NodeStats), SolverError> {
        let (mut y, mut z) = (seed_y.to_vec(), seed_z.to_vec());
        let mut picard = 0;
        let mut change = f64::INFINITY;
        for outer in 1..=self.outer_max {
            let sums = self.weighted_into(x, &y, &z, s)?;
            let z_next = self.z_update(&sums);
            if z_next.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::NonFinite { time_index: self.time_index, x: x.to_vec() });
            }
            let (y_next, it) = self.y_update(x, &sums, &z_next, seed_y)?;
            picard = picard.max(it);
            change = y_next.iter().zip(&y).chain(z_next.iter().zip(&z)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            y = y_next;
            z = z_next;
            if change < self.epsilon0 {
                return Ok((y, z, NodeStats { picard, outer }));
            }
        }
        Err(SolverError::OuterDivergence { time_index: self.time_index, x: x.to_vec(), change })
    }

    fn step(&self, lattice: &Lattice, coupled: bool) -> Result<(ValueLevel, LevelStats), SolverError> {
        let (n, m, d) = (self.problem.n(), self.problem.m(), self.problem.d());
        let next = &self.window[0];
        let results: Vec<(Vec<f64>, Vec<f64>, NodeStats)> = (0..lattice.len())
            .into_par_iter()
            .map_init(
                || (self.scratch(), vec![0i64; n], vec![0.0; n]),
                |(s, idx, x), node| {
                    lattice.multi_index(node, idx);
                    lattice.node_into(node, x);
                    // lattices share origin and mesh width, and level n+1 covers level n
                    let (seed_y, seed_z) = match next.lattice().flat_index(idx) {
                        Some(k) => (next.y_at(k).to_vec(), next.z_at(k).to_vec()),
                        None => next.interpolate(x, self.r).map_err(|source| SolverError::Lattice {
                            time_index: self.time_index + 1,
                            source,
                        })?,
                    };
                    if coupled {
                        self.coupled_node(x, &seed_y, &seed_z, s)
                    } else {
                        self.decoupled_node(x, &seed_y, &seed_z, s)
                    }
                },
            )
            .collect::<Result<_, _>>()?;
        let mut y = Vec::with_capacity(lattice.len() * m);
        let mut z = Vec::with_capacity(lattice.len() * m * d);
        let mut stats = LevelStats { time_index: self.time_index, nodes: lattice.len(), ..Default::default() };
        let mut picard_total = 0usize;
        for (yy, zz, st) in results {
            y.extend(yy);
            z.extend(zz);
            stats.picard_max = stats.picard_max.max(st.picard);
            stats.outer_max = stats.outer_max.max(st.outer);
            picard_total += st.picard;
        }
        stats.picard_mean = picard_total as f64 / lattice.len().max(1) as f64;
        let level = ValueLevel::new(lattice.clone(), m, d, y, z, self.time_index)
            .map_err(|source| SolverError::Lattice { time_index: self.time_index, source })?;
        Ok((level, stats))
    }
}

/// One step of the decoupled scheme on `lattice`; nodes are independent and
/// processed in parallel.
pub fn step_decoupled(ctx: &StepContext<'_>, lattice: &Lattice) -> Result<(ValueLevel, LevelStats), SolverError> {
    ctx.step(lattice, false)
}

/// One step of the coupled scheme: per node, iterate the decoupled update
/// with `a`, `b` evaluated at the latest `(Y, Z)` until both change by less
/// than `ε₀`, starting from level `n+1` at `x`.
pub fn step_coupled(ctx: &StepContext<'_>, lattice: &Lattice) -> Result<(ValueLevel, LevelStats), SolverError> {
    ctx.step(lattice, true)
}

/// Per-axis bounds on `|a_i|` and `Σ_l |b_il|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
}

/// Samples `a` and `b` on a box of half-width `radius` around `x0` and over
/// the time horizon, along the analytic solution when known and along
/// `(g(x), 0)` otherwise.
pub fn sample_bounds(problem: &FbsdeProblem, radius: &[f64]) -> CoefficientBounds {
    let (n, m, d) = (problem.n(), problem.m(), problem.d());
    let per_axis: usize = match n {
        1 => 401,
        2 => 61,
        3 => 15,
        _ => 5,
    };
    let mut drift = vec![0.0f64; n];
    let mut diffusion = vec![0.0f64; n];
    let (mut x, mut y, mut z) = (vec![0.0; n], vec![0.0; m], vec![0.0; m * d]);
    let (mut a, mut b) = (vec![0.0; n], vec![0.0; n * d]);
    let total = per_axis.pow(n as u32);
    for ti in 0..=8 {
        let t = problem.horizon() * ti as f64 / 8.0;
        for p in 0..total {
            let mut rest = p;
            for i in 0..n {
                let u = (rest % per_axis) as f64 / (per_axis - 1) as f64;
                rest /= per_axis;
                x[i] = problem.x0()[i] + radius[i] * (2.0 * u - 1.0);
            }
            if problem.solution_into(t, &x, &mut y, &mut z).is_err() {
                problem.terminal(&x, &mut y);
                z.fill(0.0);
            }
            if y.iter().chain(&z).any(|v| !v.is_finite()) {
                continue;
            }
            problem.drift(t, &x, &y, &z, &mut a);
            problem.diffusion(t, &x, &y, &z, &mut b);
            for i in 0..n {
                if a[i].is_finite() {
                    drift[i] = drift[i].max(a[i].abs());
                }
                let row: f64 = b[i * d..(i + 1) * d].iter().map(|v| v.abs()).sum();
                if row.is_finite() {
                    diffusion[i] = diffusion[i].max(row);
                }
            }
        }
    }
    CoefficientBounds { drift, diffusion }
}

/// Lattice half-widths per time level `0..=count` on a grid of step `dt`.
///
/// `R_0` fits one stencil; `R_n = max_{1≤j≤min(W,n)} R_{n-j} + reach_j`
/// with `reach_j = A jΔt + B √(jΔt)·c`, so every Euler node of level `n`
/// lies inside level `n+j`. Radii are rounded up to whole cells of width `h`
/// before they feed later levels.
pub fn level_radii(bounds: &CoefficientBounds, dt: f64, h: f64, count: usize, window: usize, reach: f64, base: f64) -> Vec<Vec<f64>> {
    let n = bounds.drift.len();
    let base = covered_radius(base, h);
    let mut radii: Vec<Vec<f64>> = Vec::with_capacity(count + 1);
    radii.push(vec![base; n]);
    for level in 1..=count {
        let mut r = vec![base; n];
        for j in 1..=window.min(level) {
            let tau = j as f64 * dt;
            for i in 0..n {
                let cand = radii[level - j][i] + bounds.drift[i] * tau + bounds.diffusion[i] * tau.sqrt() * reach;
                r[i] = r[i].max(cand);
            }
        }
        radii.push(r.iter().map(|v| covered_radius(*v, h)).collect());
    }
    radii
}

/// Solver output at `(0, x0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub y0: Vec<f64>,
    pub z0: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub dt: f64,
    pub h: f64,
    pub r: usize,
    pub gh_points: usize,
    pub bounds: CoefficientBounds,
    /// Node count of the largest lattice.
    pub max_level_nodes: usize,
    /// Per computed level, in the order computed (terminal side first).
    pub levels: Vec<LevelStats>,
    pub wall_seconds: f64,
}

/// Optional limits on a solve.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveOptions {
    pub deadline: Option<Instant>,
}

/// Prepared state shared by initialization and the main march.
struct Plan<'a> {
    problem: &'a FbsdeProblem,
    cfg: &'a SolverConfig,
    quad: Quadrature,
    dt: f64,
    h: f64,
    reach: f64,
    bounds: CoefficientBounds,
    radii: Vec<Vec<f64>>,
}

impl<'a> Plan<'a> {
    fn new(cfg: &'a SolverConfig, problem: &'a FbsdeProblem) -> Result<Self, SolverError> {
        cfg.validate(problem)?;
        let quad = Quadrature::new(problem.d(), cfg.gh_points)?;
        let dt = cfg.dt(problem);
        let h = cfg.mesh_width(problem);
        let reach = cfg.domain_sigma.max(std::f64::consts::SQRT_2 * quad.max_abs_node);
        let base = (cfg.r as f64 / 2.0).ceil() * h;
        let n = problem.n();
        // grow the sampling box until the bounds stop changing
        let mut bounds = sample_bounds(problem, &vec![base.max(1.0); n]);
        let mut radii = level_radii(&bounds, dt, h, cfg.n_steps, cfg.window(), reach, base);
        for _ in 0..12 {
            let next = sample_bounds(problem, &radii[cfg.n_steps]);
            let grown = next.drift.iter().zip(&bounds.drift).chain(next.diffusion.iter().zip(&bounds.diffusion)).any(|(p, q)| *p > *q * (1.0 + 1e-12));
            if !grown {
                break;
            }
            bounds = CoefficientBounds {
                drift: next.drift.iter().zip(&bounds.drift).map(|(p, q)| p.max(*q)).collect(),
                diffusion: next.diffusion.iter().zip(&bounds.diffusion).map(|(p, q)| p.max(*q)).collect(),
            };
            radii = level_radii(&bounds, dt, h, cfg.n_steps, cfg.window(), reach, base);
        }
        // coupled iterates and sampling gaps get a safety margin
        bounds.drift.iter_mut().for_each(|v| *v *= 1.1);
        bounds.diffusion.iter_mut().for_each(|v| *v *= 1.1);
        let radii = level_radii(&bounds, dt, h, cfg.n_steps, cfg.window(), reach, base);
        Ok(Self { problem, cfg, quad, dt, h, reach, bounds, radii })
    }

    fn lattice(&self, radius: &[f64], time_index: usize) -> Result<Lattice, SolverError> {
        build_lattice_capped(self.problem.x0(), self.h, radius, self.cfg.r, self.cfg.max_nodes)
            .map_err(|source| SolverError::Lattice { time_index, source })
    }

    fn context<'b>(&'b self, coeffs: &'b SchemeCoefficients, window: &'b [ValueLevel], time_index: usize, dt: f64) -> StepContext<'b> {
        StepContext {
            problem: self.problem,
            quad: &self.quad,
            coeffs,
            window,
            dt,
            r: self.cfg.r,
            time_index,
            t: time_index as f64 * dt,
            picard_tol: self.cfg.picard_tol,
            picard_max: self.cfg.picard_max,
            epsilon0: self.cfg.epsilon0,
            outer_max: self.cfg.outer_max,
        }
    }

    fn exact_level(&self, time_index: usize, t: f64, radius: &[f64]) -> Result<ValueLevel, SolverError> {
        let lattice = self.lattice(radius, time_index)?;
        let problem = self.problem;
        let mut missing = false;
        let level = ValueLevel::from_fn(lattice, problem.m(), problem.d(), time_index, |x, y, z| {
            missing |= problem.solution_into(t, x, y, z).is_err();
        });
        if missing {
            return Err(SolverError::MissingAnalytic);
        }
        level.map_err(|source| SolverError::Lattice { time_index, source })
    }

    /// Terminal level from `g`, with `Z = ∇g·b` by central differences.
    fn terminal_level(&self, time_index: usize, radius: &[f64]) -> Result<ValueLevel, SolverError> {
        let lattice = self.lattice(radius, time_index)?;
        let problem = self.problem;
        let (n, m, d) = (problem.n(), problem.m(), problem.d());
        let t = problem.horizon();
        let level = ValueLevel::from_fn(lattice, m, d, time_index, |x, y, z| {
            problem.terminal(x, y);
            let mut grad = vec![0.0; m * n];
            let (mut gp, mut gm) = (vec![0.0; m], vec![0.0; m]);
            let mut xp = x.to_vec();
            for i in 0..n {
                let step = 1e-6 * x[i].abs().max(1.0);
                xp[i] = x[i] + step;
                problem.terminal(&xp, &mut gp);
                xp[i] = x[i] - step;
                problem.terminal(&xp, &mut gm);
                xp[i] = x[i];
                for c in 0..m {
                    grad[c * n + i] = (gp[c] - gm[c]) / (2.0 * step);
                }
            }
            let mut b = vec![0.0; n * d];
            z.fill(0.0);
            for _ in 0..100 {
                problem.diffusion(t, x, y, z, &mut b);
                let mut change = 0.0f64;
                for c in 0..m {
                    for l in 0..d {
                        let v: f64 = (0..n).map(|i| grad[c * n + i] * b[i * d + l]).sum();
                        change = change.max((v - z[c * d + l]).abs());
                        z[c * d + l] = v;
                    }
                }
                if change <= 1e-15 {
                    break;
                }
            }
        });
        level.map_err(|source| SolverError::Lattice { time_index, source })
    }

    fn check_deadline(&self, opts: &SolveOptions, start: Instant, time_index: usize) -> Result<(), SolverError> {
        match opts.deadline {
            Some(deadline) if Instant::now() > deadline => {
                Err(SolverError::BudgetExceeded { elapsed: start.elapsed().as_secs_f64(), time_index })
            }
            _ => Ok(()),
        }
    }

    /// Levels `N_T - W + 1 ..= N_T`, ascending.
    fn initialize(&self, opts: &SolveOptions, start: Instant, stats: &mut Vec<LevelStats>) -> Result<VecDeque<ValueLevel>, SolverError> {
        let nt = self.cfg.n_steps;
        let w = self.cfg.window();
        match self.cfg.init_mode {
            InitMode::Exact => ((nt + 1 - w)..=nt)
                .map(|n| self.exact_level(n, n as f64 * self.dt, &self.radii[n]))
                .collect(),
            InitMode::Ramp => self.ramp(opts, start, stats),
        }
    }

    /// Builds the terminal window on a grid refined `s` times: step `i`
    /// below the terminal time uses the highest-order rule its `i` known
    /// levels support (`k' = min(k, i)`, then widening `m'`), after which the
    /// full rule runs on the fine grid. Every `s`-th fine level is kept.
    fn ramp(&self, opts: &SolveOptions, start: Instant, stats: &mut Vec<LevelStats>) -> Result<VecDeque<ValueLevel>, SolverError> {
        let cfg = self.cfg;
        let s = cfg.ramp_substeps;
        let nt = cfg.n_steps;
        let w = cfg.window();
        let fine_dt = self.dt / s as f64;
        let top = s * nt;
        let bottom = s * (nt + 1 - w);
        // fine radii: grow upward from the coarse radius at the bottom
        let mut fine_radii: Vec<Vec<f64>> = Vec::with_capacity(top - bottom + 1);
        for p in bottom..=top {
            let coarse = &self.radii[p.div_ceil(s)];
            let mut r = coarse.clone();
            for j in 1..=w.min(p - bottom) {
                let tau = j as f64 * fine_dt;
                for i in 0..r.len() {
                    let cand = fine_radii[p - bottom - j][i]
                        + self.bounds.drift[i] * tau
                        + self.bounds.diffusion[i] * tau.sqrt() * self.reach;
                    r[i] = r[i].max(cand);
                }
            }
            fine_radii.push(r.iter().map(|v| covered_radius(*v, self.h)).collect());
        }
        let radius = |p: usize| &fine_radii[p - bottom];

        let mut window: VecDeque<ValueLevel> = VecDeque::new();
        window.push_back(self.terminal_level(top, radius(top))?);
        let mut kept: VecDeque<ValueLevel> = VecDeque::new();
        kept.push_front(relabel(window[0].clone(), nt));
        let mut cache: Vec<Option<SchemeCoefficients>> = vec![None; w + 1];
        for p in (bottom..top).rev() {
            self.check_deadline(opts, start, p)?;
            let known = top - p;
            let kk = cfg.k.min(known);
            let mm = cfg.m_comb.min(known + 1 - kk);
            let slot = (kk + mm - 1).min(w);
            let coeffs = match &cache[slot] {
                Some(c) if c.k() == kk && c.m() == mm => c.clone(),
                _ => {
                    let c = SchemeCoefficients::new(kk, mm)?;
                    cache[slot] = Some(c.clone());
                    c
                }
            };
            let lattice = self.lattice(radius(p), p)?;
            let slice = window.make_contiguous();
            let ctx = self.context(&coeffs, &slice[..coeffs.window()], p, fine_dt);
            let (level, st) = ctx.step(&lattice, self.problem.is_coupled())?;
            if p % s == 0 {
                kept.push_front(relabel(level.clone(), p / s));
            }
            stats.push(st);
            window.push_front(level);
            window.truncate(w);
        }
        // fine lattices are at least as wide as the coarse ones; re-sample
        // them onto the coarse boxes
        kept.into_iter()
            .map(|lv| {
                let n = lv.time_index();
                let target = self.lattice(&self.radii[n], n)?;
                restrict(&lv, target, self.cfg.r).map_err(|source| SolverError::Lattice { time_index: n, source })
            })
            .collect()
    }
}

fn relabel(level: ValueLevel, time_index: usize) -> ValueLevel {
    let (lat, m, d) = (level.lattice().clone(), level.m(), level.d());
    ValueLevel::new(lat, m, d, level.y().to_vec(), level.z().to_vec(), time_index).expect("relabelling keeps the shape")
}

/// Copies node values of `level` onto `target`, a sub-lattice with the same
/// origin and mesh width.
fn restrict(level: &ValueLevel, target: Lattice, r: usize) -> Result<ValueLevel, LatticeError> {
    let n = target.dim();
    let mut idx = vec![0i64; n];
    let (m, d) = (level.m(), level.d());
    let mut y = Vec::with_capacity(target.len() * m);
    let mut z = Vec::with_capacity(target.len() * m * d);
    for node in 0..target.len() {
        target.multi_index(node, &mut idx);
        match level.lattice().flat_index(&idx) {
            Some(k) => {
                y.extend_from_slice(level.y_at(k));
                z.extend_from_slice(level.z_at(k));
            }
            None => {
                let (yy, zz) = level.interpolate(&target.node(node), r)?;
                y.extend(yy);
                z.extend(zz);
            }
        }
    }
    ValueLevel::new(target, m, d, y, z, level.time_index())
}

/// Marches the scheme from `t = T` down to `t = 0` and returns `(Y, Z)` at
/// `(0, x0)`.
pub fn solve(cfg: &SolverConfig, problem: &FbsdeProblem) -> Result<Solution, SolverError> {
    solve_with(cfg, problem, SolveOptions::default())
}

pub fn solve_with(cfg: &SolverConfig, problem: &FbsdeProblem, opts: SolveOptions) -> Result<Solution, SolverError> {
    let start = Instant::now();
    let plan = Plan::new(cfg, problem)?;
    let (levels, window) = march(&plan, &opts, start)?;
    let level0 = &window[0];
    let origin = level0.lattice().flat_index(&vec![0; problem.n()]).expect("x0 is a lattice node");
    Ok(Solution {
        y0: level0.y_at(origin).to_vec(),
        z0: level0.z_at(origin).to_vec(),
        diagnostics: Diagnostics {
            dt: plan.dt,
            h: plan.h,
            r: cfg.r,
            gh_points: cfg.gh_points,
            bounds: plan.bounds.clone(),
            max_level_nodes: plan.radii.iter().map(|r| r.iter().map(|v| 2 * (v / plan.h).ceil() as usize + 1).product::<usize>()).max().unwrap_or(0),
            levels,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Every level from `N_T` down to `0`, in the order computed. Intended for
/// inspection and tests; memory grows with `N_T`.
pub fn solve_all_levels(cfg: &SolverConfig, problem: &FbsdeProblem) -> Result<Vec<ValueLevel>, SolverError> {
    let plan = Plan::new(cfg, problem)?;
    let start = Instant::now();
    let mut stats = Vec::new();
    let mut window = plan.initialize(&SolveOptions::default(), start, &mut stats)?;
    let mut all: Vec<ValueLevel> = window.iter().rev().cloned().collect();
    let coeffs = SchemeCoefficients::new(cfg.k, cfg.m_comb)?;
    for n in (0..=cfg.n_steps - cfg.window()).rev() {
        let lattice = plan.lattice(&plan.radii[n], n)?;
        let ctx = plan.context(&coeffs, window.make_contiguous(), n, plan.dt);
        let (level, _) = ctx.step(&lattice, problem.is_coupled())?;
        all.push(level.clone());
        window.push_front(level);
        window.truncate(cfg.window());
    }
    Ok(all)
}

fn march(plan: &Plan<'_>, opts: &SolveOptions, start: Instant) -> Result<(Vec<LevelStats>, VecDeque<ValueLevel>), SolverError> {
    let cfg = plan.cfg;
    let mut stats = Vec::new();
    let mut window = plan.initialize(opts, start, &mut stats)?;
    let coeffs = SchemeCoefficients::new(cfg.k, cfg.m_comb)?;
    for n in (0..=cfg.n_steps - cfg.window()).rev() {
        plan.check_deadline(opts, start, n)?;
        let lattice = plan.lattice(&plan.radii[n], n)?;
        let ctx = plan.context(&coeffs, window.make_contiguous(), n, plan.dt);
        let (level, st) = ctx.step(&lattice, plan.problem.is_coupled())?;
        stats.push(st);
        window.push_front(level);
        window.truncate(cfg.window());
    }
    Ok((stats, window))
}

/// Lattice a solve with `cfg` uses for level `time_index`.
pub fn level_lattice(cfg: &SolverConfig, problem: &FbsdeProblem, time_index: usize) -> Result<Lattice, SolverError> {
    let plan = Plan::new(cfg, problem)?;
    let radius = plan.radii.get(time_index).ok_or_else(|| {
        SolverError::InvalidConfig(format!("time index {time_index} is past N_T = {}", cfg.n_steps))
    })?;
    plan.lattice(radius, time_index)
}

/// Terminal window of a solve, ascending in time index.
pub fn initialize_levels(cfg: &SolverConfig, problem: &FbsdeProblem) -> Result<Vec<ValueLevel>, SolverError> {
    let plan = Plan::new(cfg, problem)?;
    let mut stats = Vec::new();
    Ok(plan.initialize(&SolveOptions::default(), Instant::now(), &mut stats)?.into())
}

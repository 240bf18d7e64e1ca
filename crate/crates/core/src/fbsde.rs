//! FBSDE problem descriptions and the three benchmark instances.
//!
//! Conventions: the forward process solves `dX = a dt + b dW` and the
//! backward pair solves `-dY = f dt - Z dW` with `Y_T = g(X_T)`. `Z` is an
//! `m × d` matrix stored row-major, `b` an `n × d` matrix stored row-major.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// `(t, x, y, z, out)`; used for `a` (`out` has `n` entries), `b` (`n·d`)
/// and `f` (`m`).
pub type CoefficientFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, out)` with `m` outputs.
pub type TerminalFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, y_out, z_out)`.
pub type SolutionFn = Arc<dyn Fn(f64, &[f64], &mut [f64], &mut [f64]) + Send + Sync>;

pub const PROBLEM_NAMES: [&str; 3] = ["example1", "example2", "example3"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimensions must be positive (n={n}, m={m}, d={d})")]
    InvalidDimensions { n: usize, m: usize, d: usize },
    #[error("initial point has {got} components, expected {expected}")]
    InitialPointMismatch { expected: usize, got: usize },
    #[error("terminal time must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("unknown problem {0:?}; expected one of example1, example2, example3")]
    UnknownProblem(String),
    #[error("forward coefficients depend on (y, z) at t={t}, x={x:?} although the problem is declared decoupled")]
    CouplingMismatch { t: f64, x: Vec<f64> },
    #[error("analytic solution misses the terminal condition by {gap:e} at x={x:?}")]
    TerminalMismatch { x: Vec<f64>, gap: f64 },
    #[error("problem has no analytic solution")]
    NoAnalytic,
}

/// Immutable bundle of coefficient functions.
#[derive(Clone)]
pub struct FbsdeProblem {
    name: String,
    n: usize,
    m: usize,
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
    coupled: bool,
    a: CoefficientFn,
    b: CoefficientFn,
    f: CoefficientFn,
    g: TerminalFn,
    analytic: Option<SolutionFn>,
}

impl fmt::Debug for FbsdeProblem {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("FbsdeProblem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("d", &self.d)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("coupled", &self.coupled)
            .field("analytic", &self.analytic.is_some())
            .finish()
    }
}

/// Dimensions `(n, m, d)` of the forward state, the backward state and the
/// Brownian motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dimensions {
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

impl FbsdeProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dims: Dimensions,
        horizon: f64,
        x0: Vec<f64>,
        coupled: bool,
        a: CoefficientFn,
        b: CoefficientFn,
        f: CoefficientFn,
        g: TerminalFn,
    ) -> Result<Self, ProblemError> {
        let Dimensions { n, m, d } = dims;
        if n == 0 || m == 0 || d == 0 {
            return Err(ProblemError::InvalidDimensions { n, m, d });
        }
        if x0.len() != n {
            return Err(ProblemError::InitialPointMismatch { expected: n, got: x0.len() });
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ProblemError::InvalidHorizon(horizon));
        }
        Ok(Self { name: name.into(), n, m, d, horizon, x0, coupled, a, b, f, g, analytic: None })
    }

    pub fn with_analytic(mut self, solution: SolutionFn) -> Self {
        self.analytic = Some(solution);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> Dimensions {
        Dimensions { n: self.n, m: self.m, d: self.d }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn is_coupled(&self) -> bool {
        self.coupled
    }

    pub fn has_analytic(&self) -> bool {
        self.analytic.is_some()
    }

    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.a)(t, x, y, z, out)
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.b)(t, x, y, z, out)
    }

    #[inline]
    pub fn driver(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(t, x, y, z, out)
    }

    #[inline]
    pub fn terminal(&self, x: &[f64], out: &mut [f64]) {
        (self.g)(x, out)
    }

    /// Analytic `(Y, Z)` at `(t, x)`, if known.
    pub fn solution(&self, t: f64, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let sol = self.analytic.as_ref()?;
        let mut y = vec![0.0; self.m];
        let mut z = vec![0.0; self.m * self.d];
        sol(t, x, &mut y, &mut z);
        Some((y, z))
    }

    pub fn solution_into(&self, t: f64, x: &[f64], y: &mut [f64], z: &mut [f64]) -> Result<(), ProblemError> {
        let sol = self.analytic.as_ref().ok_or(ProblemError::NoAnalytic)?;
        sol(t, x, y, z);
        Ok(())
    }

    /// For a problem declared decoupled, evaluates `a` and `b` at two
    /// different `(y, z)` pairs for every sample point and requires identical
    /// output. Coupled problems pass trivially.
    pub fn check_decoupled(&self, samples: &[(f64, Vec<f64>)]) -> Result<(), ProblemError> {
        if self.coupled {
            return Ok(());
        }
        let (y1, z1) = (vec![0.0; self.m], vec![0.0; self.m * self.d]);
        let y2: Vec<f64> = (0..self.m).map(|i| 1.7 - 0.3 * i as f64).collect();
        let z2: Vec<f64> = (0..self.m * self.d).map(|i| -0.9 + 0.4 * i as f64).collect();
        let mut p = vec![0.0; self.n * self.d];
        let mut q = vec![0.0; self.n * self.d];
        for (t, x) in samples {
            for coef in [&self.a, &self.b] {
                let width = if Arc::ptr_eq(coef, &self.a) { self.n } else { self.n * self.d };
                coef(*t, x, &y1, &z1, &mut p[..width]);
                coef(*t, x, &y2, &z2, &mut q[..width]);
                if p[..width] != q[..width] {
                    return Err(ProblemError::CouplingMismatch { t: *t, x: x.clone() });
                }
            }
        }
        Ok(())
    }

    /// Largest `|Y(T, x) − g(x)|` over the sample points.
    pub fn terminal_gap(&self, samples: &[Vec<f64>]) -> Result<f64, ProblemError> {
        let mut y = vec![0.0; self.m];
        let mut z = vec![0.0; self.m * self.d];
        let mut g = vec![0.0; self.m];
        let mut worst = 0.0f64;
        for x in samples {
            self.solution_into(self.horizon, x, &mut y, &mut z)?;
            self.terminal(x, &mut g);
            worst = y.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
        Ok(worst)
    }

    /// Errors with [`ProblemError::TerminalMismatch`] if the analytic solution
    /// misses `g` by more than `tol` at any sample.
    pub fn check_terminal(&self, samples: &[Vec<f64>], tol: f64) -> Result<(), ProblemError> {
        let mut y = vec![0.0; self.m];
        let mut z = vec![0.0; self.m * self.d];
        let mut g = vec![0.0; self.m];
        for x in samples {
            self.solution_into(self.horizon, x, &mut y, &mut z)?;
            self.terminal(x, &mut g);
            let gap = y.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if !(gap <= tol) {
                return Err(ProblemError::TerminalMismatch { x: x.clone(), gap });
            }
        }
        Ok(())
    }

    /// Residual of the semilinear PDE `u_t + a·∇u + ½ bbᵀ:∇²u + f(t,x,u,∇u b)`
    /// for `u` = the analytic `Y`, with all derivatives taken by finite
    /// differences. Returns one entry per component of `Y`.
    ///
    /// First derivatives use central differences with step `1e-5`. Second
    /// derivatives use Richardson-extrapolated central differences with step
    /// `1e-3`; a plain `1e-5` second difference would carry rounding noise of
    /// order `ε/1e-10 ≈ 1e-6`.
    pub fn feynman_kac_residual(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let sol = self.analytic.as_ref().ok_or(ProblemError::NoAnalytic)?;
        let (n, m, d) = (self.n, self.m, self.d);
        let u = |t: f64, x: &[f64]| {
            let mut y = vec![0.0; m];
            let mut z = vec![0.0; m * d];
            sol(t, x, &mut y, &mut z);
            y
        };
        let grad = fd_gradient(&u, t, x, n, m);
        let mut ut = vec![0.0; m];
        let step = 1e-5;
        let (up, um) = (u(t + step, x), u(t - step, x));
        for c in 0..m {
            ut[c] = (up[c] - um[c]) / (2.0 * step);
        }
        let hess = fd_hessian(&u, t, x, n, m);

        let y = u(t, x);
        // a coupled b reads z, so z = ∇u·b(y, z) is a fixed point
        let mut b = vec![0.0; n * d];
        let mut z = vec![0.0; m * d];
        for _ in 0..200 {
            self.diffusion(t, x, &y, &z, &mut b);
            let next = grad_times_b(&grad, &b, n, m, d);
            let change = next.iter().zip(&z).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            z = next;
            if change <= 1e-15 {
                break;
            }
        }
        self.diffusion(t, x, &y, &z, &mut b);
        let mut a = vec![0.0; n];
        self.drift(t, x, &y, &z, &mut a);
        let mut f = vec![0.0; m];
        self.driver(t, x, &y, &z, &mut f);

        let mut res = vec![0.0; m];
        for c in 0..m {
            let mut r = ut[c] + f[c];
            for i in 0..n {
                r += a[i] * grad[c * n + i];
                for j in 0..n {
                    let bbt: f64 = (0..d).map(|l| b[i * d + l] * b[j * d + l]).sum();
                    r += 0.5 * bbt * hess[(c * n + i) * n + j];
                }
            }
            res[c] = r;
        }
        Ok(res)
    }

    /// Largest entry of `|Z − ∇Y·b|` at `(t, x)`, with a finite-difference
    /// gradient.
    pub fn z_consistency_gap(&self, t: f64, x: &[f64]) -> Result<f64, ProblemError> {
        let (y, z) = self.solution(t, x).ok_or(ProblemError::NoAnalytic)?;
        let sol = self.analytic.as_ref().ok_or(ProblemError::NoAnalytic)?;
        let (n, m, d) = (self.n, self.m, self.d);
        let u = |t: f64, x: &[f64]| {
            let mut y = vec![0.0; m];
            let mut z = vec![0.0; m * d];
            sol(t, x, &mut y, &mut z);
            y
        };
        let grad = fd_gradient(&u, t, x, n, m);
        let mut b = vec![0.0; n * d];
        self.diffusion(t, x, &y, &z, &mut b);
        let fd_z = grad_times_b(&grad, &b, n, m, d);
        Ok(fd_z.iter().zip(&z).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
    }
}

/// `∂_i u_c` at `grad[c·n + i]`.
fn fd_gradient(u: &impl Fn(f64, &[f64]) -> Vec<f64>, t: f64, x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let step = 1e-5;
    let mut grad = vec![0.0; m * n];
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + step;
        let up = u(t, &xp);
        xp[i] = x[i] - step;
        let um = u(t, &xp);
        xp[i] = x[i];
        for c in 0..m {
            grad[c * n + i] = (up[c] - um[c]) / (2.0 * step);
        }
    }
    grad
}

/// `∂_i ∂_j u_c` at `hess[(c·n + i)·n + j]`.
fn fd_hessian(u: &impl Fn(f64, &[f64]) -> Vec<f64>, t: f64, x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let second = |i: usize, j: usize, s: f64| -> Vec<f64> {
        let eval = |di: f64, dj: f64| {
            let mut xp = x.to_vec();
            xp[i] += di;
            xp[j] += dj;
            u(t, &xp)
        };
        if i == j {
            let (p, c, q) = (eval(s, 0.0), u(t, x), eval(-s, 0.0));
            (0..m).map(|k| (p[k] - 2.0 * c[k] + q[k]) / (s * s)).collect()
        } else {
            let (pp, pm, mp, mm) = (eval(s, s), eval(s, -s), eval(-s, s), eval(-s, -s));
            (0..m).map(|k| (pp[k] - pm[k] - mp[k] + mm[k]) / (4.0 * s * s)).collect()
        }
    };
    let step = 1e-3;
    let mut hess = vec![0.0; m * n * n];
    for i in 0..n {
        for j in i..n {
            let fine = second(i, j, step);
            let coarse = second(i, j, 2.0 * step);
            for c in 0..m {
                let v = (4.0 * fine[c] - coarse[c]) / 3.0;
                hess[(c * n + i) * n + j] = v;
                hess[(c * n + j) * n + i] = v;
            }
        }
    }
    hess
}

fn grad_times_b(grad: &[f64], b: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
    let mut z = vec![0.0; m * d];
    for c in 0..m {
        for l in 0..d {
            z[c * d + l] = (0..n).map(|i| grad[c * n + i] * b[i * d + l]).sum();
        }
    }
    z
}

/// Scalar decoupled example with a logistic solution.
pub fn example1() -> FbsdeProblem {
    // 1/(1+e^{-s}) stays finite for every s, unlike e^s/(1+e^s)
    let logistic = |s: f64| 1.0 / (1.0 + (-s).exp());
    let a: CoefficientFn = Arc::new(|t, x, _, _, out| out[0] = 1.0 / (1.0 + 2.0 * (t + x[0]).exp()));
    let b: CoefficientFn = Arc::new(move |t, x, _, _, out| out[0] = logistic(t + x[0]));
    let f: CoefficientFn = Arc::new(|t, x, y, z, out| {
        let e = (t + x[0]).exp();
        let (y, z) = (y[0], z[0]);
        out[0] = -2.0 * y / (1.0 + 2.0 * e) - 0.5 * (y * z / (1.0 + e) - y * y * z);
    });
    let g: TerminalFn = Arc::new(move |x, out| out[0] = logistic(1.0 + x[0]));
    let sol: SolutionFn = Arc::new(move |t, x, y, z| {
        let s = t + x[0];
        y[0] = logistic(s);
        // e^{2s}/(1+e^s)^3 = σ(s)²σ(-s)
        z[0] = y[0] * y[0] * logistic(-s);
    });
    FbsdeProblem::new("example1", Dimensions { n: 1, m: 1, d: 1 }, 1.0, vec![1.0], false, a, b, f, g)
        .expect("example1 is well formed")
        .with_analytic(sol)
}

/// Scalar coupled example; the diffusion reads `y` and `z`.
///
/// The diffusion is `½ cos(t+x)·(y sin(t+x) + z + 1)`, the grouping under
/// which the analytic solution satisfies the PDE.
pub fn example2() -> FbsdeProblem {
    let a: CoefficientFn = Arc::new(|t, x, y, z, out| {
        let s = t + x[0];
        out[0] = -0.5 * s.sin() * s.cos() * (y[0] * y[0] + z[0]);
    });
    let b: CoefficientFn = Arc::new(|t, x, y, z, out| {
        let s = t + x[0];
        out[0] = 0.5 * s.cos() * (y[0] * s.sin() + z[0] + 1.0);
    });
    let f: CoefficientFn = Arc::new(|t, x, y, z, out| out[0] = y[0] * z[0] - (t + x[0]).cos());
    let g: TerminalFn = Arc::new(|x, out| out[0] = (1.0 + x[0]).sin());
    let sol: SolutionFn = Arc::new(|t, x, y, z| {
        let s = t + x[0];
        y[0] = s.sin();
        z[0] = s.cos().powi(2);
    });
    FbsdeProblem::new("example2", Dimensions { n: 1, m: 1, d: 1 }, 1.0, vec![1.5], true, a, b, f, g)
        .expect("example2 is well formed")
        .with_analytic(sol)
}

/// Two-dimensional decoupled example driven by one scalar Brownian motion.
///
/// The diffusion of `X¹` is `½ cos²(t+x²)` and that of `X²` is
/// `½ cos²(t+x¹)`; this is the assignment under which the stated `Z` equals
/// `∇Y·b` and the analytic solution satisfies the PDE.
pub fn example3() -> FbsdeProblem {
    let a: CoefficientFn = Arc::new(|t, x, _, _, out| {
        out[0] = 0.5 * (t + x[0]).sin().powi(2);
        out[1] = 0.5 * (t + x[1]).sin().powi(2);
    });
    let b: CoefficientFn = Arc::new(|t, x, _, _, out| {
        out[0] = 0.5 * (t + x[1]).cos().powi(2);
        out[1] = 0.5 * (t + x[0]).cos().powi(2);
    });
    let f: CoefficientFn = Arc::new(|t, x, y, z, out| {
        let (s1, c1) = (t + x[0]).sin_cos();
        let (s2, c2) = (t + x[1]).sin_cos();
        let q = 0.25 * c2.powi(4) + 0.25 * c1.powi(4);
        out[0] = -1.5 * c1 * s2 - 1.5 * s1 * c2 - z[1] + 0.5 * y[0] * q - 0.25 * y[1].powi(3);
        out[1] = 1.5 * s1 * c2 + 1.5 * c1 * s2 - z[0] + 0.5 * y[1] * q - 0.25 * y[0] * y[1] * y[1];
    });
    let g: TerminalFn = Arc::new(|x, out| {
        out[0] = (1.0 + x[0]).sin() * (1.0 + x[1]).sin();
        out[1] = (1.0 + x[0]).cos() * (1.0 + x[1]).cos();
    });
    let sol: SolutionFn = Arc::new(|t, x, y, z| {
        let (s1, c1) = (t + x[0]).sin_cos();
        let (s2, c2) = (t + x[1]).sin_cos();
        y[0] = s1 * s2;
        y[1] = c1 * c2;
        z[0] = 0.5 * c1 * s2 * c2 * c2 + 0.5 * s1 * c2 * c1 * c1;
        z[1] = -0.5 * s1 * c2.powi(3) - 0.5 * c1.powi(3) * s2;
    });
    FbsdeProblem::new("example3", Dimensions { n: 2, m: 2, d: 1 }, 1.0, vec![0.0, 0.0], false, a, b, f, g)
        .expect("example3 is well formed")
        .with_analytic(sol)
}

/// Built-in problem by name.
pub fn problem_by_name(name: &str) -> Result<FbsdeProblem, ProblemError> {
    match name {
        "example1" => Ok(example1()),
        "example2" => Ok(example2()),
        "example3" => Ok(example3()),
        other => Err(ProblemError::UnknownProblem(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_points(n: usize, count: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        (0..count)
            .map(|_| (rng.gen_range(0.0..1.0), (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect()))
            .collect()
    }

    #[test]
    fn closed_form_values() {
        let (y, _) = example1().solution(0.0, &[1.0]).unwrap();
        assert!((y[0] - 0.7310585786300049).abs() < 1e-15);

        let (y, z) = example2().solution(0.0, &[1.5]).unwrap();
        assert!((y[0] - 0.9974949866040544).abs() < 1e-15);
        assert!((z[0] - 0.005003751699777271).abs() < 1e-15);

        let (y, z) = example3().solution(0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![0.0, 1.0]);
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn coupling_flags() {
        assert!(!example1().is_coupled());
        assert!(example2().is_coupled());
        assert!(!example3().is_coupled());
    }

    #[test]
    fn decoupled_spot_check() {
        for p in [example1(), example3()] {
            p.check_decoupled(&random_points(p.n(), 20, 1)).unwrap();
        }
        // a problem that reads y while claiming to be decoupled is caught
        let base = example2();
        let liar = FbsdeProblem::new(
            "liar",
            base.dims(),
            1.0,
            vec![0.0],
            false,
            base.a.clone(),
            base.b.clone(),
            base.f.clone(),
            base.g.clone(),
        )
        .unwrap();
        assert!(matches!(
            liar.check_decoupled(&random_points(1, 5, 2)),
            Err(ProblemError::CouplingMismatch { .. })
        ));
    }

    #[test]
    fn terminal_consistency() {
        for p in [example1(), example2(), example3()] {
            let xs: Vec<Vec<f64>> = random_points(p.n(), 100, 3).into_iter().map(|(_, x)| x).collect();
            assert!(p.terminal_gap(&xs).unwrap() < 1e-12, "{}", p.name());
            p.check_terminal(&xs, 1e-12).unwrap();
        }
    }

    #[test]
    fn feynman_kac_residuals_vanish() {
        for p in [example1(), example2(), example3()] {
            for (t, x) in random_points(p.n(), 200, 4) {
                let res = p.feynman_kac_residual(t, &x).unwrap();
                for r in res {
                    assert!(r.abs() < 2e-8, "{} t={t} x={x:?} residual={r:e}", p.name());
                }
            }
        }
    }

    #[test]
    fn z_matches_gradient_times_diffusion() {
        for p in [example1(), example2(), example3()] {
            for (t, x) in random_points(p.n(), 50, 5) {
                assert!(p.z_consistency_gap(t, &x).unwrap() < 2e-8, "{}", p.name());
            }
        }
    }

    #[test]
    fn residual_detects_a_wrong_reading() {
        // the sum grouping of example 2's diffusion is not a solution
        let base = example2();
        let sum_reading: CoefficientFn = Arc::new(|t, x, y, z, out| {
            let s = t + x[0];
            out[0] = 0.5 * s.cos() + (y[0] * s.sin() + z[0] + 1.0);
        });
        let wrong = FbsdeProblem::new(
            "sum",
            base.dims(),
            1.0,
            vec![1.5],
            true,
            base.a.clone(),
            sum_reading,
            base.f.clone(),
            base.g.clone(),
        )
        .unwrap()
        .with_analytic(base.analytic.clone().unwrap());
        let worst = random_points(1, 20, 6)
            .into_iter()
            .map(|(t, x)| wrong.feynman_kac_residual(t, &x).unwrap()[0].abs())
            .fold(0.0, f64::max);
        assert!(worst > 1e-2);
    }

    #[test]
    fn registry() {
        for name in PROBLEM_NAMES {
            assert_eq!(problem_by_name(name).unwrap().name(), name);
        }
        assert_eq!(problem_by_name("example4").unwrap_err(), ProblemError::UnknownProblem("example4".into()));
    }

    #[test]
    fn constructor_validation() {
        let p = example1();
        let mk = |dims, horizon, x0| {
            FbsdeProblem::new("x", dims, horizon, x0, false, p.a.clone(), p.b.clone(), p.f.clone(), p.g.clone())
        };
        assert!(matches!(mk(Dimensions { n: 0, m: 1, d: 1 }, 1.0, vec![]), Err(ProblemError::InvalidDimensions { .. })));
        assert!(matches!(
            mk(Dimensions { n: 1, m: 1, d: 1 }, 1.0, vec![0.0, 1.0]),
            Err(ProblemError::InitialPointMismatch { .. })
        ));
        assert_eq!(mk(Dimensions { n: 1, m: 1, d: 1 }, -1.0, vec![0.0]).unwrap_err(), ProblemError::InvalidHorizon(-1.0));
        assert_eq!(mk(Dimensions { n: 1, m: 1, d: 1 }, 1.0, vec![0.0]).unwrap().solution(0.0, &[0.0]), None);
    }

    #[test]
    fn example1_is_finite_far_from_the_origin() {
        let p = example1();
        for x in [-800.0, -400.0, 400.0, 800.0] {
            let (y, z) = p.solution(0.5, &[x]).unwrap();
            assert!(y[0].is_finite() && z[0].is_finite(), "x={x}");
            let mut out = [0.0];
            p.driver(0.5, &[x], &y, &z, &mut out);
            assert!(out[0].is_finite());
        }
    }
}

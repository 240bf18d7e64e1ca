//! Convergence sweeps over `(k, N_T)` with errors against the analytic
//! solution at `(0, x0)`, fitted rates, and csv/md/json reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbsde::{problem_by_name, FbsdeProblem, ProblemError};
use crate::stability::stability_report;
use crate::stepper::{solve_with, Diagnostics, InitMode, SolveOptions, SolverConfig, SolverError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("convergence rate undefined: {0}")]
    Undefined(&'static str),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot serialize report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Md,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "md" => Ok(Self::Md),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown format {other:?}; expected csv, md or json")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub problem: String,
    pub ks: Vec<usize>,
    pub n_steps: Vec<usize>,
    pub m_comb: usize,
    pub r: usize,
    pub h: Option<f64>,
    pub gh_points: usize,
    pub init_mode: InitMode,
    pub epsilon0: f64,
    pub domain_sigma: f64,
    /// Solves per cell; the reported runtime is their median.
    pub repetitions: usize,
    pub format: ReportFormat,
    /// Cells still running past this many seconds are reported as skipped.
    pub budget_seconds: Option<f64>,
    pub parallel_cells: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let solver = SolverConfig::default();
        Self {
            problem: "example1".into(),
            ks: vec![3],
            n_steps: vec![16, 20, 24, 28, 32],
            m_comb: solver.m_comb,
            r: solver.r,
            h: None,
            gh_points: solver.gh_points,
            init_mode: InitMode::Exact,
            epsilon0: solver.epsilon0,
            domain_sigma: solver.domain_sigma,
            repetitions: 1,
            format: ReportFormat::Md,
            budget_seconds: None,
            parallel_cells: false,
        }
    }
}

impl ExperimentSpec {
    pub fn solver_config(&self, k: usize, n_steps: usize) -> SolverConfig {
        SolverConfig {
            k,
            m_comb: self.m_comb,
            n_steps,
            r: self.r,
            h: self.h,
            gh_points: self.gh_points,
            init_mode: self.init_mode,
            epsilon0: self.epsilon0,
            domain_sigma: self.domain_sigma,
            ..SolverConfig::default()
        }
    }

    fn validate(&self, problem: &FbsdeProblem) -> Result<(), BenchError> {
        if self.ks.is_empty() || self.n_steps.is_empty() {
            return Err(BenchError::InvalidSpec("k and N_T lists must be non-empty".into()));
        }
        if self.repetitions == 0 {
            return Err(BenchError::InvalidSpec("repetitions must be positive".into()));
        }
        if !problem.has_analytic() {
            return Err(BenchError::InvalidSpec(format!("{} has no analytic solution to measure errors against", problem.name())));
        }
        for &k in &self.ks {
            for &nt in &self.n_steps {
                if nt < k + self.m_comb - 1 {
                    return Err(BenchError::InvalidSpec(format!("N_T = {nt} is too small for k = {k}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Ok {
        y0: Vec<f64>,
        z0: Vec<f64>,
        /// `|Y⁰ - Y₀|` per component.
        y_errors: Vec<f64>,
        /// `|Z⁰ - Z₀|` per row-major component.
        z_errors: Vec<f64>,
        wall_seconds: f64,
        diagnostics: Box<Diagnostics>,
    },
    Failed {
        message: String,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub k: usize,
    pub n_steps: usize,
    pub outcome: CellOutcome,
}

impl Cell {
    /// Error values in metric order (`Y` components, then `Z`).
    pub fn errors(&self) -> Option<Vec<f64>> {
        match &self.outcome {
            CellOutcome::Ok { y_errors, z_errors, .. } => Some(y_errors.iter().chain(z_errors).copied().collect()),
            _ => None,
        }
    }

    pub fn wall_seconds(&self) -> Option<f64> {
        match &self.outcome {
            CellOutcome::Ok { wall_seconds, .. } => Some(*wall_seconds),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub metric: String,
    /// Least-squares slope of `ln err` against `ln(1/N_T)`.
    pub least_squares: Option<f64>,
    /// Slope between the smallest and largest `N_T`.
    pub endpoints: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    pub max_modulus: Option<f64>,
    pub stable: Option<bool>,
    pub rates: Vec<RateFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub metrics: Vec<String>,
    pub cells: Vec<Cell>,
    pub summaries: Vec<KSummary>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| !matches!(c.outcome, CellOutcome::Ok { .. })).count()
    }

    pub fn cell(&self, k: usize, n_steps: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.k == k && c.n_steps == n_steps)
    }

    pub fn rate(&self, k: usize, metric: &str) -> Option<f64> {
        let summary = self.summaries.iter().find(|s| s.k == k)?;
        summary.rates.iter().find(|r| r.metric == metric)?.least_squares
    }
}

/// `Y`, `Y1`, `Y2`, ... then `Z`, `Z1`, ... (or `Z1_1` when `m, d > 1`).
pub fn metric_names(m: usize, d: usize) -> Vec<String> {
    let mut names: Vec<String> = if m == 1 { vec!["Y".into()] } else { (1..=m).map(|c| format!("Y{c}")).collect() };
    for c in 1..=m {
        for l in 1..=d {
            names.push(match (m, d) {
                (1, 1) => "Z".into(),
                (_, 1) => format!("Z{c}"),
                (1, _) => format!("Z{l}"),
                _ => format!("Z{c}_{l}"),
            });
        }
    }
    names
}

/// Least-squares slope of `ln err` against `ln(1/N_T)`.
pub fn fit_convergence_rate(pairs: &[(usize, f64)]) -> Result<f64, BenchError> {
    if pairs.len() < 2 {
        return Err(BenchError::Undefined("needs at least two points"));
    }
    if pairs.iter().any(|&(n, e)| n == 0 || !(e > 0.0 && e.is_finite())) {
        return Err(BenchError::Undefined("errors must be positive and finite"));
    }
    let xs: Vec<f64> = pairs.iter().map(|&(n, _)| -(n as f64).ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|&(_, e)| e.ln()).collect();
    let count = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / count;
    let my = ys.iter().sum::<f64>() / count;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(BenchError::Undefined("all N_T are equal"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    // report a flat fit as +0.0
    Ok(sxy / sxx + 0.0)
}

/// Slope through the first and last point only.
pub fn endpoint_rate(pairs: &[(usize, f64)]) -> Result<f64, BenchError> {
    match (pairs.first(), pairs.last()) {
        (Some(&a), Some(&b)) if pairs.len() >= 2 => fit_convergence_rate(&[a, b]),
        _ => Err(BenchError::Undefined("needs at least two points")),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_cell(spec: &ExperimentSpec, problem: &FbsdeProblem, k: usize, n_steps: usize) -> Cell {
    let cfg = spec.solver_config(k, n_steps);
    let (exact_y, exact_z) = problem.solution(0.0, problem.x0()).expect("checked by validate");
    let mut times = Vec::with_capacity(spec.repetitions);
    let mut first = None;
    for _ in 0..spec.repetitions {
        let opts = SolveOptions { deadline: spec.budget_seconds.map(|s| Instant::now() + Duration::from_secs_f64(s)) };
        let started = Instant::now();
        match solve_with(&cfg, problem, opts) {
            Ok(sol) => {
                times.push(started.elapsed().as_secs_f64());
                first.get_or_insert(sol);
            }
            Err(SolverError::BudgetExceeded { elapsed, time_index }) => {
                let reason = format!("over the {:.0} s budget after {elapsed:.1} s (level {time_index})", spec.budget_seconds.unwrap_or(0.0));
                return Cell { k, n_steps, outcome: CellOutcome::Skipped { reason } };
            }
            Err(e) => return Cell { k, n_steps, outcome: CellOutcome::Failed { message: e.to_string() } },
        }
    }
    let sol = first.expect("repetitions is positive");
    let abs_err = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>();
    let y_errors = abs_err(&sol.y0, &exact_y);
    let z_errors = abs_err(&sol.z0, &exact_z);
    if y_errors.iter().chain(&z_errors).any(|e| !e.is_finite()) {
        return Cell { k, n_steps, outcome: CellOutcome::Failed { message: "non-finite error".into() } };
    }
    Cell {
        k,
        n_steps,
        outcome: CellOutcome::Ok {
            y_errors,
            z_errors,
            y0: sol.y0,
            z0: sol.z0,
            wall_seconds: median(times),
            diagnostics: Box::new(sol.diagnostics),
        },
    }
}

/// Runs every `(k, N_T)` cell. Cell failures are recorded, not propagated.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, BenchError> {
    let problem = problem_by_name(&spec.problem)?;
    spec.validate(&problem)?;
    let metrics = metric_names(problem.m(), problem.d());
    let mut warnings = Vec::new();
    let mut summaries = Vec::new();
    let pairs: Vec<(usize, usize)> = spec.ks.iter().flat_map(|&k| spec.n_steps.iter().map(move |&n| (k, n))).collect();
    let cells: Vec<Cell> = if spec.parallel_cells {
        pairs.par_iter().map(|&(k, n)| run_cell(spec, &problem, k, n)).collect()
    } else {
        pairs.iter().map(|&(k, n)| run_cell(spec, &problem, k, n)).collect()
    };
    for &k in &spec.ks {
        let (max_modulus, stable) = match stability_report(k, spec.m_comb) {
            Ok(rep) => {
                if !rep.is_stable {
                    warnings.push(format!(
                        "k = {k}, m = {} is not zero-stable (max root modulus {:.4}); errors may grow",
                        spec.m_comb, rep.max_modulus_excl_one
                    ));
                }
                (Some(rep.max_modulus_excl_one), Some(rep.is_stable))
            }
            Err(e) => {
                warnings.push(format!("stability check for k = {k} failed: {e}"));
                (None, None)
            }
        };
        let rows: Vec<(usize, Vec<f64>)> =
            cells.iter().filter(|c| c.k == k).filter_map(|c| c.errors().map(|e| (c.n_steps, e))).collect();
        let rates = metrics
            .iter()
            .enumerate()
            .map(|(i, metric)| {
                let mut pts: Vec<(usize, f64)> = rows.iter().map(|(n, e)| (*n, e[i])).collect();
                pts.sort_by_key(|p| p.0);
                RateFit {
                    metric: metric.clone(),
                    least_squares: fit_convergence_rate(&pts).ok(),
                    endpoints: endpoint_rate(&pts).ok(),
                }
            })
            .collect();
        summaries.push(KSummary { k, max_modulus, stable, rates });
    }
    Ok(ExperimentReport { spec: spec.clone(), metrics, cells, summaries, warnings })
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

/// Report text in the requested format.
pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> Result<String, BenchError> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => Ok(render_csv(report)),
        ReportFormat::Md => Ok(render_md(report)),
    }
}

fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("problem,k,n_steps,metric,value,status\n");
    for cell in &report.cells {
        let prefix = format!("{},{},{}", report.spec.problem, cell.k, cell.n_steps);
        match (&cell.outcome, cell.errors()) {
            (CellOutcome::Ok { wall_seconds, .. }, Some(errors)) => {
                for (metric, e) in report.metrics.iter().zip(errors) {
                    let _ = writeln!(out, "{prefix},{metric},{e:e},ok");
                }
                let _ = writeln!(out, "{prefix},seconds,{wall_seconds},ok");
            }
            (CellOutcome::Skipped { .. }, _) => {
                let _ = writeln!(out, "{prefix},,,skipped");
            }
            _ => {
                let _ = writeln!(out, "{prefix},,,failed");
            }
        }
    }
    out
}

fn render_md(report: &ExperimentReport) -> String {
    let mut out = format!("# {}\n", report.spec.problem);
    let mut nts = report.spec.n_steps.clone();
    nts.sort_unstable();
    nts.dedup();
    for summary in &report.summaries {
        let _ = write!(out, "\n## k = {}\n\n| |", summary.k);
        for n in &nts {
            let _ = write!(out, " N_T={n} |");
        }
        out.push_str(" CR |\n|---|");
        out.push_str(&"---|".repeat(nts.len() + 1));
        out.push('\n');
        let cells: Vec<Option<&Cell>> = nts.iter().map(|&n| report.cell(summary.k, n)).collect();
        for (i, metric) in report.metrics.iter().enumerate() {
            let _ = write!(out, "| {metric} |");
            for cell in &cells {
                let text = match cell {
                    Some(c) => match (&c.outcome, c.errors()) {
                        (_, Some(e)) => sci(e[i]),
                        (CellOutcome::Skipped { .. }, _) => "skipped".into(),
                        _ => "failed".into(),
                    },
                    None => String::new(),
                };
                let _ = write!(out, " {text} |");
            }
            let cr = summary.rates[i].least_squares.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(out, " {cr} |");
        }
        out.push_str("| RT (s) |");
        for cell in &cells {
            let text = cell.and_then(Cell::wall_seconds).map_or_else(String::new, |s| format!("{s:.3}"));
            let _ = write!(out, " {text} |");
        }
        out.push_str(" |\n");
    }
    let problems: Vec<String> = report
        .cells
        .iter()
        .filter_map(|c| match &c.outcome {
            CellOutcome::Failed { message } => Some(format!("k={}, N_T={}: failed: {message}", c.k, c.n_steps)),
            CellOutcome::Skipped { reason } => Some(format!("k={}, N_T={}: skipped: {reason}", c.k, c.n_steps)),
            CellOutcome::Ok { .. } => None,
        })
        .chain(report.warnings.iter().cloned())
        .collect();
    if !problems.is_empty() {
        out.push_str("\n## Notes\n\n");
        for p in problems {
            let _ = writeln!(out, "- {p}");
        }
    }
    out
}

/// Writes the report to `path`.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<(), BenchError> {
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })
}

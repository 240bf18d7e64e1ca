use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fbsde_core::bench::{emit_report, render_report, run_experiment, ExperimentSpec, ReportFormat};
use fbsde_core::fdweights::{solve_weights, weights_as_float};
use fbsde_core::hermite::gauss_hermite;
use fbsde_core::stability::stability_report;
use fbsde_core::stepper::InitMode;

#[derive(Parser)]
#[command(name = "fbsde-bench", version, about = "Convergence sweeps and coefficient tables for the combined multi-step FBSDE scheme")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep (k, N_T) on a test problem and report errors and convergence rates.
    Run(RunArgs),
    /// Print the exact scaled weights of a (k, m) rule.
    Weights {
        #[arg(long, value_delimiter = ',', default_value = "3")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        m: usize,
        /// Also print binary64 values.
        #[arg(long)]
        float: bool,
    },
    /// Print root moduli and zero-stability verdicts.
    Stability {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8,9,10")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
    },
    /// Print Gauss-Hermite nodes and weights for the weight e^{-x^2}.
    Quadrature {
        #[arg(long, default_value_t = 16)]
        points: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    nt: Option<Vec<usize>>,
    #[arg(long)]
    m_comb: Option<usize>,
    /// Interpolation degree.
    #[arg(long)]
    r: Option<usize>,
    /// Mesh width; derived from the time step when absent.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    gh_points: Option<usize>,
    #[arg(long)]
    init: Option<InitMode>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    budget_seconds: Option<f64>,
    #[arg(long)]
    parallel_cells: bool,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentSpec::default(),
        };
        if let Some(v) = &self.problem {
            spec.problem = v.clone();
        }
        if let Some(v) = &self.k {
            spec.ks = v.clone();
        }
        if let Some(v) = &self.nt {
            spec.n_steps = v.clone();
        }
        if let Some(v) = self.m_comb {
            spec.m_comb = v;
        }
        if let Some(v) = self.r {
            spec.r = v;
        }
        if self.h.is_some() {
            spec.h = self.h;
        }
        if let Some(v) = self.gh_points {
            spec.gh_points = v;
        }
        if let Some(v) = self.init {
            spec.init_mode = v;
        }
        if let Some(v) = self.repetitions {
            spec.repetitions = v;
        }
        if let Some(v) = self.format {
            spec.format = v;
        }
        if self.budget_seconds.is_some() {
            spec.budget_seconds = self.budget_seconds;
        }
        spec.parallel_cells |= self.parallel_cells;
        Ok(spec)
    }
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let spec = args.spec()?;
    let report = run_experiment(&spec)?;
    match &args.out {
        Some(path) => emit_report(&report, spec.format, path)?,
        None => print!("{}", render_report(&report, spec.format)?),
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let failed = report.failed_cells();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed or were skipped", report.cells.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn weights(ks: &[usize], m: usize, float: bool) -> Result<()> {
    for &k in ks {
        let w = solve_weights(k, m)?;
        println!("k={k} m={m}: {}", w.to_fraction_strings().join(" "));
        if float {
            let f: Vec<String> = weights_as_float(&w)?.iter().map(|v| format!("{v:.17e}")).collect();
            println!("    {}", f.join(" "));
        }
    }
    Ok(())
}

fn stability(ks: &[usize], m: usize, format: ReportFormat) -> Result<()> {
    let reports = ks.iter().map(|&k| stability_report(k, m)).collect::<Result<Vec<_>, _>>()?;
    match format {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&reports)?),
        ReportFormat::Csv => {
            println!("k,m,max_modulus,stable");
            for r in &reports {
                println!("{},{},{:.6},{}", r.k, r.m, r.max_modulus_excl_one, r.is_stable);
            }
        }
        ReportFormat::Md => {
            println!("| k | max modulus | stable |\n|---|---|---|");
            for r in &reports {
                println!("| {} | {:.4} | {} |", r.k, r.max_modulus_excl_one, if r.is_stable { "yes" } else { "no" });
            }
        }
    }
    Ok(())
}

fn quadrature(points: usize) -> Result<()> {
    if points == 0 {
        bail!("need at least one point");
    }
    let rule = gauss_hermite(points)?;
    println!("node,weight");
    for (a, w) in rule.nodes().iter().zip(rule.weights()) {
        println!("{a:.17e},{w:.17e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Weights { k, m, float } => weights(&k, m, float).map(|_| ExitCode::SUCCESS),
        Command::Stability { k, m, format } => stability(&k, m, format).map(|_| ExitCode::SUCCESS),
        Command::Quadrature { points } => quadrature(points).map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}

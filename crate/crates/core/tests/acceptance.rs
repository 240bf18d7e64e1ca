//! Acceptance gate: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fbsde_core::bench::{fit_convergence_rate, run_experiment, ExperimentReport, ExperimentSpec};
use fbsde_core::fbsde::{example1, CoefficientFn, Dimensions, FbsdeProblem, TerminalFn, PROBLEM_NAMES};
use fbsde_core::fbsde::problem_by_name;
use fbsde_core::fdweights::{solve_weights, Rational};
use fbsde_core::hermite::gauss_hermite;
use fbsde_core::lattice::{build_lattice, ValueLevel};
use fbsde_core::stability::{characteristic_polynomial, stability_report};
use fbsde_core::stepper::{
    initialize_levels, level_lattice, solve, solve_all_levels, step_coupled, step_decoupled, Quadrature,
    SchemeCoefficients, SolverConfig, StepContext,
};
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use std::sync::Arc;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

const TWO_POINT_WEIGHTS: [&[&str]; 7] = [
    &["-1/2", "1/2"],
    &["-1", "3/2", "-1/2"],
    &["-17/12", "11/4", "-7/4", "5/12"],
    &["-7/4", "49/12", "-15/4", "7/4", "-1/3"],
    &["-121/60", "65/12", "-77/12", "53/12", "-5/3", "4/15"],
    &["-67/30", "403/60", "-29/3", "35/4", "-59/12", "47/30", "-13/60"],
    &["-2027/840", "319/40", "-1613/120", "361/24", "-269/24", "641/120", "-59/40", "151/840"],
];

const FOUR_POINT_WEIGHTS: [&[&str]; 9] = [
    &["-1/4", "1/4"],
    &["-3/4", "5/4", "-1/2"],
    &["-4/3", "3", "-9/4", "7/12"],
    &["-11/6", "5", "-21/4", "31/12", "-1/2"],
    &["-87/40", "161/24", "-26/3", "6", "-53/24", "41/120"],
    &["-19/8", "949/120", "-35/3", "10", "-125/24", "37/24", "-1/5"],
    &["-419/168", "1049/120", "-85/6", "85/6", "-75/8", "97/24", "-31/30", "5/42"],
    &["-145/56", "2661/280", "-101/6", "39/2", "-385/24", "75/8", "-37/10", "37/42", "-2/21"],
    &["-6781/2520", "2917/280", "-4303/210", "841/30", "-3461/120", "887/40", "-367/30", "953/210", "-106/105", "32/315"],
];

fn criterion_1() -> Outcome {
    let mut mismatches = Vec::new();
    for (rows, m) in [(&TWO_POINT_WEIGHTS[..], 2), (&FOUR_POINT_WEIGHTS[..], 4)] {
        for (i, row) in rows.iter().enumerate() {
            let k = i + 1;
            match solve_weights(k, m) {
                Ok(w) if w.to_fraction_strings() == *row => {}
                Ok(w) => mismatches.push(format!("m={m} k={k}: {:?}", w.to_fraction_strings())),
                Err(e) => mismatches.push(format!("m={m} k={k}: {e}")),
            }
        }
    }
    Outcome::new(mismatches.is_empty(), if mismatches.is_empty() { "16 rows bit-exact".into() } else { mismatches.join("; ") })
}

fn criterion_2() -> Outcome {
    let two_point_moduli = [0.5000, 0.5424, 0.6344, 0.7438, 0.8636, 0.9915, 1.1264];
    let four_point_moduli = [0.6667, 0.6614, 0.6875, 0.7104, 0.7224, 0.7376, 0.8134, 0.9931, 1.2286];
    let mut bad = Vec::new();
    let mut check = |m: usize, k: usize, reference: Option<f64>, stable: bool| match stability_report(k, m) {
        Ok(rep) => {
            if let Some(p) = reference {
                let gap = (rep.max_modulus_excl_one - p).abs();
                if gap > 5e-5 {
                    bad.push(format!("m={m} k={k}: {:.6} vs {p} (off {gap:.1e})", rep.max_modulus_excl_one));
                }
            }
            if rep.is_stable != stable {
                bad.push(format!("m={m} k={k}: verdict {}", rep.is_stable));
            }
        }
        Err(e) => bad.push(format!("m={m} k={k}: {e}")),
    };
    for (i, &p) in two_point_moduli.iter().enumerate() {
        check(2, i + 2, Some(p), i + 2 < 8);
    }
    for (i, &p) in four_point_moduli.iter().enumerate() {
        check(4, i + 2, Some(p), i + 2 < 10);
    }
    for k in 2..=9 {
        check(5, k, None, k <= 8);
    }
    Outcome::new(bad.is_empty(), if bad.is_empty() { "all moduli and verdicts match".into() } else { bad.join("; ") })
}

fn criterion_3() -> Outcome {
    let mut worst_moment = 0.0f64;
    let mut worst_norm = 0.0f64;
    for l in 1..=20 {
        let rule = match gauss_hermite(l) {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("L={l}: {e}")),
        };
        let norm = std::f64::consts::PI.sqrt();
        worst_norm = worst_norm.max((rule.weights().iter().sum::<f64>() / norm - 1.0).abs());
        let mut double_factorial = 1.0;
        for q in 1..l {
            // (2q-1)!!
            double_factorial *= (2 * q - 1) as f64;
            let moment = rule.integrate(|a| (std::f64::consts::SQRT_2 * a).powi(2 * q as i32)) / norm;
            worst_moment = worst_moment.max((moment / double_factorial - 1.0).abs());
        }
    }
    Outcome::new(
        worst_moment <= 1e-10 && worst_norm <= 1e-12,
        format!("worst moment rel {worst_moment:.1e}, worst normalization {worst_norm:.1e}"),
    )
}

fn interpolation_error(r: usize, h: f64, f: &dyn Fn(f64) -> f64, queries: &[f64]) -> f64 {
    let lattice = build_lattice(&[0.0], h, &[3.0], r).expect("lattice");
    let level = ValueLevel::from_fn(lattice, 1, 1, 0, |x, y, z| {
        y[0] = f(x[0]);
        z[0] = 0.0;
    })
    .expect("level");
    queries
        .iter()
        .map(|&q| (level.interpolate(&[q], r).expect("inside").0[0] - f(q)).abs())
        .fold(0.0, f64::max)
}

fn criterion_4() -> Outcome {
    let mut rng = rand::rngs::StdRng::seed_from_u64(4);
    let queries: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut pass = true;
    let mut notes = Vec::new();
    for r in [3usize, 5] {
        let coarse = interpolation_error(r, 0.1, &f64::sin, &queries);
        let fine = interpolation_error(r, 0.05, &f64::sin, &queries);
        let order = (coarse / fine).log2();
        pass &= (order - (r + 1) as f64).abs() <= 0.7;
        notes.push(format!("r={r} order {order:.2}"));
        let coeffs: Vec<f64> = (0..=r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let poly = |x: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c);
        let exact = interpolation_error(r, 0.1, &poly, &queries);
        pass &= exact <= 1e-10;
        notes.push(format!("degree-{r} reproduction {exact:.1e}"));
    }
    Outcome::new(pass, notes.join(", "))
}

fn criterion_5() -> Outcome {
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let mut pass = true;
    let mut notes = Vec::new();
    for name in PROBLEM_NAMES {
        let p = problem_by_name(name).expect("registered");
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let t = rng.gen_range(0.0..p.horizon());
            let x: Vec<f64> = p.x0().iter().map(|c| c + rng.gen_range(-2.0..2.0)).collect();
            let res = p.feynman_kac_residual(t, &x).expect("analytic");
            worst = worst.max(res.iter().fold(0.0, |a, v| a.max(v.abs())));
        }
        let samples: Vec<Vec<f64>> =
            (0..200).map(|_| p.x0().iter().map(|c| c + rng.gen_range(-5.0..5.0)).collect()).collect();
        let gap = p.terminal_gap(&samples).expect("analytic");
        pass &= worst < 2e-8 && gap < 1e-12;
        notes.push(format!("{name}: residual {worst:.1e}, terminal {gap:.1e}"));
    }
    Outcome::new(pass, notes.join("; "))
}

/// Checks every cell against a reference row within `factor`, and the fitted
/// rate against `rate_ok`.
fn compare_rows(
    report: &ExperimentReport,
    k: usize,
    rows: &[(&str, &[f64], f64)],
    factor: f64,
    rate_ok: &dyn Fn(f64, f64) -> bool,
    notes: &mut Vec<String>,
) -> bool {
    let mut pass = true;
    let mut nts = report.spec.n_steps.clone();
    nts.sort_unstable();
    for (metric, reference, reference_rate) in rows {
        let idx = report.metrics.iter().position(|m| m == metric).expect("metric");
        let mut worst = 1.0f64;
        for (n, &want) in nts.iter().zip(reference.iter()) {
            match report.cell(k, *n).and_then(|c| c.errors()) {
                Some(e) => {
                    let ratio = if e[idx] > want { e[idx] / want } else { want / e[idx] };
                    worst = worst.max(ratio);
                }
                None => {
                    pass = false;
                    notes.push(format!("k={k} N_T={n} failed"));
                }
            }
        }
        let rate = report.rate(k, metric);
        let rate_pass = rate.is_some_and(|r| rate_ok(r, *reference_rate));
        pass &= worst <= factor && rate_pass;
        notes.push(format!(
            "k={k} {metric}: worst ratio {worst:.2}, CR {} (reference {reference_rate})",
            rate.map_or("n/a".into(), |r| format!("{r:.2}"))
        ));
    }
    pass
}

fn criterion_6() -> Outcome {
    let spec = ExperimentSpec { problem: "example1".into(), ks: vec![3, 4, 5], r: 10, ..Default::default() };
    let report = match run_experiment(&spec) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    type Row<'a> = (&'a str, &'a [f64], f64);
    let table: [(usize, [Row; 2]); 3] = [
        (3, [
            ("Y", &[4.717e-06, 2.613e-06, 1.569e-06, 1.015e-06, 6.905e-07], 2.78),
            ("Z", &[2.547e-05, 1.552e-05, 1.009e-05, 6.889e-06, 4.903e-06], 2.39),
        ]),
        (4, [
            ("Y", &[6.871e-07, 3.152e-07, 1.629e-07, 9.240e-08, 5.618e-08], 3.61),
            ("Z", &[6.879e-06, 3.097e-06, 1.595e-06, 9.027e-07, 5.488e-07], 3.65),
        ]),
        (5, [
            ("Y", &[5.623e-08, 2.077e-08, 9.011e-09, 4.355e-09, 2.343e-09], 4.59),
            ("Z", &[6.522e-07, 2.427e-07, 1.047e-07, 5.016e-08, 2.704e-08], 4.60),
        ]),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (k, rows) in &table {
        pass &= compare_rows(&report, *k, rows, 3.0, &|r, p| (r - p).abs() <= 0.6, &mut notes);
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_7() -> Outcome {
    let spec = ExperimentSpec { problem: "example1".into(), ks: vec![9], r: 20, gh_points: 20, ..Default::default() };
    let report = match run_experiment(&spec) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let errors: Vec<(usize, f64)> =
        report.cells.iter().filter_map(|c| c.errors().map(|e| (c.n_steps, e[0]))).collect();
    let at_32 = errors.iter().find(|(n, _)| *n == 32).map(|e| e.1);
    let rate = fit_convergence_rate(&errors).ok();
    let pass = errors.len() == 5 && at_32.is_some_and(|e| e < 1e-12) && rate.is_some_and(|r| r >= 8.0);
    let listed: Vec<String> = errors.iter().map(|(n, e)| format!("{n}:{e:.2e}")).collect();
    Outcome::new(pass, format!("Y errors {}, CR {}", listed.join(" "), rate.map_or("n/a".into(), |r| format!("{r:.2}"))))
}

fn criterion_8() -> Outcome {
    let spec = ExperimentSpec {
        problem: "example2".into(),
        ks: vec![3],
        n_steps: vec![13, 15, 17, 19, 21],
        r: 10,

        ..Default::default()
    };
    let report = match run_experiment(&spec) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let rows: [(&str, &[f64], f64); 1] = [("Y", &[2.269e-04, 1.398e-04, 9.186e-05, 6.025e-05, 4.336e-05], 3.47)];
    let mut notes = Vec::new();
    let pass = compare_rows(&report, 3, &rows, 5.0, &|r, _| r >= 2.5, &mut notes);
    Outcome::new(pass, notes.join("; "))
}

fn criterion_9() -> Outcome {
    let spec = ExperimentSpec {
        problem: "example3".into(),
        ks: vec![3],
        n_steps: vec![16, 24, 32],
        r: 10,

        ..Default::default()
    };
    let report = match run_experiment(&spec) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let rows: [(&str, &[f64], f64); 4] = [
        ("Y1", &[4.308e-03, 1.495e-03, 6.651e-04], 2.70),
        ("Y2", &[3.896e-03, 1.340e-03, 5.949e-04], 2.71),
        ("Z1", &[3.887e-03, 1.201e-03, 5.110e-04], 2.93),
        ("Z2", &[2.980e-03, 8.465e-04, 3.451e-04], 3.11),
    ];
    let mut notes = Vec::new();
    let pass = compare_rows(&report, 3, &rows, 5.0, &|r, _| r >= 2.2, &mut notes);
    Outcome::new(pass, notes.join("; "))
}

fn constant_problem(c: f64) -> FbsdeProblem {
    let a: CoefficientFn = Arc::new(|_, x, _, _, out| out[0] = 0.3 * x[0].cos());
    let b: CoefficientFn = Arc::new(|t, x, _, _, out| out[0] = 0.6 + 0.2 * (t - x[0]).sin());
    let f: CoefficientFn = Arc::new(|_, _, _, _, out| out[0] = 0.0);
    let g: TerminalFn = Arc::new(move |_, out| out[0] = c);
    FbsdeProblem::new("constant", Dimensions { n: 1, m: 1, d: 1 }, 1.0, vec![0.0], false, a, b, f, g)
        .expect("valid")
        .with_analytic(Arc::new(move |_, _, y, z| {
            y[0] = c;
            z[0] = 0.0;
        }))
}

fn criterion_10() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let cfg = SolverConfig { n_steps: 12, r: 8, gh_points: 12, ..Default::default() };
    let worst = match solve_all_levels(&cfg, &constant_problem(-1.25)) {
        Ok(levels) => levels
            .iter()
            .flat_map(|l| l.y().iter().map(|v| (v + 1.25).abs()).chain(l.z().iter().map(|v| v.abs())))
            .fold(0.0, f64::max),
        Err(e) => {
            notes.push(format!("constant problem: {e}"));
            f64::INFINITY
        }
    };
    pass &= worst <= 1e-12;
    notes.push(format!("constant preservation {worst:.1e}"));

    let mut zero_sum = true;
    for k in 1..=9 {
        for m in [2, 4] {
            let poly = characteristic_polynomial(&solve_weights(k, m).expect("weights"));
            zero_sum &= poly.coeffs.iter().fold(Rational::zero(), |a, c| a + c).is_zero();
        }
    }
    pass &= zero_sum;
    notes.push(format!("zero-sum {}", if zero_sum { "exact" } else { "broken" }));

    let p = example1();
    let cfg = SolverConfig { n_steps: 16, ..Default::default() };
    let gap = (|| -> Result<f64, Box<dyn std::error::Error>> {
        let window = initialize_levels(&cfg, &p)?;
        let n = cfg.n_steps - cfg.window();
        let lattice = level_lattice(&cfg, &p, n)?;
        let quad = Quadrature::new(p.d(), cfg.gh_points)?;
        let coeffs = SchemeCoefficients::new(cfg.k, cfg.m_comb)?;
        let dt = cfg.dt(&p);
        let ctx = StepContext {
            problem: &p,
            quad: &quad,
            coeffs: &coeffs,
            window: &window,
            dt,
            r: cfg.r,
            time_index: n,
            t: n as f64 * dt,
            picard_tol: cfg.picard_tol,
            picard_max: cfg.picard_max,
            epsilon0: cfg.epsilon0,
            outer_max: cfg.outer_max,
        };
        let (a, _) = step_decoupled(&ctx, &lattice)?;
        let (b, _) = step_coupled(&ctx, &lattice)?;
        Ok(a.y().iter().zip(b.y()).chain(a.z().iter().zip(b.z())).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max))
    })();
    match gap {
        Ok(g) => {
            pass &= g <= cfg.epsilon0;
            notes.push(format!("coupled/decoupled gap {g:.1e}"));
        }
        Err(e) => {
            pass = false;
            notes.push(format!("coupled/decoupled: {e}"));
        }
    }

    let same = match (solve(&cfg, &p), solve(&cfg, &p)) {
        (Ok(a), Ok(b)) => a.y0 == b.y0 && a.z0 == b.z0,
        _ => false,
    };
    pass &= same;
    notes.push(format!("repeat runs {}", if same { "bit-identical" } else { "differ" }));
    Outcome::new(pass, notes.join(", "))
}

fn main() -> ExitCode {
    let criteria: [(fn() -> Outcome, Duration); 10] = [
        (criterion_1, Duration::from_secs(1)),
        (criterion_2, Duration::from_secs(1)),
        (criterion_3, Duration::from_secs(1)),
        (criterion_4, Duration::from_secs(5)),
        (criterion_5, Duration::from_secs(5)),
        (criterion_6, Duration::from_secs(600)),
        (criterion_7, Duration::from_secs(900)),
        (criterion_8, Duration::from_secs(900)),
        (criterion_9, Duration::from_secs(3600)),
        (criterion_10, Duration::from_secs(120)),
    ];
    let mut failures = 0;
    for (i, (run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let pass = outcome.pass && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {:>2}: {} ({:.2} s of {} s) {}{}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            outcome.detail,
            if in_time { "" } else { " [over time budget]" }
        );
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

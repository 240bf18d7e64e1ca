use std::sync::Arc;

use fbsde_core::bench::fit_convergence_rate;
use fbsde_core::fbsde::{CoefficientFn, Dimensions, FbsdeProblem, TerminalFn};
use fbsde_core::fdweights::Rational;
use fbsde_core::stepper::{solve, solve_all_levels, SchemeCoefficients, SolverConfig};
use num_traits::Zero;
use proptest::prelude::*;

/// `f ≡ 0`, `g ≡ c` with state-dependent drift and diffusion.
fn constant_problem(c: f64, drift: f64, vol: f64, coupled: bool) -> FbsdeProblem {
    let a: CoefficientFn = Arc::new(move |_, x, y, _, out| out[0] = drift * x[0].sin() + 0.1 * y[0].tanh());
    let b: CoefficientFn = Arc::new(move |t, x, _, z, out| out[0] = vol * (1.0 + 0.3 * (t + x[0]).cos()) + 0.01 * z[0]);
    let f: CoefficientFn = Arc::new(|_, _, _, _, out| out[0] = 0.0);
    let g: TerminalFn = Arc::new(move |_, out| out[0] = c);
    FbsdeProblem::new("constant", Dimensions { n: 1, m: 1, d: 1 }, 1.0, vec![0.0], coupled, a, b, f, g)
        .unwrap()
        .with_analytic(Arc::new(move |_, _, y, z| {
            y[0] = c;
            z[0] = 0.0;
        }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constants_are_fixed_points(
        c in -5.0f64..5.0,
        drift in -1.0f64..1.0,
        vol in 0.1f64..1.0,
        k in 3usize..=5,
        coupled in any::<bool>(),
    ) {
        let p = constant_problem(c, drift, vol, coupled);
        let cfg = SolverConfig { k, n_steps: k + 5, r: 6, gh_points: 8, ..Default::default() };
        for level in solve_all_levels(&cfg, &p).unwrap() {
            for y in level.y() {
                prop_assert!((y - c).abs() <= 1e-12 * c.abs().max(1.0));
            }
            for z in level.z() {
                prop_assert!(z.abs() <= 1e-12 * c.abs().max(1.0));
            }
        }
    }

    #[test]
    fn scheme_coefficients_sum_to_zero(k in 1usize..=9, m in 1usize..=6) {
        let c = SchemeCoefficients::new(k, m).unwrap();
        prop_assert_eq!(c.window(), k + m - 1);
        prop_assert!(c.exact().iter().fold(Rational::zero(), |a, v| a + v).is_zero());
        // first moment of the window sums is one: Σ j c_j = 1
        let first = c.exact().iter().enumerate().fold(Rational::zero(), |a, (j, v)| a + v * Rational::from_integer((j as i64).into()));
        prop_assert_eq!(first, Rational::from_integer(1.into()));
    }

    #[test]
    fn power_laws_are_fitted_exactly(rate in 0.5f64..10.0, scale in 1e-8f64..1.0, n0 in 4usize..20) {
        let pts: Vec<(usize, f64)> = (0..5).map(|i| {
            let n = n0 + 4 * i;
            (n, scale * (n as f64).powf(-rate))
        }).collect();
        prop_assert!((fit_convergence_rate(&pts).unwrap() - rate).abs() < 1e-9);
    }
}

#[test]
fn repeated_solves_are_bit_identical() {
    let p = constant_problem(0.0, 0.5, 0.5, true);
    let cfg = SolverConfig { n_steps: 10, r: 6, ..Default::default() };
    let a = solve(&cfg, &p).unwrap();
    let b = solve(&cfg, &p).unwrap();
    assert_eq!(a.y0, b.y0);
    assert_eq!(a.z0, b.z0);
}

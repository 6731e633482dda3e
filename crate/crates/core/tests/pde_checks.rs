use obliq_core::lattice::Branching;
use obliq_core::pde::*;
use obliq_core::*;

fn quadratic() -> Problem {
    serde_json::from_str::<ProblemSpec>(
        r#"{
        "costs": [[0, 0.005], [0.005, 0]],
        "generator": {"kind": "running_cost",
                      "cost": [{"kind": "quadratic", "center": 0.9}, {"kind": "quadratic", "center": 1.1}],
                      "drift": [[-0.1], [0.1]]},
        "terminal": {"kind": "constant", "values": [0, 0]},
        "state": {"kind": "geometric", "x0": [1.0], "drift": [0.0], "vol": [0.2]},
        "horizon": 1.0 }"#,
    )
    .unwrap()
    .build()
    .unwrap()
}

fn linear(intercept: f64) -> Problem {
    serde_json::from_str::<ProblemSpec>(&format!(
        r#"{{
        "costs": [[0, 0.2], [0.2, 0]],
        "generator": {{"kind": "linear", "a": [-0.1, -0.1], "b": [[0.3], [-0.3]], "c": [1.0, -0.5]}},
        "terminal": {{"kind": "affine", "slope": [1, 1], "intercept": [{intercept}, 0]}},
        "horizon": 1.0 }}"#
    ))
    .unwrap()
    .build()
    .unwrap()
}

fn near(center: f64, half: f64) -> Vec<(f64, f64)> {
    (0..5).map(|k| (0.0, center + half * (k as f64 / 2.0 - 1.0))).collect()
}

#[test]
fn feynman_kac_gap_shrinks() {
    let p = quadratic();
    let base = PdeGridSpec::new(0.0, 4.0, 41, 20, 1.0);
    let st = refinement_study(&p, &base, &[1, 2, 4], 20, &near(1.0, 0.2), VariationalScheme::PolicyIteration).unwrap();
    assert!(st.decreasing, "{:?}", st.levels);
    assert!(st.levels.last().unwrap().max_gap < 1e-2);
    assert!(st.order > 0.5);
}

#[test]
fn schemes_agree_and_satisfy_complementarity() {
    let p = linear(0.0);
    let grid = PdeGridSpec::new(-6.0, 6.0, 81, 40, 1.0);
    let a = solve_vi(&p, &grid, VariationalScheme::PolicyIteration).unwrap();
    let b = solve_vi(&p, &grid, VariationalScheme::Splitting).unwrap();
    assert!(a.sup_distance(&b) < 5e-3);
    assert!(a.complementarity(&p).unwrap() < 1e-10);
    assert!(a.constraint_violation(&p.structure) <= 1e-12);
    assert!(b.constraint_violation(&p.structure) <= 1e-12);
    assert_eq!(a.terminal_error(&p), 0.0);
}

#[test]
fn raising_the_terminal_payoff_raises_the_solution() {
    let grid = PdeGridSpec::new(-6.0, 6.0, 61, 30, 1.0);
    let lo = solve_vi(&linear(0.0), &grid, VariationalScheme::PolicyIteration).unwrap();
    let hi = solve_vi(&linear(0.1), &grid, VariationalScheme::PolicyIteration).unwrap();
    assert!(hi.min_difference(&lo) >= -1e-12);
}

#[test]
fn penalized_solutions_decrease_to_the_inequality() {
    let p = quadratic();
    let grid = PdeGridSpec::new(0.0, 4.0, 81, 40, 1.0);
    let vi = solve_vi(&p, &grid, VariationalScheme::PolicyIteration).unwrap();
    let runs: Vec<PdeSolution> = [1.0, 10.0, 100.0].iter().map(|n| solve_penalized_pde(&p, &grid, *n).unwrap()).collect();
    for w in runs.windows(2) {
        assert!(w[0].min_difference(&w[1]) >= -1e-9);
        assert!(w[1].sup_distance(&vi) < w[0].sup_distance(&vi));
    }
    assert!(runs[2].min_difference(&vi) >= -1e-9);
}

#[test]
fn constant_data_matches_lattice() {
    let p = serde_json::from_str::<ProblemSpec>(
        r#"{"costs": [[0, 0.5], [0.5, 0]], "generator": {"kind": "constant", "c": [0, 0]},
            "terminal": {"kind": "constant", "values": [0.25, 0]}, "horizon": 1.0}"#,
    )
    .unwrap()
    .build()
    .unwrap();
    let grid = PdeGridSpec::new(-2.0, 2.0, 21, 10, 1.0);
    let s = solve_vi(&p, &grid, VariationalScheme::PolicyIteration).unwrap();
    let r = feynman_kac_check(&p, &s, 10, Branching::Binomial, &interior_points(&grid, 0.5, 5)).unwrap();
    assert!(r.max_gap <= 1e-10);
}

#[test]
fn coarse_time_grid_rejected_for_stiff_driver() {
    let p = serde_json::from_str::<ProblemSpec>(
        r#"{"costs": [[0]], "generator": {"kind": "linear", "a": [-30.0], "c": [0]},
            "terminal": {"kind": "constant", "values": [1]}, "horizon": 1.0}"#,
    )
    .unwrap()
    .build()
    .unwrap();
    let err = solve_vi(&p, &PdeGridSpec::new(-1.0, 1.0, 11, 10, 1.0), VariationalScheme::PolicyIteration).unwrap_err();
    assert!(matches!(err, SolverError::StepSize { .. }));
}

use std::sync::Arc;

use obliq_core::lattice::{solve_reflected, LatticeModel, LatticeSpec};
use obliq_core::sde::*;
use obliq_core::verify::extract_optimal;
use obliq_core::*;

fn quadratic_model() -> SwitchedDiffusion {
    SwitchedDiffusion {
        x0: vec![1.0],
        horizon: 1.0,
        volatility: Volatility::Proportional { vol: vec![0.2] },
        drift: vec![vec![-0.1], vec![0.1]],
        cost: vec![
            RunningCost::Quadratic { center: 0.9, scale: 1.0 },
            RunningCost::Quadratic { center: 1.1, scale: 1.0 },
        ],
        cost_argument: CostArgument::Current,
    }
}

fn optimal_policy(model: &SwitchedDiffusion, s: &SwitchingStructure, steps: usize, start: usize) -> (f64, LatticePolicy) {
    let p = model.lattice_problem(s).unwrap();
    let lat = Arc::new(LatticeModel::new(&LatticeSpec::new(model.horizon, steps, 1)).unwrap());
    let sol = solve_reflected(&p, &lat).unwrap();
    let a = Arc::new(extract_optimal(&sol, start).unwrap());
    (sol.root()[start], LatticePolicy::new(a, lat, model.state_map(), steps).unwrap())
}

#[test]
fn mode_dependent_drift_keeps_unit_mean_weight() {
    let model = SwitchedDiffusion {
        x0: vec![0.0],
        volatility: Volatility::Constant { vol: vec![1.0] },
        drift: vec![vec![0.3], vec![-0.3]],
        cost: vec![RunningCost::Constant { c: 0.0 }; 2],
        ..quadratic_model()
    };
    let pol = ThresholdPolicy { start: 0, above: 1, below: 0, upper: 0.2, lower: -0.2, dim: 1 };
    for paths in [10_000, 40_000] {
        let r = girsanov_weight(&StreamedEnsemble { seed: 5, steps: 32, paths }, &pol, &model).unwrap();
        assert!((r.mean - 1.0).abs() <= 3.0 * r.se, "{} ± {}", r.mean, r.se);
        assert!(r.weights.iter().all(|w| *w > 0.0));
    }
}

#[test]
fn deterministic_instance_is_attained() {
    let model = SwitchedDiffusion {
        x0: vec![0.0],
        volatility: Volatility::Constant { vol: vec![0.01] },
        drift: vec![],
        cost: vec![RunningCost::Constant { c: 2.0 }, RunningCost::Constant { c: 0.0 }],
        ..quadratic_model()
    };
    let s = SwitchingStructure::uniform(2, 0.5).unwrap();
    let (y, pol) = optimal_policy(&model, &s, 16, 0);
    assert!((y - 0.5).abs() < 1e-12);
    let src = StreamedEnsemble { seed: 3, steps: 16, paths: 2_000 };
    let others = sample_policies(&model, 0, Some(&pol), 12, 1);
    let mut all: Vec<&dyn FeedbackPolicy> = vec![&pol];
    all.extend(others.iter().map(|p| p.as_ref()));
    let v = check_lower_bound(y, estimate_costs(&src, &all, &model, &s).unwrap(), Some(0), 3.0);
    assert!(v.passed, "{:?}", v.below_bound);
    assert!(v.attainment_gap.unwrap().abs() < 1e-9);
}

#[test]
fn inactive_constraint_keeps_cheapest_mode() {
    let model = SwitchedDiffusion {
        cost: vec![RunningCost::Constant { c: 0.7 }, RunningCost::Constant { c: 0.9 }],
        drift: vec![],
        ..quadratic_model()
    };
    let s = SwitchingStructure::uniform(2, 0.5).unwrap();
    let (y, _) = optimal_policy(&model, &s, 20, 0);
    assert!((y - 0.7).abs() < 1e-12);
    let e = simulate_driverless(&model, 20, 50, 1).unwrap();
    let j = estimate_cost(&e, &ConstantPolicy(0), &model, &s).unwrap();
    assert!((j.value - 0.7).abs() < 1e-12);
}

#[test]
fn quadratic_example_respects_the_bound() {
    let model = quadratic_model();
    let s = SwitchingStructure::uniform(2, 0.005).unwrap();
    let (y, pol) = optimal_policy(&model, &s, 50, 0);
    let others = sample_policies(&model, 0, Some(&pol), 8, 2);
    let mut all: Vec<&dyn FeedbackPolicy> = vec![&pol];
    all.extend(others.iter().map(|p| p.as_ref()));
    let src = StreamedEnsemble { seed: 4, steps: 50, paths: 20_000 };
    let v = check_lower_bound(y, estimate_costs(&src, &all, &model, &s).unwrap(), Some(0), 3.0);
    assert!(v.passed, "gap {:?} below {:?}", v.attainment_gap, v.below_bound);
}

#[test]
fn estimates_are_reproducible() {
    let model = quadratic_model();
    let s = SwitchingStructure::uniform(2, 0.005).unwrap();
    let (_, pol) = optimal_policy(&model, &s, 10, 1);
    let src = StreamedEnsemble { seed: 99, steps: 20, paths: 3_000 };
    let stored = simulate_driverless(&model, 20, 3_000, 99).unwrap();
    let a = estimate_cost(&src, &pol.perturbed(0.1, 7), &model, &s).unwrap();
    let b = estimate_cost(&stored, &pol.perturbed(0.1, 7), &model, &s).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.se.to_bits(), b.se.to_bits());
}

#[test]
fn running_max_cost_is_priced() {
    let model = SwitchedDiffusion {
        x0: vec![0.0],
        volatility: Volatility::Constant { vol: vec![1.0] },
        drift: vec![],
        cost: vec![RunningCost::Affine { slope: 1.0, intercept: 0.0 }],
        cost_argument: CostArgument::RunningMax,
        ..quadratic_model()
    };
    assert!(model.lattice_problem(&SwitchingStructure::single()).is_err());
    // E[max_{s<=t} W_s] = sqrt(2t/pi), so the cost integrates to (2/3) sqrt(2/pi).
    let src = StreamedEnsemble { seed: 8, steps: 200, paths: 4_000 };
    let j = estimate_cost(&src, &ConstantPolicy(0), &model, &SwitchingStructure::single()).unwrap();
    let exact = 2.0 / 3.0 * (2.0 / std::f64::consts::PI).sqrt();
    // The discrete maximum is biased low by O(sqrt(dt)).
    assert!(j.value < exact + 3.0 * j.se && j.value > exact - 0.05, "{} vs {exact}", j.value);
}

#[test]
fn invalid_models_rejected() {
    let bad = SwitchedDiffusion { volatility: Volatility::Constant { vol: vec![0.0] }, ..quadratic_model() };
    assert!(matches!(bad.validate(), Err(SolverError::Hypothesis(_))));
    let bad = SwitchedDiffusion { drift: vec![vec![f64::INFINITY], vec![0.0]], ..quadratic_model() };
    assert!(matches!(bad.validate(), Err(SolverError::Hypothesis(_))));
    let lat = Arc::new(LatticeModel::new(&LatticeSpec::new(1.0, 10, 1)).unwrap());
    let strat = Arc::new(obliq_core::switching::Strategy::constant(&lat, 2, 0));
    assert!(LatticePolicy::new(strat, lat, quadratic_model().state_map(), 15).is_err());
}

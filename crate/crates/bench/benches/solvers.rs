use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use obliq_bench::{linear_two_mode, quadratic_diffusion, rotating_three_mode};
use obliq_core::lattice::{solve_reflected, LatticeModel, LatticeSpec};
use obliq_core::pde::{solve_vi, PdeGridSpec, VariationalScheme};
use obliq_core::penalty::solve_penalized;
use obliq_core::sde::{estimate_cost, LatticePolicy, StreamedEnsemble};
use obliq_core::switching::{enumerate_strategies, EnumerationScope, DEFAULT_STRATEGY_CAP};
use obliq_core::verify::extract_optimal;

fn lattice(steps: usize) -> LatticeModel {
    LatticeModel::new(&LatticeSpec::new(1.0, steps, 1)).unwrap()
}

fn reflected(c: &mut Criterion) {
    let mut g = c.benchmark_group("reflected");
    for steps in [64, 256, 1024] {
        let lat = lattice(steps);
        let p = rotating_three_mode();
        g.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, _| b.iter(|| solve_reflected(black_box(&p), &lat).unwrap()));
    }
    g.finish();
}

fn penalized(c: &mut Criterion) {
    let p = linear_two_mode();
    let lat = lattice(256);
    c.bench_function("penalized/256", |b| b.iter(|| solve_penalized(black_box(&p), &lat, 64.0).unwrap()));
}

fn enumeration(c: &mut Criterion) {
    let p = linear_two_mode();
    let lat = lattice(4);
    let scope = EnumerationScope::Feedback { include_terminal: false };
    c.bench_function("enumeration/feedback_4", |b| {
        b.iter(|| enumerate_strategies(black_box(&p), &lat, 0, scope, DEFAULT_STRATEGY_CAP).unwrap())
    });
}

fn pde(c: &mut Criterion) {
    let p = linear_two_mode();
    let grid = PdeGridSpec::new(-6.0, 6.0, 161, 80, 1.0);
    let mut g = c.benchmark_group("pde");
    for scheme in [VariationalScheme::PolicyIteration, VariationalScheme::Splitting] {
        g.bench_function(format!("{scheme:?}"), |b| b.iter(|| solve_vi(black_box(&p), &grid, scheme).unwrap()));
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let (model, costs) = quadratic_diffusion();
    let lat = Arc::new(lattice(50));
    let sol = solve_reflected(&model.lattice_problem(&costs).unwrap(), &lat).unwrap();
    let policy = LatticePolicy::new(Arc::new(extract_optimal(&sol, 0).unwrap()), lat, model.state_map(), 50).unwrap();
    let source = StreamedEnsemble { seed: 1, steps: 50, paths: 10_000 };
    let mut g = c.benchmark_group("monte_carlo");
    g.sample_size(10);
    g.bench_function("lattice_policy_10k", |b| b.iter(|| estimate_cost(&source, &policy, &model, &costs).unwrap()));
    g.finish();
}

criterion_group!(benches, reflected, penalized, enumeration, pde, monte_carlo);
criterion_main!(benches);

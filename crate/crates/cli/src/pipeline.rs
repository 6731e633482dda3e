//! Experiment stages, their checks, and the artifact directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use obliq_core::lattice::{solve_reflected, LatticeModel, ReflectedSolution};
use obliq_core::pde::{feynman_kac_check, interior_points, refinement_study, solve_penalized_pde, solve_vi, PdeSolution};
use obliq_core::penalty::run_schedule;
use obliq_core::sde::{
    check_lower_bound, estimate_costs, girsanov_weight, sample_policies, FeedbackPolicy, LatticePolicy,
    StreamedEnsemble,
};
use obliq_core::switching::{enumerate_strategies, Strategy, DEFAULT_STRATEGY_CAP};
use obliq_core::verify::{extract_optimal, separation_audit, verify_optimality};
use obliq_core::{separation_constant, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, ErrorReport};

/// Random lattice strategies compared against the extracted one.
const STRATEGY_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Solve,
    Penalize,
    Strategy,
    Simulate,
    Pde,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Solve => "solve",
            Stage::Penalize => "penalize",
            Stage::Strategy => "strategy",
            Stage::Simulate => "simulate",
            Stage::Pde => "pde",
        }
    }

    /// Stages a verb runs, in order.
    pub fn plan(verb: Stage) -> Vec<Stage> {
        match verb {
            Stage::Solve => vec![Stage::Solve],
            Stage::Penalize => vec![Stage::Solve, Stage::Penalize],
            Stage::Strategy => vec![Stage::Solve, Stage::Strategy],
            Stage::Simulate => vec![Stage::Solve, Stage::Strategy, Stage::Simulate],
            Stage::Pde => vec![Stage::Pde],
        }
    }

    /// Every stage the configuration has a block for.
    pub fn configured(config: &ExperimentConfig) -> Vec<Stage> {
        let s = &config.solver;
        let mut out = vec![Stage::Solve];
        if s.penalty.is_some() {
            out.push(Stage::Penalize);
        }
        if s.strategy.is_some() || s.monte_carlo.is_some() {
            out.push(Stage::Strategy);
        }
        if s.monte_carlo.is_some() {
            out.push(Stage::Simulate);
        }
        if s.pde.is_some() {
            out.push(Stage::Pde);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    fn at_most(name: &str, measured: f64, tolerance: f64) -> Self {
        Self { name: name.to_string(), passed: measured <= tolerance, measured, tolerance }
    }

    fn holds(name: &str, passed: bool) -> Self {
        Self { name: name.to_string(), passed, measured: if passed { 1.0 } else { 0.0 }, tolerance: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub data: Value,
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Machine-readable result of a run, written as `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub config_hash: String,
    pub verdict: Verdict,
    pub stages: Vec<StageReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
    Error,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Error => "ERROR",
        })
    }
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 1,
            Verdict::Error => 2,
        }
    }
}

pub struct RunOutput {
    pub summary: Summary,
    pub artifacts: Vec<Artifact>,
}

/// Intermediate results shared between stages.
struct Context<'a> {
    config: &'a ExperimentConfig,
    problem: Problem,
    lattice: Arc<LatticeModel>,
    reflected: Option<ReflectedSolution>,
    strategy: Option<Arc<Strategy>>,
    artifacts: Vec<Artifact>,
}

fn csv_bytes<F>(header: &[String], fill: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), CliError>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    fill(&mut w)?;
    w.into_inner().map_err(|e| CliError::Output(e.to_string()))
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn mode_columns(prefix: &str, m: usize) -> Vec<String> {
    (0..m).map(|i| format!("{prefix}{i}")).collect()
}

/// Runs `stages` and collects their reports. Solver errors abort the run.
pub fn execute(config: &ExperimentConfig, stages: &[Stage]) -> Result<RunOutput, CliError> {
    config.validate()?;
    let mut ctx = Context {
        config,
        problem: config.build_problem()?,
        lattice: Arc::new(config.lattice()?),
        reflected: None,
        strategy: None,
        artifacts: Vec::new(),
    };
    let mut reports = Vec::new();
    for &stage in stages {
        let (checks, data) = match stage {
            Stage::Solve => solve(&mut ctx)?,
            Stage::Penalize => penalize(&mut ctx)?,
            Stage::Strategy => strategy(&mut ctx)?,
            Stage::Simulate => simulate(&mut ctx)?,
            Stage::Pde => pde(&mut ctx)?,
        };
        reports.push(StageReport { stage: stage.name().into(), passed: checks.iter().all(|c| c.passed), checks, data });
    }
    let verdict = if reports.iter().all(|r| r.passed) { Verdict::Pass } else { Verdict::Fail };
    let mut artifacts = ctx.artifacts;
    artifacts.push(Artifact {
        name: "config.json".into(),
        bytes: serde_json::to_vec_pretty(config).map_err(|e| CliError::Output(e.to_string()))?,
    });
    Ok(RunOutput {
        summary: Summary { name: config.name.clone(), config_hash: config.hash(), verdict, stages: reports, error: None },
        artifacts,
    })
}

fn reflected<'c>(ctx: &'c mut Context<'_>) -> Result<&'c ReflectedSolution, CliError> {
    if ctx.reflected.is_none() {
        ctx.reflected = Some(solve_reflected(&ctx.problem, &ctx.lattice)?);
    }
    Ok(ctx.reflected.as_ref().expect("just solved"))
}

fn solve(ctx: &mut Context<'_>) -> Result<(Vec<Check>, Value), CliError> {
    let checks_cfg = ctx.config.checks.clone();
    let horizon = ctx.config.horizon();
    let sol = reflected(ctx)?;
    let summary = sol.summary();
    let m = sol.m;
    let mut checks = vec![
        // A single mode has no constraint to violate.
        Check::at_most("constraint_violation", if m > 1 { summary.max_violation } else { 0.0 }, 0.0),
        Check::at_most("skorokhod_residual", summary.skorokhod_residual, 0.0),
    ];
    if let Some(expected) = &checks_cfg.expected_root {
        let gap = if expected.len() == m {
            expected.iter().zip(&summary.root).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        checks.push(Check::at_most("expected_root", gap, checks_cfg.root_tolerance));
    }
    if let Some(cf) = &checks_cfg.closed_form {
        let target = cf.value(horizon);
        let gap = summary.root.iter().map(|y| (y - target).abs()).fold(0.0, f64::max);
        checks.push(Check::at_most("closed_form", gap, checks_cfg.closed_form_tolerance));
    }
    let mut header = vec!["level".to_string(), "time".into(), "node".into()];
    header.extend(mode_columns("y", m));
    header.extend(mode_columns("dk", m));
    let bytes = csv_bytes(&header, |w| {
        for row in sol.rows() {
            let mut rec = vec![row.level.to_string(), fmt(row.time), row.node.to_string()];
            rec.extend(row.y.iter().chain(&row.dk).map(|v| fmt(*v)));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    let data = json!({ "steps": sol.lattice.steps(), "summary": summary });
    ctx.artifacts.push(Artifact { name: "levels.csv".into(), bytes });
    Ok((checks, data))
}

fn penalize(ctx: &mut Context<'_>) -> Result<(Vec<Check>, Value), CliError> {
    let schedule = ctx.config.solver.penalty.as_ref().map(|p| p.schedule.clone()).unwrap_or_default();
    let tol = ctx.config.checks.monotonicity_tolerance;
    reflected(ctx)?;
    let sol = ctx.reflected.as_ref().expect("solved");
    let report = run_schedule(&ctx.problem, &ctx.lattice, &schedule, Some(sol))?;
    let m = sol.m;
    let mut checks = vec![Check::at_most("penalty_monotonicity", report.max_monotonicity_gap.max(0.0), tol)];
    if let Some(g) = report.max_reference_gap {
        checks.push(Check::at_most("penalty_above_reflected", g.max(0.0), tol));
    }
    let mut header = vec!["penalty".to_string()];
    header.extend(mode_columns("root", m));
    header.extend(["total_violation", "monotonicity_gap", "reference_gap", "reference_distance", "newton_iterations"].map(String::from));
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let bytes = csv_bytes(&header, |w| {
        for e in &report.entries {
            let mut rec = vec![fmt(e.penalty)];
            rec.extend(e.root.iter().map(|v| fmt(*v)));
            rec.extend([
                fmt(e.total_violation),
                opt(e.monotonicity_gap),
                opt(e.reference_gap),
                opt(e.reference_distance),
                e.newton_iterations.to_string(),
            ]);
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    ctx.artifacts.push(Artifact { name: "penalty_schedule.csv".into(), bytes });
    let data = json!({
        "violation_slope": report.violation_slope,
        "extrapolated_root": report.extrapolated_root,
        "max_monotonicity_gap": report.max_monotonicity_gap,
        "max_reference_gap": report.max_reference_gap,
    });
    Ok((checks, data))
}

/// Seeded random feedback tables started in `start`.
pub fn random_strategies(lattice: &LatticeModel, m: usize, start: usize, count: usize, seed: u64) -> Vec<Strategy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let rate: f64 = rng.random_range(0.0..0.3);
            Strategy::from_rule(lattice, m, start, |_, _, j| if rng.random::<f64>() < rate { rng.random_range(0..m) } else { j })
        })
        .collect()
}

fn strategy(ctx: &mut Context<'_>) -> Result<(Vec<Check>, Value), CliError> {
    let cfg = ctx.config.solver.strategy.clone();
    let start = cfg
        .as_ref()
        .map(|s| s.start_mode)
        .or_else(|| ctx.config.solver.monte_carlo.as_ref().map(|mc| mc.start_mode))
        .unwrap_or(0);
    let tol = ctx.config.checks.optimality_tolerance;
    reflected(ctx)?;
    let sol = ctx.reflected.as_ref().expect("solved");
    let m = sol.m;
    if start >= m {
        return Err(CliError::config("solver.strategy.start_mode", format!("mode {start} out of range")));
    }
    let samples = random_strategies(&ctx.lattice, m, start, STRATEGY_SAMPLES, 0x5eed);
    let verdict = verify_optimality(&ctx.problem, sol, start, &samples, tol)?;
    let best = Arc::new(extract_optimal(sol, start)?);
    let mut checks = vec![
        Check::at_most("optimal_attainment", verdict.optimal_gap, tol),
        Check::at_most("total_increment", verdict.spliced.max_total_increment, tol),
        Check::at_most("samples_above_value", verdict.worst_violation.max(0.0), tol),
    ];
    let mut data = json!({
        "start_mode": start,
        "value": verdict.reference,
        "optimal_value": verdict.optimal_value,
        "switches": best.max_switches(&ctx.lattice),
        "spliced": verdict.spliced,
    });
    if let Some(scope) = cfg.as_ref().and_then(|c| c.enumerate) {
        let e = enumerate_strategies(&ctx.problem, &ctx.lattice, start, scope, DEFAULT_STRATEGY_CAP)?;
        checks.push(Check::at_most("enumeration_infimum", (e.best_value - verdict.reference).abs(), tol));
        data["enumeration"] = json!({ "best_value": e.best_value, "visited": e.visited.to_string(), "range": e.range });
    }
    if cfg.as_ref().is_some_and(|c| c.separation_audit) {
        let sep = separation_constant(&ctx.problem.structure)?;
        let audit = separation_audit(sol, &best, sep, 1e-6)?;
        checks.push(Check::holds("separation_audit", audit.passed));
        data["separation"] = serde_json::to_value(&audit).map_err(|e| CliError::Output(e.to_string()))?;
    }
    let events = best.events(&ctx.lattice, &ctx.problem.structure);
    let header = ["level", "time", "node", "from", "to", "cost"].map(String::from);
    let bytes = csv_bytes(&header, |w| {
        for ev in &events {
            w.write_record([
                ev.level.to_string(),
                fmt(ev.time),
                ev.node.to_string(),
                ev.from.to_string(),
                ev.to.to_string(),
                fmt(ev.cost),
            ])?;
        }
        Ok(())
    })?;
    ctx.artifacts.push(Artifact { name: "strategy_events.csv".into(), bytes });
    ctx.strategy = Some(best);
    Ok((checks, data))
}

fn simulate(ctx: &mut Context<'_>) -> Result<(Vec<Check>, Value), CliError> {
    let diff = ctx.config.diffusion.as_ref().ok_or_else(|| CliError::config("diffusion", "simulation needs a diffusion"))?;
    let mc = ctx.config.solver.monte_carlo.clone().ok_or_else(|| CliError::config("solver.monte_carlo", "missing"))?;
    let sigmas = ctx.config.checks.sigmas;
    let model = &diff.model;
    let strategy = ctx.strategy.clone().ok_or_else(|| CliError::Output("strategy stage must run first".into()))?;
    let reference = ctx.reflected.as_ref().expect("solved").root()[mc.start_mode];
    let optimal = LatticePolicy::new(strategy, ctx.lattice.clone(), model.state_map(), mc.steps)?;
    let others = sample_policies(model, mc.start_mode, Some(&optimal), mc.strategies, mc.seed ^ 0x9e37_79b9);
    let mut all: Vec<&dyn FeedbackPolicy> = vec![&optimal];
    all.extend(others.iter().map(|p| p.as_ref()));
    let source = StreamedEnsemble { seed: mc.seed, steps: mc.steps, paths: mc.paths };
    let estimates = estimate_costs(&source, &all, model, &diff.costs)?;
    let weights = girsanov_weight(&source, &optimal, model)?;
    let verdict = check_lower_bound(reference, estimates, Some(0), sigmas);
    let checks = vec![
        Check::holds("lower_bound", verdict.below_bound.is_empty()),
        Check::at_most(
            "attainment",
            verdict.attainment_gap.map_or(f64::INFINITY, f64::abs),
            (sigmas * verdict.estimates[0].se).max(1e-9),
        ),
        Check::at_most("weight_mean", (weights.mean - 1.0).abs(), (sigmas * weights.se).max(1e-12)),
    ];
    let header = ["strategy", "label", "j", "se", "weight_mean", "verdict"].map(String::from);
    let gate = |se: f64| (sigmas * se).max(1e-9);
    let bytes = csv_bytes(&header, |w| {
        for (id, e) in verdict.estimates.iter().enumerate() {
            let ok = e.value >= reference - gate(e.se) && (id != 0 || (e.value - reference).abs() <= gate(e.se));
            w.write_record([
                id.to_string(),
                e.label.clone(),
                fmt(e.value),
                fmt(e.se),
                fmt(e.weight_mean),
                if ok { "PASS" } else { "FAIL" }.to_string(),
            ])?;
        }
        Ok(())
    })?;
    ctx.artifacts.push(Artifact { name: "costs.csv".into(), bytes });
    let model_hash = hex::encode(Sha256::digest(serde_json::to_vec(model).map_err(|e| CliError::Output(e.to_string()))?));
    let ensemble = json!({ "seed": mc.seed, "steps": mc.steps, "paths": mc.paths, "model_hash": model_hash });
    ctx.artifacts.push(Artifact { name: "ensemble.json".into(), bytes: serde_json::to_vec_pretty(&ensemble).expect("json") });
    let data = json!({
        "reference": reference,
        "optimal_cost": verdict.estimates[0].value,
        "optimal_se": verdict.estimates[0].se,
        "attainment_gap": verdict.attainment_gap,
        "below_bound": verdict.below_bound,
        "weight_mean": weights.mean,
        "weight_se": weights.se,
        "ensemble": ensemble,
    });
    Ok((checks, data))
}

fn pde(ctx: &mut Context<'_>) -> Result<(Vec<Check>, Value), CliError> {
    let cfg = ctx.config.solver.pde.clone().ok_or_else(|| CliError::config("solver.pde", "missing"))?;
    let checks_cfg = &ctx.config.checks;
    let problem = &ctx.problem;
    let m = problem.m();
    let sol = solve_vi(problem, &cfg.grid, cfg.scheme)?;
    let mut checks = vec![
        Check::at_most("pde_constraint_violation", sol.constraint_violation(&problem.structure).max(0.0), 1e-12),
        Check::at_most("pde_complementarity", sol.complementarity(problem)?, 1e-10),
    ];
    let points = if cfg.points.is_empty() { interior_points(&cfg.grid, cfg.grid.start_time, 5) } else { cfg.points.clone() };
    let fk = feynman_kac_check(problem, &sol, cfg.lattice_steps, ctx.config.solver.lattice.branching, &points)?;
    checks.push(Check::at_most("feynman_kac_gap", fk.max_gap, checks_cfg.feynman_kac_tolerance));
    let mut data = json!({ "feynman_kac_max_gap": fk.max_gap });

    let mut header = vec!["t".to_string(), "x".into()];
    header.extend(mode_columns("u", m));
    let bytes = csv_bytes(&header, |w| {
        for (t, x, u) in sol.rows() {
            let mut rec = vec![fmt(t), fmt(x)];
            rec.extend(u.iter().map(|v| fmt(*v)));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    ctx.artifacts.push(Artifact { name: "pde_grid.csv".into(), bytes });
    let header = ["t", "x", "mode", "pde", "lattice", "gap"].map(String::from);
    let bytes = csv_bytes(&header, |w| {
        for r in &fk.rows {
            w.write_record([fmt(r.t), fmt(r.x), r.mode.to_string(), fmt(r.pde), fmt(r.lattice), fmt(r.gap)])?;
        }
        Ok(())
    })?;
    ctx.artifacts.push(Artifact { name: "feynman_kac.csv".into(), bytes });

    if !cfg.refinement.is_empty() {
        let study = refinement_study(problem, &cfg.grid, &cfg.refinement, cfg.lattice_steps, &points, cfg.scheme)?;
        let finest = study.levels.last().map_or(f64::INFINITY, |l| l.max_gap);
        checks.push(Check::holds("refinement_decreasing", study.decreasing));
        checks.push(Check::at_most("refinement_finest_gap", finest, checks_cfg.feynman_kac_tolerance));
        let header = ["factor", "h", "dt", "lattice_steps", "max_gap"].map(String::from);
        let bytes = csv_bytes(&header, |w| {
            for l in &study.levels {
                w.write_record([l.factor.to_string(), fmt(l.h), fmt(l.dt), l.lattice_steps.to_string(), fmt(l.max_gap)])?;
            }
            Ok(())
        })?;
        ctx.artifacts.push(Artifact { name: "refinement.csv".into(), bytes });
        data["refinement"] = json!({ "order": study.order, "constant": study.constant, "decreasing": study.decreasing });
    }

    if !cfg.penalties.is_empty() {
        let mut penalties = cfg.penalties.clone();
        penalties.sort_by(f64::total_cmp);
        let runs: Vec<PdeSolution> =
            penalties.iter().map(|n| solve_penalized_pde(problem, &cfg.grid, *n)).collect::<Result<_, _>>()?;
        let distances: Vec<f64> = runs.iter().map(|r| r.sup_distance(&sol)).collect();
        let worst_increase = runs.windows(2).map(|w| -w[0].min_difference(&w[1])).fold(0.0, f64::max);
        checks.push(Check::at_most("pde_penalty_monotonicity", worst_increase, checks_cfg.monotonicity_tolerance));
        checks.push(Check::holds("pde_penalty_distance_shrinks", distances.windows(2).all(|w| w[1] < w[0])));
        data["penalties"] = json!({ "penalties": penalties, "sup_distance": distances });
    }
    Ok((checks, data))
}

/// Directory name `<hash12>-<UTC timestamp>`.
pub fn artifact_dir_name(hash: &str) -> String {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.6fZ");
    format!("{}-{stamp}", &hash[..12.min(hash.len())])
}

/// Writes `summary.json` plus every artifact into a fresh directory below `out`.
pub fn write_run(out: &Path, summary: &Summary, artifacts: &[Artifact]) -> Result<PathBuf, CliError> {
    let dir = out.join(artifact_dir_name(&summary.config_hash));
    std::fs::create_dir_all(&dir)?;
    for a in artifacts {
        std::fs::write(dir.join(&a.name), &a.bytes)?;
    }
    let text = serde_json::to_vec_pretty(summary).map_err(|e| CliError::Output(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), text)?;
    Ok(dir)
}

/// Summary for a run that failed before producing results.
pub fn error_summary(config: Option<&ExperimentConfig>, err: &CliError) -> Summary {
    Summary {
        name: config.map(|c| c.name.clone()).unwrap_or_default(),
        config_hash: config.map(|c| c.hash()).unwrap_or_default(),
        verdict: Verdict::Error,
        stages: Vec::new(),
        error: Some(err.to_report()),
    }
}

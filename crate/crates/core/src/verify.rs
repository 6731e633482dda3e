//! Optimal strategy extraction from a reflected solution and the checks
//! that certify it: the spliced solution along a strategy, comparison with
//! arbitrary strategies and the separation of consecutive switch states.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};
use crate::lattice::{level_states, ReflectedSolution};
use crate::model::{Problem, Separation};
use crate::switching::{switched_value, Strategy};

/// Relative tolerance for detecting an active constraint.
pub const SWITCH_TOL: f64 = 1e-9;

fn binding(y: &[f64], i: usize, floor: f64) -> bool {
    y[i] >= floor - SWITCH_TOL * y[i].abs().max(1.0)
}

/// Optimal feedback strategy read off a reflected solution: leave mode `j`
/// as soon as `Y_j = min_{l != j}(Y_l + k(j,l))`, for the smallest index
/// attaining the minimum whose own constraint is slack. No switch is made
/// at the horizon.
pub fn extract_optimal(solution: &ReflectedSolution, start_mode: usize) -> Result<Strategy> {
    let m = solution.m;
    let s = &solution.structure;
    if start_mode >= m {
        return Err(SolverError::Structure(format!("start mode {start_mode} out of range")));
    }
    let lattice = &solution.lattice;
    let steps = lattice.steps();
    let mut decisions = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        let size = lattice.level_size(n);
        let mut row = Vec::with_capacity(size * m);
        for node in 0..size {
            let y = solution.node_values(n, node);
            for j in 0..m {
                if n == steps || m == 1 {
                    row.push(j as u32);
                    continue;
                }
                let floor = s.switch_floor(y, j);
                if !binding(y, j, floor) {
                    row.push(j as u32);
                    continue;
                }
                let tol = SWITCH_TOL * floor.abs().max(1.0);
                let candidates: Vec<usize> =
                    (0..m).filter(|&l| l != j && y[l] + s.cost(j, l) <= floor + tol).collect();
                let slack = candidates.iter().copied().find(|&l| !binding(y, l, s.switch_floor(y, l)));
                let target = match slack {
                    Some(l) => l,
                    None if s.is_strict() => {
                        return Err(SolverError::Extraction(format!(
                            "every minimising target of mode {j} at level {n} node {node} is itself constrained"
                        )))
                    }
                    None => match candidates.first() {
                        Some(&l) => l,
                        None => {
                            return Err(SolverError::Extraction(format!(
                                "no target attains the constraint of mode {j} at level {n} node {node}"
                            )))
                        }
                    },
                };
                row.push(target as u32);
            }
        }
        decisions.push(row);
    }
    Ok(Strategy { m, start_mode, decisions })
}

/// Reflected fields spliced along a strategy, per reachable
/// `(node, incoming)` state. Unreachable entries hold NaN.
#[derive(Debug, Clone)]
pub struct SplicedSolution {
    pub m: usize,
    /// Probability of arriving at `(node, incoming)`.
    pub reach: Vec<Vec<f64>>,
    /// `Y` of the mode held after the decision.
    pub y: Vec<Vec<f64>>,
    /// Reflection increment of the held mode.
    pub dk: Vec<Vec<f64>>,
    /// Jump `Y_to + k(from,to) - Y_from` of the switching compensator.
    pub da: Vec<Vec<f64>>,
    /// Residual of the one-step equation satisfied by the spliced values.
    pub identity: Vec<Vec<f64>>,
    /// Whether the strategy switches at `(node, incoming)`.
    pub switched: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplicedSummary {
    pub max_identity_residual: f64,
    /// Smallest compensator jump over actual switches; negative values flag
    /// a solution outside the constraint domain. Infinite without switches.
    pub min_jump: f64,
    /// `max (dK + dA)` over reachable states.
    pub max_total_increment: f64,
    pub expected_k: f64,
    pub expected_a: f64,
}

impl SplicedSolution {
    pub fn summary(&self) -> SplicedSummary {
        let mut out = SplicedSummary {
            max_identity_residual: 0.0,
            min_jump: f64::INFINITY,
            max_total_increment: 0.0,
            expected_k: 0.0,
            expected_a: 0.0,
        };
        for n in 0..self.reach.len() {
            for (idx, &p) in self.reach[n].iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let (k, a) = (self.dk[n][idx], self.da[n][idx]);
                out.max_identity_residual = out.max_identity_residual.max(self.identity[n][idx].abs());
                if self.switched[n][idx] {
                    out.min_jump = out.min_jump.min(a);
                }
                out.max_total_increment = out.max_total_increment.max(k + a);
                out.expected_k += p * k;
                out.expected_a += p * a;
            }
        }
        out
    }
}

pub fn spliced_solution(problem: &Problem, solution: &ReflectedSolution, strategy: &Strategy) -> Result<SplicedSolution> {
    let lattice = &solution.lattice;
    let m = solution.m;
    let d = lattice.dim();
    strategy.check_shape(lattice, m)?;
    let s = &solution.structure;
    let steps = lattice.steps();
    let nan_levels = || -> Vec<Vec<f64>> { (0..=steps).map(|n| vec![f64::NAN; lattice.level_size(n) * m]).collect() };
    let mut reach: Vec<Vec<f64>> = (0..=steps).map(|n| vec![0.0; lattice.level_size(n) * m]).collect();
    let (mut y, mut dk, mut da, mut identity) = (nan_levels(), nan_levels(), nan_levels(), nan_levels());
    let mut switched: Vec<Vec<bool>> = (0..=steps).map(|n| vec![false; lattice.level_size(n) * m]).collect();
    reach[0][strategy.start_mode] = 1.0;
    let mut z = vec![0.0; d];
    for n in 0..=steps {
        let shifts = if n < steps { lattice.branch_shifts(n) } else { Vec::new() };
        let states = level_states(problem, lattice, n);
        let t = lattice.time(n);
        for node in 0..lattice.level_size(n) {
            let vals = solution.node_values(n, node);
            for j in 0..m {
                let idx = node * m + j;
                let p = reach[n][idx];
                if p <= 0.0 {
                    continue;
                }
                let to = strategy.decide(n, node, j);
                let jump = vals[to] + s.cost(j, to) - vals[j];
                y[n][idx] = vals[to];
                da[n][idx] = jump;
                switched[n][idx] = to != j;
                dk[n][idx] = solution.dk[n][node * m + to];
                if n == steps {
                    identity[n][idx] = vals[j] - (s.cost(j, to) + vals[to] - jump);
                    continue;
                }
                let base = lattice.child_base(n, node);
                let e = lattice.moments(&solution.y[n + 1], m, to, base, &shifts, &mut z);
                let x = &states[node * d..(node + 1) * d];
                let zr = &solution.z[n][(node * m + to) * d..(node * m + to + 1) * d];
                let pre = solution.y_pre[n][node * m + to];
                let psi = problem.generator.eval(t, x, pre, zr, to);
                identity[n][idx] =
                    vals[j] - (s.cost(j, to) + e + lattice.dt() * psi - dk[n][idx] - jump);
                for (b, sft) in shifts.iter().enumerate() {
                    reach[n + 1][(base + sft) * m + to] += p * lattice.branch_prob(b);
                }
            }
        }
    }
    Ok(SplicedSolution { m, reach, y, dk, da, identity, switched })
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalityVerdict {
    pub start_mode: usize,
    pub reference: f64,
    pub optimal_value: f64,
    pub optimal_gap: f64,
    pub sample_values: Vec<f64>,
    /// `max (reference - U^a)` over samples; nonpositive when every sample
    /// costs at least the reference.
    pub worst_violation: f64,
    pub spliced: SplicedSummary,
    pub passed: bool,
    pub offending: Option<Strategy>,
}

/// Compares the reflected value with the switched value of the extracted
/// strategy and of every sample strategy.
pub fn verify_optimality(
    problem: &Problem,
    solution: &ReflectedSolution,
    start_mode: usize,
    samples: &[Strategy],
    tol: f64,
) -> Result<OptimalityVerdict> {
    let lattice = &solution.lattice;
    let reference = solution.root()[start_mode];
    let best = extract_optimal(solution, start_mode)?;
    let optimal_value = switched_value(problem, lattice, &best)?.root(start_mode);
    let spliced = spliced_solution(problem, solution, &best)?.summary();
    let mut sample_values = Vec::with_capacity(samples.len());
    let mut worst_violation = f64::NEG_INFINITY;
    let mut offending = None;
    for a in samples {
        if a.start_mode != start_mode {
            return Err(SolverError::Structure("sample strategy starts in another mode".into()));
        }
        let u = switched_value(problem, lattice, a)?.root(start_mode);
        sample_values.push(u);
        if reference - u > worst_violation {
            worst_violation = reference - u;
        }
        if reference > u + tol && offending.is_none() {
            offending = Some(a.clone());
        }
    }
    let optimal_gap = (optimal_value - reference).abs();
    if optimal_gap > tol && offending.is_none() {
        offending = Some(best);
    }
    let passed = offending.is_none() && spliced.max_total_increment <= tol;
    Ok(OptimalityVerdict {
        start_mode,
        reference,
        optimal_value,
        optimal_gap,
        sample_values,
        worst_violation,
        spliced,
        passed,
        offending,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationAudit {
    pub switches: usize,
    /// Consecutive switch pairs at distinct interior times.
    pub audited_pairs: usize,
    /// Pairs skipped because the two switches share a grid time.
    pub exempted_pairs: usize,
    pub min_gap: Option<f64>,
    pub constant: Option<f64>,
    pub below_constant: usize,
    /// Switches whose target mode is itself constrained at the same node.
    pub same_instant_chains: usize,
    pub passed: bool,
}

/// Distance between the value vectors at consecutive switches along every
/// path of the strategy, compared with the separation constant.
pub fn separation_audit(solution: &ReflectedSolution, strategy: &Strategy, separation: Separation, tol: f64) -> Result<SeparationAudit> {
    let lattice = &solution.lattice;
    let m = solution.m;
    strategy.check_shape(lattice, m)?;
    let s = &solution.structure;
    let steps = lattice.steps();
    // For every (node, held mode): the distinct last-switch points (level, node)
    // reachable without an intermediate switch. `None` marks "no switch yet".
    type Origins = Vec<Option<(u32, u32)>>;
    let mut origins: Vec<Vec<Origins>> = (0..=steps).map(|n| vec![Vec::new(); lattice.level_size(n) * m]).collect();
    origins[0][strategy.start_mode].push(None);
    let mut audit = SeparationAudit {
        switches: 0,
        audited_pairs: 0,
        exempted_pairs: 0,
        min_gap: None,
        constant: separation.value(),
        below_constant: 0,
        same_instant_chains: 0,
        passed: true,
    };
    let dist = |a: (usize, usize), b: (usize, usize)| -> f64 {
        let ya = solution.node_values(a.0, a.1);
        let yb = solution.node_values(b.0, b.1);
        ya.iter().zip(yb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    };
    for n in 0..=steps {
        let shifts = if n < steps { lattice.branch_shifts(n) } else { Vec::new() };
        for node in 0..lattice.level_size(n) {
            for j in 0..m {
                let mut here = std::mem::take(&mut origins[n][node * m + j]);
                if here.is_empty() {
                    continue;
                }
                here.sort_unstable();
                here.dedup();
                let to = strategy.decide(n, node, j);
                let carried: Origins = if to != j {
                    audit.switches += 1;
                    let y = solution.node_values(n, node);
                    if binding(y, to, s.switch_floor(y, to)) {
                        audit.same_instant_chains += 1;
                    }
                    for prev in here.iter().flatten() {
                        let (pl, pn) = (prev.0 as usize, prev.1 as usize);
                        if pl == n || n == steps {
                            audit.exempted_pairs += 1;
                            continue;
                        }
                        audit.audited_pairs += 1;
                        let g = dist((pl, pn), (n, node));
                        audit.min_gap = Some(audit.min_gap.map_or(g, |v: f64| v.min(g)));
                        if let Some(c) = separation.value() {
                            if g < c - tol {
                                audit.below_constant += 1;
                            }
                        }
                    }
                    vec![Some((n as u32, node as u32))]
                } else {
                    here
                };
                if n < steps {
                    let base = lattice.child_base(n, node);
                    for sft in &shifts {
                        origins[n + 1][(base + sft) * m + to].extend_from_slice(&carried);
                    }
                }
            }
        }
        if n < steps {
            for o in origins[n + 1].iter_mut() {
                o.sort_unstable();
                o.dedup();
            }
        }
    }
    audit.passed = audit.below_constant == 0 && (audit.same_instant_chains == 0 || !s.is_strict());
    Ok(audit)
}

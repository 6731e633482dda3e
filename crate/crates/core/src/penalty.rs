//! Penalized approximation of the reflected system on a lattice.
//!
//! For a penalty level `n` the constraint is replaced by the source term
//! `-n * sum_l (y_i - y_l - k(i,l))^+`. Each node's implicit step is then a
//! coupled piecewise-smooth system in the `m` values, solved by semismooth
//! Newton. Its Jacobian is an M-matrix, so the discrete solutions are
//! monotone in `n` and stay above the reflected solution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};
use crate::lattice::{
    check_dims, check_step_size, for_level, implicit_step, level_states, terminal_level, LatticeModel,
    ReflectedSolution,
};
use crate::model::{Problem, SwitchingStructure};
use crate::numeric::{dense_solve, ls_slope};

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 100;

/// Penalized solution for one penalty level.
#[derive(Debug, Clone)]
pub struct PenalizedRun {
    pub penalty: f64,
    pub lattice: LatticeModel,
    pub m: usize,
    /// `y[level][node * m + i]`.
    pub y: Vec<Vec<f64>>,
    /// `z[level][(node * m + i) * d + k]`; empty at the last level.
    pub z: Vec<Vec<f64>>,
    /// Increments of the increasing process: `n dt sum_l (y_i - y_l - k(i,l))^+`.
    pub dk: Vec<Vec<f64>>,
    /// Largest Newton iteration count over the nodes.
    pub newton_iterations: usize,
}

impl PenalizedRun {
    pub fn root(&self) -> &[f64] {
        &self.y[0][..self.m]
    }

    /// `V(n)[i][j] = E sum_t ((y_i - y_j - k(i,j))^+)^2 dt`.
    pub fn violation(&self, structure: &SwitchingStructure) -> Vec<Vec<f64>> {
        let m = self.m;
        let probs = self.lattice.node_probabilities();
        let dt = self.lattice.dt();
        let mut out = vec![vec![0.0; m]; m];
        for n in 0..self.lattice.steps() {
            for (y, p) in self.y[n].chunks(m).zip(&probs[n]) {
                for i in 0..m {
                    for j in 0..m {
                        if i != j {
                            let v = (y[i] - y[j] - structure.cost(i, j)).max(0.0);
                            out[i][j] += p * v * v * dt;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn total_violation(&self, structure: &SwitchingStructure) -> f64 {
        self.violation(structure).iter().flatten().sum()
    }

    /// Per-mode `sum (y_i - min_{j != i}(y_j + k(i,j)))^- * dk_i` over all
    /// nodes. The penalty only acts on a mode that sits above one of its
    /// faces, so every term vanishes.
    pub fn minimal_condition_residual(&self, structure: &SwitchingStructure) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m];
        for (yl, kl) in self.y.iter().zip(&self.dk) {
            for (y, k) in yl.chunks(m).zip(kl.chunks(m)) {
                for i in 0..m {
                    let gap = y[i] - structure.switch_floor(y, i);
                    out[i] += (-gap).max(0.0) * k[i];
                }
            }
        }
        out
    }

    /// Expected total increase of the increasing process per mode.
    pub fn expected_k(&self) -> Vec<f64> {
        let probs = self.lattice.node_probabilities();
        let mut out = vec![0.0; self.m];
        for (kl, pl) in self.dk.iter().zip(&probs) {
            for (k, p) in kl.chunks(self.m).zip(pl) {
                for i in 0..self.m {
                    out[i] += p * k[i];
                }
            }
        }
        out
    }
}

fn penalty_sum(y: &[f64], i: usize, s: &SwitchingStructure) -> f64 {
    (0..y.len()).filter(|&l| l != i).map(|l| (y[i] - y[l] - s.cost(i, l)).max(0.0)).sum()
}

/// Semismooth Newton for the coupled node system
/// `y_i - e_i - dt psi(y_i, z_i, i) + n dt sum_l (y_i - y_l - k(i,l))^+ = 0`.
#[allow(clippy::too_many_arguments)]
fn node_newton(
    problem: &Problem,
    t: f64,
    x: &[f64],
    e: &[f64],
    z: &[f64],
    n: f64,
    dt: f64,
    y: &mut [f64],
) -> Result<usize> {
    let m = y.len();
    let d = z.len() / m.max(1);
    let s = &problem.structure;
    let g = &problem.generator;
    let mut f = vec![0.0; m];
    let mut jac = vec![0.0; m * m];
    for it in 0..NEWTON_MAX_ITER {
        let mut worst = 0.0f64;
        let scale = 1.0 + y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..m {
            let zi = &z[i * d..(i + 1) * d];
            f[i] = y[i] - e[i] - dt * g.eval(t, x, y[i], zi, i) + n * dt * penalty_sum(y, i, s);
            worst = worst.max(f[i].abs());
        }
        if worst <= NEWTON_TOL * scale {
            return Ok(it);
        }
        jac.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let zi = &z[i * d..(i + 1) * d];
            jac[i * m + i] = 1.0 - dt * g.dy(t, x, y[i], zi, i);
            for l in 0..m {
                if l != i && y[i] - y[l] - s.cost(i, l) > 0.0 {
                    jac[i * m + i] += n * dt;
                    jac[i * m + l] -= n * dt;
                }
            }
        }
        let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let step = dense_solve(&mut jac, &mut rhs)
            .ok_or_else(|| SolverError::NonConvergence(format!("singular penalized Jacobian at t = {t}")))?;
        for (yi, di) in y.iter_mut().zip(&step) {
            *yi += di;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonConvergence(format!("penalized Newton diverged at t = {t}")));
        }
    }
    Err(SolverError::NonConvergence(format!(
        "penalized Newton at t = {t} did not converge in {NEWTON_MAX_ITER} iterations (n = {n})"
    )))
}

/// Solves the penalized system for one penalty level.
pub fn solve_penalized(problem: &Problem, lattice: &LatticeModel, penalty: f64) -> Result<PenalizedRun> {
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(SolverError::Structure(format!("penalty {penalty} must be finite and nonnegative")));
    }
    check_dims(problem, lattice)?;
    check_step_size(problem, lattice)?;
    let m = problem.m();
    let d = lattice.dim();
    let steps = lattice.steps();
    let s = &problem.structure;
    let dt = lattice.dt();
    let mut y = vec![Vec::new(); steps + 1];
    let mut z = vec![Vec::new(); steps + 1];
    let mut dk = vec![Vec::new(); steps + 1];
    let terminal = terminal_level(problem, lattice)?;
    dk[steps] = vec![0.0; terminal.len()];
    y[steps] = terminal;
    let width = m * (2 + d) + 1;
    let mut iterations = 0usize;
    for n in (0..steps).rev() {
        let size = lattice.level_size(n);
        let states = level_states(problem, lattice, n);
        let shifts = lattice.branch_shifts(n);
        let next = &y[n + 1];
        let t = lattice.time(n);
        let mut level = vec![0.0; size * width];
        for_level(&mut level, width, |node, out| {
            let base = lattice.child_base(n, node);
            let x = &states[node * d..(node + 1) * d];
            let (yv, rest) = out.split_at_mut(m);
            let (kv, rest) = rest.split_at_mut(m);
            let (zv, it) = rest.split_at_mut(m * d);
            let mut e = vec![0.0; m];
            for i in 0..m {
                let zi = &mut zv[i * d..(i + 1) * d];
                e[i] = lattice.moments(next, m, i, base, &shifts, zi);
                yv[i] = implicit_step(problem, t, x, e[i], zi, i, dt)?;
            }
            if penalty > 0.0 && m > 1 {
                it[0] = node_newton(problem, t, x, &e, zv, penalty, dt, yv)? as f64;
            }
            for i in 0..m {
                kv[i] = penalty * dt * penalty_sum(yv, i, s);
            }
            Ok(())
        })?;
        let mut yl = Vec::with_capacity(size * m);
        let mut kl = Vec::with_capacity(size * m);
        let mut zl = Vec::with_capacity(size * m * d);
        for chunk in level.chunks(width) {
            yl.extend_from_slice(&chunk[..m]);
            kl.extend_from_slice(&chunk[m..2 * m]);
            zl.extend_from_slice(&chunk[2 * m..2 * m + m * d]);
            iterations = iterations.max(chunk[width - 1] as usize);
        }
        y[n] = yl;
        z[n] = zl;
        dk[n] = kl;
    }
    Ok(PenalizedRun { penalty, lattice: lattice.clone(), m, y, z, dk, newton_iterations: iterations })
}

/// Residuals of the pathwise identity `dK = Y(t+dt) - Y(t) + psi dt - Z dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    /// Largest edge-wise residual of the identity.
    pub max_residual: f64,
    /// Largest part of a next-level value not spanned by the increments.
    /// Zero on complete lattices; otherwise it appears in the edge residual.
    pub max_orthogonal: f64,
    /// Largest residual of the identity in conditional-mean form.
    pub max_mean_residual: f64,
}

/// Checks the increasing process against the equation it closes.
pub fn check_k_identity(problem: &Problem, run: &PenalizedRun) -> Result<IdentityCheck> {
    let lattice = &run.lattice;
    check_dims(problem, lattice)?;
    let m = run.m;
    let d = lattice.dim();
    let dt = lattice.dt();
    let mut out = IdentityCheck { max_residual: 0.0, max_orthogonal: 0.0, max_mean_residual: 0.0 };
    let mut zbuf = vec![0.0; d];
    for n in 0..lattice.steps() {
        let states = level_states(problem, lattice, n);
        let shifts = lattice.branch_shifts(n);
        let t = lattice.time(n);
        for node in 0..lattice.level_size(n) {
            let base = lattice.child_base(n, node);
            let x = &states[node * d..(node + 1) * d];
            for i in 0..m {
                let yv = run.y[n][node * m + i];
                let z = &run.z[n][(node * m + i) * d..(node * m + i + 1) * d];
                let psi = problem.generator.eval(t, x, yv, z, i);
                let dki = run.dk[n][node * m + i];
                let e = lattice.moments(&run.y[n + 1], m, i, base, &shifts, &mut zbuf);
                out.max_mean_residual = out.max_mean_residual.max((dki - (e - yv + psi * dt)).abs());
                out.max_orthogonal = out.max_orthogonal.max(lattice.orthogonal_residual(&run.y[n + 1], m, i, base, &shifts, e, z));
                for (b, sft) in shifts.iter().enumerate() {
                    let next = run.y[n + 1][(base + sft) * m + i];
                    let zdw: f64 = z.iter().zip(lattice.branch_increment(b)).map(|(a, w)| a * w).sum();
                    let r = dki - (next - yv + psi * dt - zdw);
                    out.max_residual = out.max_residual.max(r.abs());
                }
            }
        }
    }
    Ok(out)
}

/// One row of a penalty schedule report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub penalty: f64,
    pub root: Vec<f64>,
    /// Violation functional per ordered pair `(i, j)`, `i != j`.
    pub violation: Vec<Vec<f64>>,
    pub total_violation: f64,
    /// `max (y^{next} - y^{this})` over nodes; nonpositive when the sequence
    /// decreases. `None` on the last entry.
    pub monotonicity_gap: Option<f64>,
    /// `max (y_ref - y^n)` over nodes; nonpositive when the penalized
    /// solution stays above the reference.
    pub reference_gap: Option<f64>,
    /// `max |y^n - y_ref|` over nodes.
    pub reference_distance: Option<f64>,
    pub minimal_condition: Vec<f64>,
    pub expected_k: Vec<f64>,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub entries: Vec<ScheduleEntry>,
    /// Least-squares slope of `log V(n)` against `log n` over entries with
    /// positive penalty and positive violation.
    pub violation_slope: Option<f64>,
    /// `(n2 y^{n2} - n1 y^{n1}) / (n2 - n1)` at the root from the last two
    /// entries, removing the leading `1/n` error term.
    pub extrapolated_root: Vec<f64>,
    pub max_monotonicity_gap: f64,
    pub max_reference_gap: Option<f64>,
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    let mut max_signed = f64::NEG_INFINITY;
    let mut max_abs = 0.0f64;
    for (la, lb) in a.iter().zip(b) {
        for (x, y) in la.iter().zip(lb) {
            max_signed = max_signed.max(x - y);
            max_abs = max_abs.max((x - y).abs());
        }
    }
    (max_signed, max_abs)
}

/// Runs a schedule of penalty levels (independently, in parallel) and
/// collects the convergence diagnostics.
pub fn run_schedule(
    problem: &Problem,
    lattice: &LatticeModel,
    schedule: &[f64],
    reference: Option<&ReflectedSolution>,
) -> Result<ScheduleReport> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SolverError::Structure("penalty schedule must be nonempty and strictly ascending".into()));
    }
    if let Some(r) = reference {
        if &r.lattice != lattice {
            return Err(SolverError::Structure("reference solution lives on another lattice".into()));
        }
    }
    let runs: Vec<PenalizedRun> =
        schedule.par_iter().map(|&n| solve_penalized(problem, lattice, n)).collect::<Result<_>>()?;
    let s = &problem.structure;
    let mut entries = Vec::with_capacity(runs.len());
    for (idx, run) in runs.iter().enumerate() {
        let violation = run.violation(s);
        let monotonicity_gap = runs.get(idx + 1).map(|next| sup_diff(&next.y, &run.y).0);
        let (reference_gap, reference_distance) = match reference {
            Some(r) => {
                let (signed, abs) = sup_diff(&r.y, &run.y);
                (Some(signed), Some(abs))
            }
            None => (None, None),
        };
        entries.push(ScheduleEntry {
            penalty: run.penalty,
            root: run.root().to_vec(),
            total_violation: violation.iter().flatten().sum(),
            violation,
            monotonicity_gap,
            reference_gap,
            reference_distance,
            minimal_condition: run.minimal_condition_residual(s),
            expected_k: run.expected_k(),
            newton_iterations: run.newton_iterations,
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = entries
        .iter()
        .filter(|e| e.penalty > 0.0 && e.total_violation > 0.0)
        .map(|e| (e.penalty.ln(), e.total_violation.ln()))
        .unzip();
    let violation_slope = if xs.len() >= 2 { Some(ls_slope(&xs, &ys)) } else { None };
    let extrapolated_root = if entries.len() >= 2 {
        let a = &entries[entries.len() - 2];
        let b = &entries[entries.len() - 1];
        a.root
            .iter()
            .zip(&b.root)
            .map(|(ya, yb)| (b.penalty * yb - a.penalty * ya) / (b.penalty - a.penalty))
            .collect()
    } else {
        entries[0].root.clone()
    };
    let max_monotonicity_gap =
        entries.iter().filter_map(|e| e.monotonicity_gap).fold(f64::NEG_INFINITY, f64::max);
    let max_reference_gap = reference.map(|_| {
        entries.iter().filter_map(|e| e.reference_gap).fold(f64::NEG_INFINITY, f64::max)
    });
    Ok(ScheduleReport { entries, violation_slope, extrapolated_root, max_monotonicity_gap, max_reference_gap })
}

/// Comparison of a penalized increasing process with the reflected one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KComparison {
    /// `max |dk^n - dk|` over nodes and modes.
    pub sup_increment: f64,
    /// `max_t |E K^n(t) - E K(t)|` per mode.
    pub sup_expected_path: Vec<f64>,
    pub penalized_mass: Vec<f64>,
    pub reflected_mass: Vec<f64>,
}

pub fn compare_k(run: &PenalizedRun, reference: &ReflectedSolution) -> Result<KComparison> {
    if run.lattice != reference.lattice || run.m != reference.m {
        return Err(SolverError::Structure("penalized and reflected solutions live on different lattices".into()));
    }
    let m = run.m;
    let probs = run.lattice.node_probabilities();
    let mut sup_increment = 0.0f64;
    let mut cum_a = vec![0.0; m];
    let mut cum_b = vec![0.0; m];
    let mut sup_path = vec![0.0f64; m];
    for n in 0..=run.lattice.steps() {
        for (node, p) in probs[n].iter().enumerate() {
            for i in 0..m {
                let a = run.dk[n][node * m + i];
                let b = reference.dk[n][node * m + i];
                sup_increment = sup_increment.max((a - b).abs());
                cum_a[i] += p * a;
                cum_b[i] += p * b;
            }
        }
        for i in 0..m {
            sup_path[i] = sup_path[i].max((cum_a[i] - cum_b[i]).abs());
        }
    }
    Ok(KComparison { sup_increment, sup_expected_path: sup_path, penalized_mass: cum_a, reflected_mass: cum_b })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::lattice::{solve_plain, solve_reflected, LatticeSpec};
    use crate::model::{GeneratorSpec, StateMap, TerminalSpec};

    fn two_mode(k: f64) -> Problem {
        let s = SwitchingStructure::uniform(2, k).unwrap();
        let g = Arc::new(GeneratorSpec::Constant { c: vec![2.0, 0.0] }.build(2, 1).unwrap());
        let t = TerminalSpec::Constant { values: vec![0.0, 0.0] }.build(&s).unwrap();
        Problem::new(s, g, t, StateMap::brownian(1))
    }

    #[test]
    fn zero_penalty_is_plain() {
        let p = two_mode(0.5);
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 16, 1)).unwrap();
        let run = solve_penalized(&p, &l, 0.0).unwrap();
        assert_eq!(run.y, solve_plain(&p, &l).unwrap().y);
        assert!(run.dk.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn inactive_constraints_ignore_penalty() {
        let p = two_mode(100.0);
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 16, 1)).unwrap();
        let a = solve_penalized(&p, &l, 1.0).unwrap();
        let b = solve_penalized(&p, &l, 1000.0).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.total_violation(&p.structure), 0.0);
    }

    #[test]
    fn schedule_on_two_mode() {
        let p = two_mode(0.5);
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 64, 1)).unwrap();
        let r = solve_reflected(&p, &l).unwrap();
        let rep = run_schedule(&p, &l, &[1.0, 10.0, 100.0], Some(&r)).unwrap();
        assert!(rep.max_monotonicity_gap <= 1e-12);
        assert!(rep.max_reference_gap.unwrap() <= 1e-12);
        let roots: Vec<f64> = rep.entries.iter().map(|e| e.root[0]).collect();
        assert!(roots[0] > roots[1] && roots[1] > roots[2] && roots[2] > 0.5);
        for e in &rep.entries {
            assert!(e.minimal_condition.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn k_identity_on_binomial() {
        let p = two_mode(0.5);
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 32, 1)).unwrap();
        let run = solve_penalized(&p, &l, 100.0).unwrap();
        let c = check_k_identity(&p, &run).unwrap();
        assert!(c.max_residual < 1e-10, "{c:?}");
        let r = solve_reflected(&p, &l).unwrap();
        let cmp = compare_k(&run, &r).unwrap();
        assert!((cmp.reflected_mass[0] - 1.5).abs() < 1e-12);
        assert!((cmp.penalized_mass[0] - 1.5).abs() < 0.05);
    }
}

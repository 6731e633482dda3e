//! Finite differences for the one-dimensional system of variational
//! inequalities and its penalized approximation.
//!
//! Implicit Euler in time. The second-order term is central; the first-order
//! term is central while the cell Peclet number `|b| h / sigma^2` stays below
//! one and upwind beyond, which keeps every linear system an M-matrix. At the
//! two ends the second derivative is set to zero and the first derivative is
//! taken one-sided towards the interior when the flow enters there.

use serde::{Deserialize, Serialize};

use crate::banded::BandMatrix;
use crate::error::{Result, SolverError};
use crate::lattice::{solve_reflected, Branching, LatticeModel, LatticeSpec};
use crate::model::{Problem, SwitchingStructure};
use crate::numeric::ls_slope;

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 200;
/// Fraction of the domain kept away from each end by the cross-checks.
pub const BOUNDARY_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub nodes: usize,
    pub steps: usize,
    pub horizon: f64,
    #[serde(default)]
    pub start_time: f64,
}

impl PdeGridSpec {
    pub fn new(x_min: f64, x_max: f64, nodes: usize, steps: usize, horizon: f64) -> Self {
        Self { x_min, x_max, nodes, steps, horizon, start_time: 0.0 }
    }

    pub fn spacing(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nodes - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.start_time) / self.steps as f64
    }

    /// Grid with `factor` times as many cells and time steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self { nodes: (self.nodes - 1) * factor + 1, steps: self.steps * factor, ..self.clone() }
    }

    pub fn time(&self, level: usize) -> f64 {
        if level == self.steps {
            self.horizon
        } else {
            self.start_time + level as f64 * self.dt()
        }
    }

    pub fn x(&self, node: usize) -> f64 {
        if node + 1 == self.nodes {
            self.x_max
        } else {
            self.x_min + node as f64 * self.spacing()
        }
    }

    /// True when `x` lies in the inner part of the domain used by the checks.
    pub fn is_interior(&self, x: f64) -> bool {
        let margin = BOUNDARY_MARGIN * (self.x_max - self.x_min);
        x >= self.x_min + margin - 1e-12 && x <= self.x_max - margin + 1e-12
    }

    fn validate(&self) -> Result<()> {
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_max > self.x_min) {
            return Err(SolverError::Structure("grid needs x_min < x_max".into()));
        }
        if self.nodes < 3 || self.steps == 0 {
            return Err(SolverError::Structure("grid needs at least 3 nodes and 1 step".into()));
        }
        if !(self.horizon > self.start_time && self.horizon.is_finite()) {
            return Err(SolverError::Structure("grid horizon must exceed its start time".into()));
        }
        Ok(())
    }
}

/// How the constraint between modes is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationalScheme {
    /// Fully implicit discrete inequality solved by policy iteration.
    #[default]
    PolicyIteration,
    /// Decoupled implicit step per mode followed by a node-wise projection.
    Splitting,
}

/// Values `u[(level * nodes + node) * m + mode]` on the whole grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdeSolution {
    pub grid: PdeGridSpec,
    pub m: usize,
    pub u: Vec<f64>,
    /// Newton or policy iterations used at each level.
    pub iterations: Vec<usize>,
}

impl PdeSolution {
    pub fn level(&self, level: usize) -> &[f64] {
        let w = self.grid.nodes * self.m;
        &self.u[level * w..(level + 1) * w]
    }

    pub fn value(&self, level: usize, node: usize) -> &[f64] {
        let i = (level * self.grid.nodes + node) * self.m;
        &self.u[i..i + self.m]
    }

    /// Linear interpolation in space at a grid level.
    pub fn interpolate(&self, level: usize, x: f64) -> Vec<f64> {
        let h = self.grid.spacing();
        let s = ((x - self.grid.x_min) / h).clamp(0.0, (self.grid.nodes - 1) as f64);
        let p = (s.floor() as usize).min(self.grid.nodes - 2);
        let w = s - p as f64;
        let a = self.value(level, p);
        let b = self.value(level, p + 1);
        a.iter().zip(b).map(|(a, b)| (1.0 - w) * a + w * b).collect()
    }

    /// Level index of time `t`, which must be a grid time.
    pub fn level_of(&self, t: f64) -> Result<usize> {
        let s = (t - self.grid.start_time) / self.grid.dt();
        let level = s.round();
        if (s - level).abs() > 1e-9 || level < 0.0 || level as usize > self.grid.steps {
            return Err(SolverError::Precondition(format!("time {t} is not on the grid")));
        }
        Ok(level as usize)
    }

    pub fn terminal_error(&self, problem: &Problem) -> f64 {
        let mut g = vec![0.0; self.m];
        let mut worst: f64 = 0.0;
        for p in 0..self.grid.nodes {
            problem.terminal.eval(&[self.grid.x(p)], &mut g);
            for (a, b) in self.value(self.grid.steps, p).iter().zip(&g) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    pub fn constraint_violation(&self, structure: &SwitchingStructure) -> f64 {
        self.u
            .chunks_exact(self.m)
            .map(|y| structure.in_closure(y, 0.0).1)
            .fold(0.0, f64::max)
    }

    /// Worst node-wise departure from `max(pde residual * dt, constraint gap) = 0`.
    pub fn complementarity(&self, problem: &Problem) -> Result<f64> {
        let op = Operator::new(problem, &self.grid)?;
        let m = self.m;
        let mut worst: f64 = 0.0;
        for level in 0..self.grid.steps {
            let t = self.grid.time(level);
            let cur = self.level(level);
            let prev = self.level(level + 1);
            for p in 0..self.grid.nodes {
                for i in 0..m {
                    let a = op.row(t, p, i, cur, prev, None) * op.dt;
                    let b = (0..m)
                        .filter(|j| *j != i)
                        .map(|j| cur[p * m + i] - cur[p * m + j] - problem.structure.cost(i, j))
                        .fold(f64::NEG_INFINITY, f64::max);
                    worst = worst.max(a.max(b).abs());
                }
            }
        }
        Ok(worst)
    }

    /// `(t, x, u_1..u_m)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, &[f64])> + '_ {
        (0..=self.grid.steps).flat_map(move |n| {
            (0..self.grid.nodes).map(move |p| (self.grid.time(n), self.grid.x(p), self.value(n, p)))
        })
    }

    /// Smallest `self - other` over all nodes.
    pub fn min_difference(&self, other: &PdeSolution) -> f64 {
        self.u.iter().zip(&other.u).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min)
    }

    pub fn sup_distance(&self, other: &PdeSolution) -> f64 {
        self.u.iter().zip(&other.u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

struct Operator<'a> {
    problem: &'a Problem,
    nodes: usize,
    m: usize,
    h: f64,
    dt: f64,
    x: Vec<f64>,
    drift: Vec<f64>,
    vol: Vec<f64>,
}

impl<'a> Operator<'a> {
    fn new(problem: &'a Problem, grid: &PdeGridSpec) -> Result<Self> {
        grid.validate()?;
        if problem.d() != 1 {
            return Err(SolverError::Structure("the finite-difference solver is one-dimensional".into()));
        }
        let lip = problem.generator.lipschitz();
        if lip * grid.dt() >= 1.0 {
            return Err(SolverError::StepSize { lipschitz: lip, dt: grid.dt() });
        }
        let x: Vec<f64> = (0..grid.nodes).map(|p| grid.x(p)).collect();
        let (drift, vol) = x.iter().map(|x| problem.state.coefficients(*x)).unzip();
        Ok(Self { problem, nodes: grid.nodes, m: problem.m(), h: grid.spacing(), dt: grid.dt(), x, drift, vol })
    }

    /// Residual of the discrete equation of mode `i` at node `p`:
    /// `(u - prev) / dt - sigma^2/2 D2 u - b D1 u - psi(u, sigma D1 u)`.
    /// With `jac`, also writes the row of its derivative scaled by `dt`.
    fn row(&self, t: f64, p: usize, i: usize, u: &[f64], prev: &[f64], jac: Option<(&mut BandMatrix, usize)>) -> f64 {
        let m = self.m;
        let (h, dt) = (self.h, self.dt);
        let idx = |q: usize| q * m + i;
        let (x, b, s) = (self.x[p], self.drift[p], self.vol[p]);
        let y = u[idx(p)];
        let last = self.nodes - 1;
        let gen = &self.problem.generator;

        let central = if p == 0 || p == last { 0.0 } else { (u[idx(p + 1)] - u[idx(p - 1)]) / (2.0 * h) };
        let beta = gen.dz(t, &[x], y, &[s * central], i, 0);
        let a = gen.dy(t, &[x], y, &[s * central], i);
        let b_eff = b + s * beta;

        // First-derivative stencil as (node, weight) pairs, and whether the
        // first-order term enters the Jacobian.
        // At an end where the flow leaves the domain there is nothing to
        // difference against, and the first-order term is dropped.
        let d1: [(usize, f64); 2];
        let mut d2 = 0.0;
        if p == 0 {
            d1 = if b_eff >= 0.0 { [(1, 1.0 / h), (0, -1.0 / h)] } else { [(0, 0.0), (0, 0.0)] };
        } else if p == last {
            d1 = if b_eff <= 0.0 { [(last, 1.0 / h), (last - 1, -1.0 / h)] } else { [(last, 0.0), (last, 0.0)] };
        } else {
            d2 = 0.5 * s * s / (h * h);
            if b_eff.abs() * h <= s * s {
                d1 = [(p + 1, 0.5 / h), (p - 1, -0.5 / h)];
            } else if b_eff > 0.0 {
                d1 = [(p + 1, 1.0 / h), (p, -1.0 / h)];
            } else {
                d1 = [(p, 1.0 / h), (p - 1, -1.0 / h)];
            }
        }
        let du: f64 = d1.iter().map(|(q, w)| w * u[idx(*q)]).sum();
        let lap = if d2 > 0.0 { d2 * (u[idx(p + 1)] - 2.0 * y + u[idx(p - 1)]) } else { 0.0 };
        let z = s * du;
        let psi = gen.eval(t, &[x], y, &[z], i);
        let residual = (y - prev[idx(p)]) / dt - lap - b * du - psi;

        if let Some((mat, r)) = jac {
            mat.add(r, idx(p), dt * (1.0 / dt - a));
            if d2 > 0.0 {
                mat.add(r, idx(p), dt * 2.0 * d2);
                mat.add(r, idx(p + 1), -dt * d2);
                mat.add(r, idx(p - 1), -dt * d2);
            }
            for (q, w) in d1 {
                if w != 0.0 {
                    mat.add(r, idx(q), -dt * b_eff * w);
                }
            }
        }
        residual
    }
}

#[derive(Clone, Copy)]
enum Coupling {
    None,
    Policy,
    Penalty(f64),
}

/// Solves one backward level in place, starting from `u = prev`.
fn solve_level(op: &Operator, t: f64, prev: &[f64], u: &mut [f64], coupling: Coupling) -> Result<usize> {
    let m = op.m;
    let n = op.nodes * m;
    let structure = &op.problem.structure;
    let band = if matches!(coupling, Coupling::None) { m } else { m.max(2 * m - 1) };
    let mut choice = vec![usize::MAX; n];
    for it in 1..=NEWTON_MAX_ITER {
        let mut mat = BandMatrix::zeros(n, band, band);
        let mut f = vec![0.0; n];
        for p in 0..op.nodes {
            for i in 0..m {
                let r = p * m + i;
                match coupling {
                    Coupling::None => {
                        f[r] = op.dt * op.row(t, p, i, u, prev, Some((&mut mat, r)));
                    }
                    Coupling::Penalty(pen) => {
                        f[r] = op.dt * op.row(t, p, i, u, prev, Some((&mut mat, r)));
                        for j in (0..m).filter(|j| *j != i) {
                            let gap = u[r] - u[p * m + j] - structure.cost(i, j);
                            if gap > 0.0 {
                                f[r] += op.dt * pen * gap;
                                mat.add(r, r, op.dt * pen);
                                mat.add(r, p * m + j, -op.dt * pen);
                            }
                        }
                    }
                    Coupling::Policy => {
                        let a = op.dt * op.row(t, p, i, u, prev, None);
                        let mut best = (a, usize::MAX);
                        for j in (0..m).filter(|j| *j != i) {
                            let gap = u[r] - u[p * m + j] - structure.cost(i, j);
                            if gap > best.0 {
                                best = (gap, j);
                            }
                        }
                        choice[r] = best.1;
                    }
                }
            }
            if let Coupling::Policy = coupling {
                break_cycles(&mut choice[p * m..(p + 1) * m]);
                for i in 0..m {
                    let r = p * m + i;
                    match choice[r] {
                        usize::MAX => f[r] = op.dt * op.row(t, p, i, u, prev, Some((&mut mat, r))),
                        j => {
                            f[r] = u[r] - u[p * m + j] - structure.cost(i, j);
                            mat.add(r, r, 1.0);
                            mat.add(r, p * m + j, -1.0);
                        }
                    }
                }
            }
        }
        let scale = 1.0 + u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !f.iter().all(|v| v.is_finite()) {
            return Err(SolverError::NonConvergence(format!("non-finite residual at t = {t}")));
        }
        mat.solve(&mut f).ok_or_else(|| SolverError::NonConvergence(format!("singular system at t = {t}")))?;
        let mut step: f64 = 0.0;
        for (v, d) in u.iter_mut().zip(&f) {
            *v -= d;
            step = step.max(d.abs());
        }
        if step <= NEWTON_TOL * scale {
            return Ok(it);
        }
    }
    Err(SolverError::NonConvergence(format!(
        "level at t = {t} did not converge in {NEWTON_MAX_ITER} iterations"
    )))
}

/// Drops constraint rows that would close a cycle of equalities at one node.
fn break_cycles(choice: &mut [usize]) {
    let m = choice.len();
    for start in 0..m {
        let mut cur = start;
        for _ in 0..m {
            match choice[cur] {
                usize::MAX => break,
                next if next == start => {
                    choice[start] = usize::MAX;
                    break;
                }
                next => cur = next,
            }
        }
    }
}

fn terminal_layer(problem: &Problem, grid: &PdeGridSpec, m: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; grid.nodes * m];
    for p in 0..grid.nodes {
        let g = &mut out[p * m..(p + 1) * m];
        problem.terminal.eval(&[grid.x(p)], g);
        let (ok, worst) = problem.structure.in_closure(g, 0.0);
        if !ok {
            return Err(SolverError::Precondition(format!(
                "terminal payoff at x = {} leaves the constraint domain by {worst}",
                grid.x(p)
            )));
        }
    }
    Ok(out)
}

fn march<F>(problem: &Problem, grid: &PdeGridSpec, mut step: F) -> Result<PdeSolution>
where
    F: FnMut(&Operator, f64, &[f64], &mut [f64]) -> Result<usize>,
{
    let op = Operator::new(problem, grid)?;
    let m = problem.m();
    let w = grid.nodes * m;
    let mut u = vec![0.0; (grid.steps + 1) * w];
    u[grid.steps * w..].copy_from_slice(&terminal_layer(problem, grid, m)?);
    let mut iterations = vec![0; grid.steps];
    for level in (0..grid.steps).rev() {
        let (head, tail) = u.split_at_mut((level + 1) * w);
        let prev = &tail[..w];
        let cur = &mut head[level * w..];
        cur.copy_from_slice(prev);
        iterations[level] = step(&op, grid.time(level), prev, cur)?;
    }
    Ok(PdeSolution { grid: grid.clone(), m, u, iterations })
}

/// Solves the discrete system of variational inequalities.
pub fn solve_vi(problem: &Problem, grid: &PdeGridSpec, scheme: VariationalScheme) -> Result<PdeSolution> {
    match scheme {
        VariationalScheme::PolicyIteration => {
            march(problem, grid, |op, t, prev, cur| solve_level(op, t, prev, cur, Coupling::Policy))
        }
        VariationalScheme::Splitting => march(problem, grid, |op, t, prev, cur| {
            let it = solve_level(op, t, prev, cur, Coupling::None)?;
            for y in cur.chunks_exact_mut(op.m) {
                op.problem.structure.project(y)?;
            }
            Ok(it)
        }),
    }
}

/// Solves the penalized system with penalty `n`; `n = 0` decouples the modes.
pub fn solve_penalized_pde(problem: &Problem, grid: &PdeGridSpec, penalty: f64) -> Result<PdeSolution> {
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(SolverError::Precondition("penalty must be finite and non-negative".into()));
    }
    let coupling = if penalty == 0.0 { Coupling::None } else { Coupling::Penalty(penalty) };
    march(problem, grid, |op, t, prev, cur| solve_level(op, t, prev, cur, coupling))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeynmanKacRow {
    pub t: f64,
    pub x: f64,
    pub mode: usize,
    pub pde: f64,
    pub lattice: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeynmanKacReport {
    pub rows: Vec<FeynmanKacRow>,
    pub max_gap: f64,
}

/// Compares grid values with the reflected lattice solution restarted at
/// each sample point `(t, x)`.
pub fn feynman_kac_check(
    problem: &Problem,
    solution: &PdeSolution,
    lattice_steps: usize,
    branching: Branching,
    points: &[(f64, f64)],
) -> Result<FeynmanKacReport> {
    let mut rows = Vec::new();
    for &(t, x) in points {
        if !solution.grid.is_interior(x) {
            return Err(SolverError::Precondition(format!(
                "sample point x = {x} is too close to the boundary of [{}, {}]",
                solution.grid.x_min, solution.grid.x_max
            )));
        }
        let level = solution.level_of(t)?;
        let pde = solution.interpolate(level, x);
        let y = if level == solution.grid.steps {
            let mut g = vec![0.0; solution.m];
            problem.terminal.eval(&[x], &mut g);
            g
        } else {
            let spec = LatticeSpec::new(solution.grid.horizon, lattice_steps, 1).branching(branching).start_time(t);
            let lattice = LatticeModel::new(&spec)?;
            solve_reflected(&problem.restarted(&[x]), &lattice)?.root().to_vec()
        };
        for (mode, (p, l)) in pde.iter().zip(&y).enumerate() {
            rows.push(FeynmanKacRow { t, x, mode, pde: *p, lattice: *l, gap: (p - l).abs() });
        }
    }
    let max_gap = rows.iter().map(|r| r.gap).fold(0.0, f64::max);
    Ok(FeynmanKacReport { rows, max_gap })
}

/// `count` sample points spread over the inner part of the domain at `t`.
pub fn interior_points(grid: &PdeGridSpec, t: f64, count: usize) -> Vec<(f64, f64)> {
    let len = grid.x_max - grid.x_min;
    let lo = grid.x_min + BOUNDARY_MARGIN * len;
    let hi = grid.x_max - BOUNDARY_MARGIN * len;
    (0..count)
        .map(|k| {
            let s = if count == 1 { 0.5 } else { k as f64 / (count - 1) as f64 };
            (t, lo + s * (hi - lo))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub factor: usize,
    pub h: f64,
    pub dt: f64,
    pub lattice_steps: usize,
    pub max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStudy {
    pub levels: Vec<RefinementLevel>,
    /// Least-squares fit `gap ~ constant * h^order`. Space and time are
    /// refined together, so `h` stands for both.
    pub order: f64,
    pub constant: f64,
    pub decreasing: bool,
}

/// Refines the grid and the lattice together and records the worst
/// cross-method gap at each resolution.
pub fn refinement_study(
    problem: &Problem,
    base: &PdeGridSpec,
    factors: &[usize],
    lattice_steps: usize,
    points: &[(f64, f64)],
    scheme: VariationalScheme,
) -> Result<RefinementStudy> {
    let mut levels = Vec::with_capacity(factors.len());
    for &factor in factors {
        let grid = base.refined(factor);
        let sol = solve_vi(problem, &grid, scheme)?;
        let steps = lattice_steps * factor;
        let report = feynman_kac_check(problem, &sol, steps, Branching::Binomial, points)?;
        levels.push(RefinementLevel { factor, h: grid.spacing(), dt: grid.dt(), lattice_steps: steps, max_gap: report.max_gap });
    }
    let xs: Vec<f64> = levels.iter().map(|l| l.h.ln()).collect();
    let ys: Vec<f64> = levels.iter().map(|l| l.max_gap.max(f64::MIN_POSITIVE).ln()).collect();
    let (order, constant) = if levels.len() >= 2 {
        let order = ls_slope(&xs, &ys);
        let mean = xs.iter().zip(&ys).map(|(x, y)| y - order * x).sum::<f64>() / xs.len() as f64;
        (order, mean.exp())
    } else {
        (f64::NAN, f64::NAN)
    };
    let decreasing = levels.windows(2).all(|w| w[1].max_gap < w[0].max_gap);
    Ok(RefinementStudy { levels, order, constant, decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeneratorSpec, ProblemSpec, StateMap, TerminalSpec};

    fn problem(generator: GeneratorSpec, terminal: TerminalSpec, k: f64, state: StateMap) -> Problem {
        ProblemSpec {
            costs: SwitchingStructure::uniform(2, k).unwrap(),
            generator,
            terminal,
            state: Some(state),
            horizon: 1.0,
            dim: 1,
        }
        .build()
        .unwrap()
    }

    fn arithmetic(vol: f64, drift: f64) -> StateMap {
        StateMap::Arithmetic { x0: vec![0.0], drift: vec![drift], vol: vec![vol] }
    }

    #[test]
    fn constants_are_exact() {
        let p = problem(
            GeneratorSpec::Constant { c: vec![0.0, 0.0] },
            TerminalSpec::Constant { values: vec![0.3, 0.1] },
            0.5,
            arithmetic(0.7, 0.4),
        );
        let grid = PdeGridSpec::new(-2.0, 2.0, 41, 20, 1.0);
        for scheme in [VariationalScheme::PolicyIteration, VariationalScheme::Splitting] {
            let s = solve_vi(&p, &grid, scheme).unwrap();
            for y in s.u.chunks_exact(2) {
                assert!((y[0] - 0.3).abs() < 1e-12 && (y[1] - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_terminal_is_exact() {
        let p = problem(
            GeneratorSpec::Constant { c: vec![1.0, 2.0] },
            TerminalSpec::Affine { slope: vec![1.0, 1.0], intercept: vec![0.0, 0.0] },
            100.0,
            arithmetic(0.5, 0.0),
        );
        let grid = PdeGridSpec::new(-2.0, 2.0, 21, 10, 1.0);
        let s = solve_vi(&p, &grid, VariationalScheme::PolicyIteration).unwrap();
        for n in 0..=10 {
            let tau = 1.0 - grid.time(n);
            for q in 1..20 {
                let x = grid.x(q);
                let v = s.value(n, q);
                assert!((v[0] - (x + tau)).abs() < 1e-10, "{} vs {}", v[0], x + tau);
                assert!((v[1] - (x + 2.0 * tau)).abs() < 1e-10);
            }
        }
        assert_eq!(s.terminal_error(&p), 0.0);
    }

    #[test]
    fn deterministic_two_mode() {
        let p = problem(
            GeneratorSpec::Constant { c: vec![2.0, 0.0] },
            TerminalSpec::Constant { values: vec![0.0, 0.0] },
            0.5,
            arithmetic(0.01, 0.0),
        );
        let grid = PdeGridSpec::new(-1.0, 1.0, 21, 40, 1.0);
        let s = solve_vi(&p, &grid, VariationalScheme::PolicyIteration).unwrap();
        for q in 0..21 {
            assert!((s.value(0, q)[0] - 0.5).abs() < 1e-12);
            assert!(s.value(0, q)[1].abs() < 1e-12);
        }
        assert!(s.constraint_violation(&p.structure) <= 1e-12);
        assert!(s.complementarity(&p).unwrap() < 1e-10);
    }

    #[test]
    fn zero_penalty_decouples() {
        let p = problem(
            GeneratorSpec::Constant { c: vec![2.0, 0.0] },
            TerminalSpec::Constant { values: vec![0.0, 0.0] },
            0.5,
            arithmetic(0.3, 0.0),
        );
        let grid = PdeGridSpec::new(-1.0, 1.0, 11, 10, 1.0);
        let s = solve_penalized_pde(&p, &grid, 0.0).unwrap();
        assert!((s.value(0, 5)[0] - 2.0).abs() < 1e-12);
        let s10 = solve_penalized_pde(&p, &grid, 10.0).unwrap();
        let vi = solve_vi(&p, &grid, VariationalScheme::PolicyIteration).unwrap();
        assert!(s.min_difference(&s10) >= -1e-9);
        assert!(s10.min_difference(&vi) >= -1e-9);
    }

    #[test]
    fn boundary_points_rejected() {
        let p = problem(
            GeneratorSpec::Constant { c: vec![0.0, 0.0] },
            TerminalSpec::Constant { values: vec![0.0, 0.0] },
            0.5,
            arithmetic(0.3, 0.0),
        );
        let grid = PdeGridSpec::new(-1.0, 1.0, 11, 10, 1.0);
        let s = solve_vi(&p, &grid, VariationalScheme::PolicyIteration).unwrap();
        let err = feynman_kac_check(&p, &s, 10, Branching::Binomial, &[(0.0, 0.95)]).unwrap_err();
        assert!(matches!(err, SolverError::Precondition(_)));
        let ok = feynman_kac_check(&p, &s, 10, Branching::Binomial, &interior_points(&grid, 0.0, 3)).unwrap();
        assert!(ok.max_gap <= 1e-10);
    }
}

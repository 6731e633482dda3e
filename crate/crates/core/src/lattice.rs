//! Recombining lattices for the driving Brownian motion and exact backward
//! induction on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};
use crate::model::{Problem, SwitchingStructure};

pub const DEFAULT_NODE_CAP: u128 = 50_000_000;
/// Residual target of the implicit fixed-point step.
pub const IMPLICIT_TOL: f64 = 1e-13;
pub const IMPLICIT_MAX_ITER: usize = 50;
/// Levels smaller than this are processed on the calling thread.
const PAR_MIN_NODES: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Branching {
    /// `+-sqrt(dt)` per dimension with probability 1/2 each.
    Binomial,
    /// Gauss-Hermite rule with `nodes` points per dimension. Only the
    /// equispaced rules (2 and 3 points) recombine.
    GaussHermite { nodes: usize },
}

impl Default for Branching {
    fn default() -> Self {
        Branching::Binomial
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub branching: Branching,
    /// Time of the root level.
    #[serde(default)]
    pub start_time: f64,
    #[serde(default = "default_cap")]
    pub node_cap: u128,
}

fn one() -> usize {
    1
}

fn default_cap() -> u128 {
    DEFAULT_NODE_CAP
}

impl LatticeSpec {
    pub fn new(horizon: f64, steps: usize, dim: usize) -> Self {
        Self { horizon, steps, dim, branching: Branching::Binomial, start_time: 0.0, node_cap: DEFAULT_NODE_CAP }
    }

    pub fn branching(mut self, branching: Branching) -> Self {
        self.branching = branching;
        self
    }

    pub fn start_time(mut self, t: f64) -> Self {
        self.start_time = t;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    offsets: Vec<usize>,
    dw: Vec<f64>,
    prob: f64,
}

/// Recombining tree. Nodes of a level are flattened in mixed radix, the
/// first Brownian coordinate being the fastest digit.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeModel {
    start: f64,
    horizon: f64,
    steps: usize,
    dt: f64,
    d: usize,
    branching: Branching,
    q: usize,
    spacing: f64,
    branches: Vec<Branch>,
}

impl LatticeModel {
    pub fn new(spec: &LatticeSpec) -> Result<Self> {
        let LatticeSpec { horizon, steps, dim: d, branching, start_time, node_cap } = *spec;
        if !(horizon.is_finite() && start_time.is_finite() && horizon > start_time) {
            return Err(SolverError::Structure(format!(
                "lattice horizon {horizon} must exceed the start time {start_time}"
            )));
        }
        if steps == 0 || d == 0 {
            return Err(SolverError::Structure("lattice needs at least one step and one dimension".into()));
        }
        let dt = (horizon - start_time) / steps as f64;
        let (q, spacing, weights): (usize, f64, Vec<f64>) = match branching {
            Branching::Binomial | Branching::GaussHermite { nodes: 2 } => (2, 2.0 * dt.sqrt(), vec![0.5, 0.5]),
            Branching::GaussHermite { nodes: 3 } => {
                (3, (3.0 * dt).sqrt(), vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
            }
            Branching::GaussHermite { nodes } => {
                return Err(SolverError::Structure(format!(
                    "Gauss-Hermite rule with {nodes} points does not recombine; use 2 or 3"
                )))
            }
        };
        let mut needed: u128 = 0;
        for n in 0..=steps {
            needed = needed.saturating_add(((n * (q - 1) + 1) as u128).saturating_pow(d as u32));
        }
        if needed > node_cap {
            return Err(SolverError::Capacity { what: "lattice nodes".into(), needed, cap: node_cap });
        }
        let half = (q - 1) as f64 / 2.0;
        let count = q.pow(d as u32);
        let mut branches = Vec::with_capacity(count);
        for b in 0..count {
            let mut rem = b;
            let mut offsets = Vec::with_capacity(d);
            let mut dw = Vec::with_capacity(d);
            let mut prob = 1.0;
            for _ in 0..d {
                let c = rem % q;
                rem /= q;
                offsets.push(c);
                dw.push((c as f64 - half) * spacing);
                prob *= weights[c];
            }
            branches.push(Branch { offsets, dw, prob });
        }
        Ok(Self { start: start_time, horizon, steps, dt, d, branching, q, spacing, branches })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn start_time(&self) -> f64 {
        self.start
    }

    pub fn branching(&self) -> Branching {
        self.branching
    }

    pub fn time(&self, level: usize) -> f64 {
        if level == self.steps {
            self.horizon
        } else {
            self.start + level as f64 * self.dt
        }
    }

    pub fn elapsed(&self, level: usize) -> f64 {
        self.time(level) - self.start
    }

    /// Points per dimension at `level`.
    pub fn width(&self, level: usize) -> usize {
        level * (self.q - 1) + 1
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.width(level).pow(self.d as u32)
    }

    pub fn total_nodes(&self) -> usize {
        (0..=self.steps).map(|n| self.level_size(n)).sum()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn branch_prob(&self, b: usize) -> f64 {
        self.branches[b].prob
    }

    pub fn branch_increment(&self, b: usize) -> &[f64] {
        &self.branches[b].dw
    }

    /// True when one step's increments span the whole one-step probability
    /// space, so that every attainable variable is `E + Z . dW`.
    pub fn is_complete(&self) -> bool {
        self.d == 1 && self.q == 2
    }

    /// Brownian coordinates of `node` at `level`.
    pub fn brownian(&self, level: usize, node: usize, out: &mut [f64]) {
        let w = self.width(level);
        let centre = (level * (self.q - 1)) as f64 / 2.0;
        let mut rem = node;
        for o in out.iter_mut().take(self.d) {
            let k = rem % w;
            rem /= w;
            *o = (k as f64 - centre) * self.spacing;
        }
    }

    /// Index of the node at `level` closest to the Brownian point `w`.
    pub fn nearest_node(&self, level: usize, w: &[f64]) -> usize {
        let width = self.width(level);
        let centre = (level * (self.q - 1)) as f64 / 2.0;
        let mut node = 0;
        let mut stride = 1;
        for &wk in w.iter().take(self.d) {
            let k = (wk / self.spacing + centre).round().clamp(0.0, (width - 1) as f64) as usize;
            node += k * stride;
            stride *= width;
        }
        node
    }

    /// Flat index offsets, at `level + 1`, of every branch relative to
    /// [`LatticeModel::child_base`].
    pub fn branch_shifts(&self, level: usize) -> Vec<usize> {
        let w1 = self.width(level + 1);
        self.branches
            .iter()
            .map(|b| {
                let mut stride = 1;
                let mut s = 0;
                for &o in &b.offsets {
                    s += o * stride;
                    stride *= w1;
                }
                s
            })
            .collect()
    }

    /// Index at `level + 1` of the lowest child of `node`.
    pub fn child_base(&self, level: usize, node: usize) -> usize {
        let w = self.width(level);
        let w1 = self.width(level + 1);
        let mut rem = node;
        let mut stride = 1;
        let mut base = 0;
        for _ in 0..self.d {
            base += (rem % w) * stride;
            rem /= w;
            stride *= w1;
        }
        base
    }

    /// Unconditional probability of every node at every level.
    pub fn node_probabilities(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.steps + 1);
        out.push(vec![1.0]);
        for n in 0..self.steps {
            let shifts = self.branch_shifts(n);
            let mut next = vec![0.0; self.level_size(n + 1)];
            for (node, p) in out[n].iter().enumerate() {
                let base = self.child_base(n, node);
                for (b, s) in shifts.iter().enumerate() {
                    next[base + s] += p * self.branches[b].prob;
                }
            }
            out.push(next);
        }
        out
    }

    /// Conditional mean and the regression coefficient on the increments of
    /// `values[child * stride + offset]` over the children of `node`.
    #[inline]
    pub(crate) fn moments(
        &self,
        values: &[f64],
        stride: usize,
        offset: usize,
        base: usize,
        shifts: &[usize],
        z: &mut [f64],
    ) -> f64 {
        let mut e = 0.0;
        z.iter_mut().for_each(|v| *v = 0.0);
        for (b, s) in shifts.iter().enumerate() {
            let br = &self.branches[b];
            let v = values[(base + s) * stride + offset];
            e += br.prob * v;
            for (zk, dw) in z.iter_mut().zip(&br.dw) {
                *zk += br.prob * v * dw;
            }
        }
        z.iter_mut().for_each(|v| *v /= self.dt);
        e
    }

    /// `max |v(child) - E - Z.dW|` over the children: the part of the
    /// next-level variable not spanned by the increments.
    pub(crate) fn orthogonal_residual(
        &self,
        values: &[f64],
        stride: usize,
        offset: usize,
        base: usize,
        shifts: &[usize],
        e: f64,
        z: &[f64],
    ) -> f64 {
        let mut worst = 0.0f64;
        for (b, s) in shifts.iter().enumerate() {
            let br = &self.branches[b];
            let v = values[(base + s) * stride + offset];
            let fit = e + z.iter().zip(&br.dw).map(|(a, b)| a * b).sum::<f64>();
            worst = worst.max((v - fit).abs());
        }
        worst
    }
}

/// Solves `y = e + dt * psi(y)` by fixed-point iteration.
pub(crate) fn implicit_step(
    problem: &Problem,
    t: f64,
    x: &[f64],
    e: f64,
    z: &[f64],
    mode: usize,
    dt: f64,
) -> Result<f64> {
    let g = &problem.generator;
    let mut y = e;
    for _ in 0..IMPLICIT_MAX_ITER {
        let next = e + dt * g.eval(t, x, y, z, mode);
        if !next.is_finite() {
            return Err(SolverError::NonConvergence(format!("non-finite implicit step at t = {t}")));
        }
        if (next - y).abs() <= IMPLICIT_TOL * (1.0 + next.abs()) {
            return Ok(next);
        }
        y = next;
    }
    Err(SolverError::NonConvergence(format!(
        "implicit step at t = {t} did not reach {IMPLICIT_TOL} in {IMPLICIT_MAX_ITER} iterations"
    )))
}

pub(crate) fn check_step_size(problem: &Problem, lattice: &LatticeModel) -> Result<()> {
    let c = problem.generator.lipschitz();
    if c * lattice.dt() >= 1.0 {
        return Err(SolverError::StepSize { lipschitz: c, dt: lattice.dt() });
    }
    Ok(())
}

pub(crate) fn check_dims(problem: &Problem, lattice: &LatticeModel) -> Result<()> {
    if problem.d() != lattice.dim() {
        return Err(SolverError::Structure(format!(
            "problem state has dimension {} but the lattice has {}",
            problem.d(),
            lattice.dim()
        )));
    }
    Ok(())
}

/// Terminal payoff at every node of the last level, checked against the
/// constraint domain.
pub(crate) fn terminal_level(problem: &Problem, lattice: &LatticeModel) -> Result<Vec<f64>> {
    let m = problem.m();
    let d = lattice.dim();
    let n = lattice.steps();
    let size = lattice.level_size(n);
    let mut out = vec![0.0; size * m];
    let mut w = vec![0.0; d];
    let mut x = vec![0.0; d];
    for node in 0..size {
        lattice.brownian(n, node, &mut w);
        problem.state.eval(lattice.elapsed(n), &w, &mut x);
        let slot = &mut out[node * m..(node + 1) * m];
        problem.terminal.eval(&x, slot);
        if slot.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Precondition(format!("terminal payoff is not finite at x = {x:?}")));
        }
        let (ok, worst) = problem.structure.in_closure(slot, 0.0);
        if !ok {
            return Err(SolverError::Precondition(format!(
                "terminal payoff at x = {x:?} violates the constraint domain by {worst}"
            )));
        }
    }
    Ok(out)
}

/// State at every node of `level`.
pub(crate) fn level_states(problem: &Problem, lattice: &LatticeModel, level: usize) -> Vec<f64> {
    let d = lattice.dim();
    let size = lattice.level_size(level);
    let mut out = vec![0.0; size * d];
    let mut w = vec![0.0; d];
    for node in 0..size {
        lattice.brownian(level, node, &mut w);
        problem.state.eval(lattice.elapsed(level), &w, &mut out[node * d..(node + 1) * d]);
    }
    out
}

/// Runs `f(node, out)` over a level, in parallel on large levels. The
/// per-node work is pure, so the result does not depend on the split.
pub(crate) fn for_level<F>(out: &mut [f64], chunk: usize, f: F) -> Result<()>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    if out.len() / chunk.max(1) >= PAR_MIN_NODES {
        out.par_chunks_mut(chunk).enumerate().with_min_len(256).try_for_each(|(i, c)| f(i, c))
    } else {
        out.chunks_mut(chunk).enumerate().try_for_each(|(i, c)| f(i, c))
    }
}

/// Unreflected per-mode solution.
#[derive(Debug, Clone)]
pub struct PlainSolution {
    pub lattice: LatticeModel,
    pub m: usize,
    /// `y[level][node * m + i]`.
    pub y: Vec<Vec<f64>>,
    /// `z[level][(node * m + i) * d + k]`; empty at the last level.
    pub z: Vec<Vec<f64>>,
}

impl PlainSolution {
    pub fn root(&self) -> &[f64] {
        &self.y[0][..self.m]
    }
}

/// Backward induction of the `m` decoupled equations.
pub fn solve_plain(problem: &Problem, lattice: &LatticeModel) -> Result<PlainSolution> {
    check_dims(problem, lattice)?;
    check_step_size(problem, lattice)?;
    let m = problem.m();
    let d = lattice.dim();
    let steps = lattice.steps();
    let mut y = vec![Vec::new(); steps + 1];
    let mut z = vec![Vec::new(); steps + 1];
    y[steps] = terminal_level(problem, lattice)?;
    for n in (0..steps).rev() {
        let size = lattice.level_size(n);
        let states = level_states(problem, lattice, n);
        let shifts = lattice.branch_shifts(n);
        let next = &y[n + 1];
        let t = lattice.time(n);
        let mut level = vec![0.0; size * m * (1 + d)];
        for_level(&mut level, m * (1 + d), |node, out| {
            let base = lattice.child_base(n, node);
            let x = &states[node * d..(node + 1) * d];
            let (yv, zv) = out.split_at_mut(m);
            for i in 0..m {
                let zi = &mut zv[i * d..(i + 1) * d];
                let e = lattice.moments(next, m, i, base, &shifts, zi);
                yv[i] = implicit_step(problem, t, x, e, zi, i, lattice.dt())?;
            }
            Ok(())
        })?;
        let (yl, zl) = split_level(&level, size, m, d);
        y[n] = yl;
        z[n] = zl;
    }
    Ok(PlainSolution { lattice: lattice.clone(), m, y, z })
}

fn split_level(level: &[f64], size: usize, m: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = Vec::with_capacity(size * m);
    let mut z = Vec::with_capacity(size * m * d);
    for chunk in level.chunks(m * (1 + d)) {
        y.extend_from_slice(&chunk[..m]);
        z.extend_from_slice(&chunk[m..]);
    }
    (y, z)
}

/// Discrete reflected solution on a lattice.
#[derive(Debug, Clone)]
pub struct ReflectedSolution {
    pub lattice: LatticeModel,
    pub structure: SwitchingStructure,
    pub m: usize,
    /// Post-reflection values `y[level][node * m + i]`.
    pub y: Vec<Vec<f64>>,
    /// Pre-reflection values.
    pub y_pre: Vec<Vec<f64>>,
    /// `z[level][(node * m + i) * d + k]`; empty at the last level.
    pub z: Vec<Vec<f64>>,
    /// Reflection increments `y_pre - y`, nonnegative.
    pub dk: Vec<Vec<f64>>,
}

/// One row of the per-level dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRow {
    pub level: usize,
    pub time: f64,
    pub node: usize,
    pub y: Vec<f64>,
    pub dk: Vec<f64>,
}

/// Summary diagnostics of a reflected solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectedSummary {
    pub root: Vec<f64>,
    /// `max_i (y_i - min_{j != i}(y_j + k(i,j)))` over all nodes; `<= 0` in the domain.
    pub max_violation: f64,
    /// `sum |(y_i - min_{j != i}(y_j + k(i,j))) * dk_i|` over all nodes.
    pub skorokhod_residual: f64,
    pub min_increment: f64,
    /// Expected total reflection per mode.
    pub expected_k: Vec<f64>,
}

impl ReflectedSolution {
    pub fn root(&self) -> &[f64] {
        &self.y[0][..self.m]
    }

    pub fn node_values(&self, level: usize, node: usize) -> &[f64] {
        &self.y[level][node * self.m..(node + 1) * self.m]
    }

    pub fn max_violation(&self) -> f64 {
        let s = &self.structure;
        if self.m == 1 {
            return f64::NEG_INFINITY;
        }
        self.y
            .iter()
            .flat_map(|lvl| lvl.chunks(self.m))
            .map(|y| s.in_closure(y, 0.0).1)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn skorokhod_residual(&self) -> f64 {
        let s = &self.structure;
        let m = self.m;
        let mut total = 0.0;
        for (yl, kl) in self.y.iter().zip(&self.dk) {
            for (y, k) in yl.chunks(m).zip(kl.chunks(m)) {
                for i in 0..m {
                    if k[i] != 0.0 {
                        total += ((y[i] - s.switch_floor(y, i)) * k[i]).abs();
                    }
                }
            }
        }
        total
    }

    pub fn min_increment(&self) -> f64 {
        self.dk.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

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

    pub fn summary(&self) -> ReflectedSummary {
        ReflectedSummary {
            root: self.root().to_vec(),
            max_violation: self.max_violation(),
            skorokhod_residual: self.skorokhod_residual(),
            min_increment: self.min_increment(),
            expected_k: self.expected_k(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = LevelRow> + '_ {
        let m = self.m;
        self.y.iter().zip(&self.dk).enumerate().flat_map(move |(level, (yl, kl))| {
            let time = self.lattice.time(level);
            yl.chunks(m).zip(kl.chunks(m)).enumerate().map(move |(node, (y, k))| LevelRow {
                level,
                time,
                node,
                y: y.to_vec(),
                dk: k.to_vec(),
            })
        })
    }
}

/// Reflected dynamic programme: at every level an implicit step per mode,
/// then the oblique projection of the node's value vector.
pub fn solve_reflected(problem: &Problem, lattice: &LatticeModel) -> Result<ReflectedSolution> {
    check_dims(problem, lattice)?;
    check_step_size(problem, lattice)?;
    let m = problem.m();
    let d = lattice.dim();
    let steps = lattice.steps();
    let structure = &problem.structure;
    let mut y = vec![Vec::new(); steps + 1];
    let mut y_pre = vec![Vec::new(); steps + 1];
    let mut z = vec![Vec::new(); steps + 1];
    let mut dk = vec![Vec::new(); steps + 1];
    let terminal = terminal_level(problem, lattice)?;
    dk[steps] = vec![0.0; terminal.len()];
    y_pre[steps] = terminal.clone();
    y[steps] = terminal;
    let width = m * (2 + d);
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
            let (pre, rest) = out.split_at_mut(m);
            let (post, zv) = rest.split_at_mut(m);
            for i in 0..m {
                let zi = &mut zv[i * d..(i + 1) * d];
                let e = lattice.moments(next, m, i, base, &shifts, zi);
                pre[i] = implicit_step(problem, t, x, e, zi, i, lattice.dt())?;
            }
            post.copy_from_slice(pre);
            structure.project(post)
        })?;
        let mut yl = Vec::with_capacity(size * m);
        let mut pl = Vec::with_capacity(size * m);
        let mut zl = Vec::with_capacity(size * m * d);
        let mut kl = Vec::with_capacity(size * m);
        for chunk in level.chunks(width) {
            pl.extend_from_slice(&chunk[..m]);
            yl.extend_from_slice(&chunk[m..2 * m]);
            zl.extend_from_slice(&chunk[2 * m..]);
            kl.extend(chunk[..m].iter().zip(&chunk[m..2 * m]).map(|(a, b)| a - b));
        }
        y[n] = yl;
        y_pre[n] = pl;
        z[n] = zl;
        dk[n] = kl;
    }
    Ok(ReflectedSolution { lattice: lattice.clone(), structure: structure.clone(), m, y, y_pre, z, dk })
}

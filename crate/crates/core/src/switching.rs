//! Switching strategies on a lattice, the value of the switched equation
//! along a strategy, and exhaustive enumeration for small instances.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};
use crate::lattice::{
    check_dims, check_step_size, implicit_step, level_states, terminal_level, LatticeModel,
};
use crate::model::Problem;

/// Default bound on the number of strategies an enumeration may visit.
pub const DEFAULT_STRATEGY_CAP: u128 = 1 << 22;

/// Switching strategy in feedback form.
///
/// At every level and node the strategy sees the mode held so far (the
/// incoming mode) and picks the mode to hold over the next step, paying the
/// switching cost when they differ. The decision at the last level is a
/// switch at the horizon. Decisions depend on the node only, so the
/// strategy is adapted by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub m: usize,
    pub start_mode: usize,
    /// `decisions[level][node * m + incoming]`.
    pub decisions: Vec<Vec<u32>>,
}

/// One switch along a lattice path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub level: usize,
    pub time: f64,
    pub node: usize,
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

/// Per-scenario description of a strategy: the branch taken at every step
/// and the switches performed along the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub branches: Vec<usize>,
    /// `(level, new mode)` pairs in nondecreasing level order.
    pub switches: Vec<(usize, usize)>,
}

impl Strategy {
    /// Never switch.
    pub fn constant(lattice: &LatticeModel, m: usize, mode: usize) -> Self {
        Self::from_rule(lattice, m, mode, |_, _, incoming| incoming)
    }

    /// Builds the decision table from `rule(level, node, incoming)`.
    pub fn from_rule<F>(lattice: &LatticeModel, m: usize, start_mode: usize, mut rule: F) -> Self
    where
        F: FnMut(usize, usize, usize) -> usize,
    {
        let decisions = (0..=lattice.steps())
            .map(|n| {
                let size = lattice.level_size(n);
                let mut row = Vec::with_capacity(size * m);
                for node in 0..size {
                    for j in 0..m {
                        row.push(rule(n, node, j) as u32);
                    }
                }
                row
            })
            .collect();
        Self { m, start_mode, decisions }
    }

    /// Switch along a time schedule: at level `n` go to `schedule[n]`
    /// whatever the node; `None` keeps the current mode.
    pub fn from_schedule(lattice: &LatticeModel, m: usize, start_mode: usize, schedule: &[Option<usize>]) -> Self {
        Self::from_rule(lattice, m, start_mode, |n, _, j| schedule.get(n).copied().flatten().unwrap_or(j))
    }

    /// Builds a feedback strategy from per-path switch lists. Scenarios that
    /// share a history must agree on the decision taken at its end, or the
    /// strategy would look into the future. Scenarios that reach the same
    /// node with the same incoming mode must also agree, since a feedback
    /// table cannot distinguish them.
    pub fn from_scenarios(
        lattice: &LatticeModel,
        m: usize,
        start_mode: usize,
        scenarios: &[Scenario],
    ) -> Result<Self> {
        let steps = lattice.steps();
        let mut history: HashMap<(usize, Vec<usize>, usize), usize> = HashMap::new();
        let mut table: Vec<HashMap<(usize, usize), usize>> = vec![HashMap::new(); steps + 1];
        for (sid, sc) in scenarios.iter().enumerate() {
            if sc.branches.len() != steps || sc.branches.iter().any(|&b| b >= lattice.branch_count()) {
                return Err(SolverError::Structure(format!("scenario {sid} is not a full lattice path")));
            }
            if sc.switches.windows(2).any(|w| w[0].0 > w[1].0)
                || sc.switches.iter().any(|&(l, to)| l > steps || to >= m)
            {
                return Err(SolverError::Structure(format!("scenario {sid} has malformed switches")));
            }
            let mut node = 0;
            let mut mode = start_mode;
            let mut next_switch = 0;
            for n in 0..=steps {
                // Several switches at one instant compose into a single move.
                let incoming = mode;
                while next_switch < sc.switches.len() && sc.switches[next_switch].0 == n {
                    mode = sc.switches[next_switch].1;
                    next_switch += 1;
                }
                let key = (n, sc.branches[..n].to_vec(), incoming);
                if let Some(&prev) = history.get(&key) {
                    if prev != mode {
                        return Err(SolverError::Adaptedness(format!(
                            "scenario {sid} decides mode {mode} at level {n}, another scenario with the same history decides {prev}"
                        )));
                    }
                } else {
                    history.insert(key, mode);
                }
                match table[n].get(&(node, incoming)) {
                    Some(&prev) if prev != mode => {
                        return Err(SolverError::Structure(format!(
                            "scenario {sid} is path dependent at level {n} node {node} and has no feedback form"
                        )))
                    }
                    _ => {
                        table[n].insert((node, incoming), mode);
                    }
                }
                if n < steps {
                    let shifts = lattice.branch_shifts(n);
                    node = lattice.child_base(n, node) + shifts[sc.branches[n]];
                }
            }
        }
        Ok(Self::from_rule(lattice, m, start_mode, |n, node, j| {
            table[n].get(&(node, j)).copied().unwrap_or(j)
        }))
    }

    #[inline]
    pub fn decide(&self, level: usize, node: usize, incoming: usize) -> usize {
        self.decisions[level][node * self.m + incoming] as usize
    }

    pub fn check_shape(&self, lattice: &LatticeModel, m: usize) -> Result<()> {
        if self.m != m || self.start_mode >= m || self.decisions.len() != lattice.steps() + 1 {
            return Err(SolverError::Structure("strategy does not match the lattice".into()));
        }
        for (n, row) in self.decisions.iter().enumerate() {
            if row.len() != lattice.level_size(n) * m || row.iter().any(|&v| v as usize >= m) {
                return Err(SolverError::Structure(format!("strategy level {n} is malformed")));
            }
        }
        Ok(())
    }

    /// Reachable `(node, incoming)` pairs per level, starting from the root.
    pub fn reachable(&self, lattice: &LatticeModel) -> Vec<Vec<bool>> {
        let m = self.m;
        let mut out: Vec<Vec<bool>> = (0..=lattice.steps()).map(|n| vec![false; lattice.level_size(n) * m]).collect();
        out[0][self.start_mode] = true;
        for n in 0..lattice.steps() {
            let shifts = lattice.branch_shifts(n);
            for node in 0..lattice.level_size(n) {
                for j in 0..m {
                    if !out[n][node * m + j] {
                        continue;
                    }
                    let held = self.decide(n, node, j);
                    let base = lattice.child_base(n, node);
                    for s in &shifts {
                        out[n + 1][(base + s) * m + held] = true;
                    }
                }
            }
        }
        out
    }

    /// Switch events along every branch of the lattice, merged by node.
    pub fn events(&self, lattice: &LatticeModel, costs: &crate::model::SwitchingStructure) -> Vec<SwitchEvent> {
        let m = self.m;
        let reach = self.reachable(lattice);
        let mut out = Vec::new();
        for (n, row) in reach.iter().enumerate() {
            for (idx, &r) in row.iter().enumerate() {
                if !r {
                    continue;
                }
                let (node, j) = (idx / m, idx % m);
                let to = self.decide(n, node, j);
                if to != j {
                    out.push(SwitchEvent { level: n, time: lattice.time(n), node, from: j, to, cost: costs.cost(j, to) });
                }
            }
        }
        out
    }

    /// Maximum number of switches along any path.
    pub fn max_switches(&self, lattice: &LatticeModel) -> usize {
        let m = self.m;
        let mut best: Vec<Vec<Option<usize>>> =
            (0..=lattice.steps()).map(|n| vec![None; lattice.level_size(n) * m]).collect();
        best[0][self.start_mode] = Some(0);
        let mut overall = 0;
        for n in 0..=lattice.steps() {
            let shifts = if n < lattice.steps() { lattice.branch_shifts(n) } else { Vec::new() };
            for node in 0..lattice.level_size(n) {
                for j in 0..m {
                    let Some(c) = best[n][node * m + j] else { continue };
                    let held = self.decide(n, node, j);
                    let c = c + usize::from(held != j);
                    overall = overall.max(c);
                    if n < lattice.steps() {
                        let base = lattice.child_base(n, node);
                        for s in &shifts {
                            let slot = &mut best[n + 1][(base + s) * m + held];
                            *slot = Some(slot.map_or(c, |v| v.max(c)));
                        }
                    }
                }
            }
        }
        overall
    }
}

/// Value of the switched equation along a strategy, per `(node, incoming)`.
///
/// `value[level][node * m + j]` is the cost-to-go of a controller arriving at
/// the node in mode `j`, including the switching cost paid there. This is the
/// change of variable `U + A` carried out incrementally: the running cost
/// is integrated with the driver of the held mode and every switching cost
/// is added where it is paid.
#[derive(Debug, Clone)]
pub struct SwitchedValue {
    pub m: usize,
    pub value: Vec<Vec<f64>>,
    /// Value just after the decision, indexed by the held mode.
    pub held: Vec<Vec<f64>>,
}

impl SwitchedValue {
    /// Value at the root for the strategy's start mode.
    pub fn root(&self, start_mode: usize) -> f64 {
        self.value[0][start_mode]
    }
}

/// Per-level scratch shared by the evaluator and the enumerators.
struct Evaluator<'a> {
    problem: &'a Problem,
    lattice: &'a LatticeModel,
    m: usize,
    d: usize,
    states: Vec<Vec<f64>>,
    shifts: Vec<Vec<usize>>,
    terminal: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a Problem, lattice: &'a LatticeModel) -> Result<Self> {
        check_dims(problem, lattice)?;
        check_step_size(problem, lattice)?;
        let steps = lattice.steps();
        Ok(Self {
            problem,
            lattice,
            m: problem.m(),
            d: lattice.dim(),
            states: (0..=steps).map(|n| level_states(problem, lattice, n)).collect(),
            shifts: (0..steps).map(|n| lattice.branch_shifts(n)).collect(),
            terminal: terminal_level(problem, lattice)?,
        })
    }

    /// Held values at level `n` from the `(node, incoming)` values at `n + 1`.
    fn held_level(&self, n: usize, next: &[f64], out: &mut Vec<f64>) -> Result<()> {
        let (m, d) = (self.m, self.d);
        let size = self.lattice.level_size(n);
        out.clear();
        out.resize(size * m, 0.0);
        let t = self.lattice.time(n);
        let mut z = vec![0.0; d];
        for node in 0..size {
            let base = self.lattice.child_base(n, node);
            let x = &self.states[n][node * d..(node + 1) * d];
            for i in 0..m {
                let e = self.lattice.moments(next, m, i, base, &self.shifts[n], &mut z);
                out[node * m + i] = implicit_step(self.problem, t, x, e, &z, i, self.lattice.dt())?;
            }
        }
        Ok(())
    }

    fn decide_level(&self, n: usize, held: &[f64], strategy: &Strategy, out: &mut Vec<f64>) {
        let m = self.m;
        let s = &self.problem.structure;
        out.clear();
        out.extend((0..held.len()).map(|idx| {
            let (node, j) = (idx / m, idx % m);
            let to = strategy.decide(n, node, j);
            s.cost(j, to) + held[node * m + to]
        }));
    }
}

/// Evaluates the switched equation along `strategy`.
pub fn switched_value(problem: &Problem, lattice: &LatticeModel, strategy: &Strategy) -> Result<SwitchedValue> {
    let ev = Evaluator::new(problem, lattice)?;
    strategy.check_shape(lattice, ev.m)?;
    let steps = lattice.steps();
    let mut value = vec![Vec::new(); steps + 1];
    let mut held = vec![Vec::new(); steps + 1];
    held[steps] = ev.terminal.clone();
    let mut tmp = Vec::new();
    ev.decide_level(steps, &held[steps], strategy, &mut tmp);
    value[steps] = std::mem::take(&mut tmp);
    for n in (0..steps).rev() {
        let mut h = Vec::new();
        ev.held_level(n, &value[n + 1], &mut h)?;
        ev.decide_level(n, &h, strategy, &mut tmp);
        value[n] = std::mem::take(&mut tmp);
        held[n] = h;
    }
    Ok(SwitchedValue { m: ev.m, value, held })
}

/// Strategy family searched by [`enumerate_strategies`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnumerationScope {
    /// Every feedback table on reachable `(node, incoming)` pairs. Switching
    /// at the horizon is included only when `include_terminal` is set; with
    /// a terminal payoff in the constraint domain it never helps.
    Feedback { include_terminal: bool },
    /// Mode sequences depending on time only, with at most `max_switches`
    /// switches (terminal instant included).
    Deterministic { max_switches: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct EnumerationResult {
    pub start_mode: usize,
    pub best_value: f64,
    pub best: Strategy,
    pub visited: u128,
    /// Smallest and largest value met.
    pub range: (f64, f64),
}

/// Exhaustive minimisation of the switched value at the root over a
/// strategy family.
pub fn enumerate_strategies(
    problem: &Problem,
    lattice: &LatticeModel,
    start_mode: usize,
    scope: EnumerationScope,
    cap: u128,
) -> Result<EnumerationResult> {
    let m = problem.m();
    if start_mode >= m {
        return Err(SolverError::Structure(format!("start mode {start_mode} out of range")));
    }
    match scope {
        EnumerationScope::Feedback { include_terminal } => {
            enumerate_feedback(problem, lattice, start_mode, include_terminal, cap, &mut |_, _| {})
        }
        EnumerationScope::Deterministic { max_switches } => {
            enumerate_deterministic(problem, lattice, start_mode, max_switches, cap, &mut |_, _| {})
        }
    }
}

/// Like [`enumerate_strategies`], calling `visit(strategy, value)` on every
/// strategy. Used by tests that need every value, not only the minimum.
pub fn enumerate_strategies_with(
    problem: &Problem,
    lattice: &LatticeModel,
    start_mode: usize,
    scope: EnumerationScope,
    cap: u128,
    visit: &mut dyn FnMut(&Strategy, f64),
) -> Result<EnumerationResult> {
    match scope {
        EnumerationScope::Feedback { include_terminal } => {
            enumerate_feedback(problem, lattice, start_mode, include_terminal, cap, visit)
        }
        EnumerationScope::Deterministic { max_switches } => {
            enumerate_deterministic(problem, lattice, start_mode, max_switches, cap, visit)
        }
    }
}

/// Number of feedback tables: the root has one digit (the start mode's
/// decision), every other free level `m` digits per node.
fn feedback_count(lattice: &LatticeModel, m: usize, include_terminal: bool) -> u128 {
    let last = if include_terminal { lattice.steps() } else { lattice.steps().saturating_sub(1) };
    let mut digits: u128 = 1;
    for n in 1..=last {
        digits += (lattice.level_size(n) * m) as u128;
    }
    (m as u128).checked_pow(digits.min(u32::MAX as u128) as u32).unwrap_or(u128::MAX)
}

fn enumerate_feedback(
    problem: &Problem,
    lattice: &LatticeModel,
    start_mode: usize,
    include_terminal: bool,
    cap: u128,
    visit: &mut dyn FnMut(&Strategy, f64),
) -> Result<EnumerationResult> {
    let m = problem.m();
    let needed = feedback_count(lattice, m, include_terminal);
    if needed > cap {
        return Err(SolverError::Capacity { what: "feedback strategies".into(), needed, cap });
    }
    let ev = Evaluator::new(problem, lattice)?;
    let steps = lattice.steps();
    let mut strat = Strategy::constant(lattice, m, start_mode);
    let last = if include_terminal { steps } else { steps.saturating_sub(1) };
    // Digits ordered root first, so the root varies fastest and a change at
    // level `n` only forces recomputation of levels `n` down to 0.
    let mut digit_slot: Vec<(usize, usize)> = vec![(0, start_mode)];
    for n in 1..=last {
        for idx in 0..lattice.level_size(n) * m {
            digit_slot.push((n, idx));
        }
    }
    for &(n, idx) in &digit_slot {
        strat.decisions[n][idx] = 0;
    }
    // values[n] holds the (node, incoming) values at level n.
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    let mut held: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    held[steps] = ev.terminal.clone();
    let mut tmp = Vec::new();
    let mut dirty_top = steps;
    let mut best_value = f64::INFINITY;
    let mut best = strat.clone();
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut visited: u128 = 0;
    loop {
        // Recompute from the highest changed level down to the root.
        for n in (0..=dirty_top).rev() {
            if n < steps && n < dirty_top {
                let mut h = std::mem::take(&mut held[n]);
                ev.held_level(n, &values[n + 1], &mut h)?;
                held[n] = h;
            }
            ev.decide_level(n, &held[n], &strat, &mut tmp);
            std::mem::swap(&mut values[n], &mut tmp);
        }
        let v = values[0][start_mode];
        visited += 1;
        visit(&strat, v);
        range = (range.0.min(v), range.1.max(v));
        if v < best_value {
            best_value = v;
            best = strat.clone();
        }
        // Odometer step.
        let mut pos = 0;
        loop {
            if pos == digit_slot.len() {
                return Ok(EnumerationResult { start_mode, best_value, best, visited, range });
            }
            let (n, idx) = digit_slot[pos];
            let cur = strat.decisions[n][idx] as usize;
            if cur + 1 < m {
                strat.decisions[n][idx] = (cur + 1) as u32;
                dirty_top = n;
                break;
            }
            strat.decisions[n][idx] = 0;
            pos += 1;
        }
        // Wrapped digits sit at levels below the carry, which the next pass
        // recomputes anyway.
    }
}

fn enumerate_deterministic(
    problem: &Problem,
    lattice: &LatticeModel,
    start_mode: usize,
    max_switches: usize,
    cap: u128,
    visit: &mut dyn FnMut(&Strategy, f64),
) -> Result<EnumerationResult> {
    let m = problem.m();
    let slots = lattice.steps() + 1;
    let mut needed: u128 = 0;
    let mut binom: u128 = 1;
    for j in 0..=max_switches.min(slots) {
        if j > 0 {
            binom = binom * (slots - j + 1) as u128 / j as u128;
        }
        needed = needed.saturating_add(binom.saturating_mul(((m - 1) as u128).saturating_pow(j as u32)));
    }
    if needed > cap {
        return Err(SolverError::Capacity { what: "deterministic strategies".into(), needed, cap });
    }
    let mut schedule: Vec<Option<usize>> = vec![None; slots];
    let mut best_value = f64::INFINITY;
    let mut best = Strategy::constant(lattice, m, start_mode);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut visited: u128 = 0;
    let mut err = None;
    let mut eval = |schedule: &[Option<usize>]| {
        if err.is_some() {
            return;
        }
        let strat = Strategy::from_schedule(lattice, m, start_mode, schedule);
        match switched_value(problem, lattice, &strat) {
            Ok(v) => {
                let v = v.root(start_mode);
                visited += 1;
                visit(&strat, v);
                range = (range.0.min(v), range.1.max(v));
                if v < best_value {
                    best_value = v;
                    best = strat;
                }
            }
            Err(e) => err = Some(e),
        }
    };
    fn rec(
        slot: usize,
        mode: usize,
        left: usize,
        m: usize,
        schedule: &mut Vec<Option<usize>>,
        eval: &mut dyn FnMut(&[Option<usize>]),
    ) {
        if slot == schedule.len() {
            eval(schedule);
            return;
        }
        schedule[slot] = None;
        rec(slot + 1, mode, left, m, schedule, eval);
        if left > 0 {
            for to in (0..m).filter(|&to| to != mode) {
                schedule[slot] = Some(to);
                rec(slot + 1, to, left - 1, m, schedule, eval);
            }
            schedule[slot] = None;
        }
    }
    rec(0, start_mode, max_switches, m, &mut schedule, &mut eval);
    if let Some(e) = err {
        return Err(e);
    }
    Ok(EnumerationResult { start_mode, best_value, best, visited, range })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::lattice::{solve_plain, solve_reflected, LatticeSpec};
    use crate::model::{GeneratorSpec, StateMap, SwitchingStructure, TerminalSpec};

    fn two_mode() -> Problem {
        let s = SwitchingStructure::uniform(2, 0.5).unwrap();
        let g = Arc::new(GeneratorSpec::Constant { c: vec![2.0, 0.0] }.build(2, 1).unwrap());
        let t = TerminalSpec::Constant { values: vec![0.0, 0.0] }.build(&s).unwrap();
        Problem::new(s, g, t, StateMap::brownian(1))
    }

    #[test]
    fn constant_strategy_is_plain_solve() {
        let p = two_mode();
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 8, 1)).unwrap();
        let plain = solve_plain(&p, &l).unwrap();
        for i in 0..2 {
            let v = switched_value(&p, &l, &Strategy::constant(&l, 2, i)).unwrap();
            assert_eq!(v.root(i), plain.root()[i]);
        }
    }

    #[test]
    fn terminal_switch_adds_lump() {
        let p = two_mode();
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 4, 1)).unwrap();
        let mut sched = vec![None; 5];
        sched[4] = Some(1);
        let v = switched_value(&p, &l, &Strategy::from_schedule(&l, 2, 0, &sched)).unwrap();
        assert!((v.root(0) - 2.5).abs() < 1e-14);
        sched[4] = None;
        sched[0] = Some(1);
        let v = switched_value(&p, &l, &Strategy::from_schedule(&l, 2, 0, &sched)).unwrap();
        assert!((v.root(0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn feedback_enumeration_matches_reflected() {
        let p = two_mode();
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 3, 1)).unwrap();
        let refl = solve_reflected(&p, &l).unwrap();
        let mut count = 0u128;
        let res = enumerate_strategies_with(
            &p,
            &l,
            0,
            EnumerationScope::Feedback { include_terminal: true },
            DEFAULT_STRATEGY_CAP,
            &mut |_, v| {
                count += 1;
                assert!(v >= refl.root()[0] - 1e-12);
            },
        )
        .unwrap();
        assert_eq!(count, res.visited);
        assert_eq!(res.visited, feedback_count(&l, 2, true));
        assert!((res.best_value - refl.root()[0]).abs() < 1e-12);
    }

    #[test]
    fn incremental_matches_full_evaluation() {
        let p = two_mode();
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 2, 1)).unwrap();
        let mut checked = 0;
        enumerate_strategies_with(
            &p,
            &l,
            1,
            EnumerationScope::Feedback { include_terminal: true },
            DEFAULT_STRATEGY_CAP,
            &mut |s, v| {
                let full = switched_value(&p, &l, s).unwrap().root(1);
                assert_eq!(v, full);
                checked += 1;
            },
        )
        .unwrap();
        assert_eq!(checked, 1 << (1 + 4 + 6));
    }

    #[test]
    fn deterministic_count() {
        let p = two_mode();
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 64, 1)).unwrap();
        let r = enumerate_strategies(&p, &l, 0, EnumerationScope::Deterministic { max_switches: 2 }, DEFAULT_STRATEGY_CAP)
            .unwrap();
        assert_eq!(r.visited, 1 + 65 + 65 * 64 / 2);
        assert!((r.best_value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn capacity_is_enforced() {
        let p = two_mode();
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 8, 1)).unwrap();
        let r = enumerate_strategies(&p, &l, 0, EnumerationScope::Feedback { include_terminal: false }, 1 << 20);
        assert!(matches!(r, Err(SolverError::Capacity { .. })));
    }

    #[test]
    fn scenarios_must_be_adapted() {
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 2, 1)).unwrap();
        // Both scenarios share the first step; the first switches at level 1
        // only when the second step goes up.
        let a = Scenario { branches: vec![0, 1], switches: vec![(1, 1)] };
        let b = Scenario { branches: vec![0, 0], switches: vec![] };
        let e = Strategy::from_scenarios(&l, 2, 0, &[a.clone(), b]).unwrap_err();
        assert!(matches!(e, SolverError::Adaptedness(_)));
        let c = Scenario { branches: vec![0, 0], switches: vec![(1, 1)] };
        let s = Strategy::from_scenarios(&l, 2, 0, &[a, c]).unwrap();
        assert_eq!(s.decide(1, 0, 0), 1);
        assert_eq!(s.decide(0, 0, 0), 0);
    }

    #[test]
    fn strategy_json_roundtrip() {
        let l = LatticeModel::new(&LatticeSpec::new(1.0, 2, 1)).unwrap();
        let s = Strategy::from_schedule(&l, 2, 0, &[None, Some(1), None]);
        let back: Strategy = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.max_switches(&l), 1);
    }
}

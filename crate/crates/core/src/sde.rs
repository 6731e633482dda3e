//! Switched diffusions in the weak formulation: the driverless equation is
//! simulated once and every strategy is priced by reweighting its paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Result, SolverError};
use crate::lattice::LatticeModel;
use crate::model::{GeneratorSpec, Problem, RunningCost, StateMap, SwitchingStructure, TerminalSpec};
use crate::numeric::mean_and_se;
use crate::switching::Strategy;

pub const MAX_DIM: usize = 8;

/// Coefficients of a switched diffusion as functionals of the discrete path
/// prefix. `path` holds `(step + 1) * d` values: the states at grid times
/// `0..=step`, so every evaluation only sees the past.
pub trait DiffusionModel: Send + Sync {
    fn dim(&self) -> usize;
    fn modes(&self) -> usize;
    fn x0(&self) -> &[f64];
    fn horizon(&self) -> f64;
    /// Row-major `d x d` diffusion matrix.
    fn diffusion(&self, t: f64, path: &[f64], out: &mut [f64]);
    fn drift(&self, t: f64, path: &[f64], mode: usize, out: &mut [f64]);
    fn running_cost(&self, t: f64, path: &[f64], mode: usize) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Volatility {
    /// `sigma = diag(vol)`.
    Constant { vol: Vec<f64> },
    /// `sigma(x) = diag(vol * x)`.
    Proportional { vol: Vec<f64> },
}

impl Volatility {
    fn vol(&self) -> &[f64] {
        match self {
            Volatility::Constant { vol } | Volatility::Proportional { vol } => vol,
        }
    }
}

/// What the running cost is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostArgument {
    #[default]
    Current,
    /// Running maximum of each coordinate over the path so far.
    RunningMax,
}

/// Diagonal diffusion with constant per-mode control drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchedDiffusion {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub volatility: Volatility,
    /// One drift vector per mode; empty means no drift.
    #[serde(default)]
    pub drift: Vec<Vec<f64>>,
    pub cost: Vec<RunningCost>,
    #[serde(default)]
    pub cost_argument: CostArgument,
}

impl SwitchedDiffusion {
    pub fn validate(&self) -> Result<()> {
        let d = self.x0.len();
        let m = self.cost.len();
        if d == 0 || m == 0 {
            return Err(SolverError::Structure("diffusion needs a state and at least one mode".into()));
        }
        if d > MAX_DIM {
            return Err(SolverError::Structure(format!("at most {MAX_DIM} state coordinates are supported")));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SolverError::Structure("horizon must be positive".into()));
        }
        let vol = self.volatility.vol();
        if vol.len() != d {
            return Err(SolverError::Structure(format!("volatility needs {d} entries")));
        }
        if vol.iter().any(|v| !(v.is_finite() && *v != 0.0)) {
            return Err(SolverError::Hypothesis("diffusion matrix must be invertible".into()));
        }
        if let Volatility::Proportional { .. } = self.volatility {
            if self.x0.iter().any(|x| *x <= 0.0) {
                return Err(SolverError::Hypothesis("proportional volatility needs a positive start".into()));
            }
        }
        if !self.drift.is_empty() && (self.drift.len() != m || self.drift.iter().any(|b| b.len() != d)) {
            return Err(SolverError::Structure(format!("drift must be {m} rows of length {d}")));
        }
        if self.drift.iter().flatten().any(|b| !b.is_finite()) {
            return Err(SolverError::Hypothesis("drift must be bounded".into()));
        }
        Ok(())
    }

    /// Largest control drift norm.
    pub fn drift_bound(&self) -> f64 {
        self.drift.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
    }

    pub fn is_markov(&self) -> bool {
        self.cost_argument == CostArgument::Current
    }

    /// The lattice problem whose reflected solution prices this diffusion:
    /// driver `l + z . b`, zero terminal payoff, and the exact driftless
    /// state map of the diffusion.
    pub fn lattice_problem(&self, structure: &SwitchingStructure) -> Result<Problem> {
        self.validate()?;
        if !self.is_markov() {
            return Err(SolverError::Structure("lattice pricing needs a Markov running cost".into()));
        }
        if structure.m() != self.cost.len() {
            return Err(SolverError::Structure("cost matrix and diffusion disagree on the mode count".into()));
        }
        let d = self.x0.len();
        let spec = crate::model::ProblemSpec {
            costs: structure.clone(),
            generator: GeneratorSpec::RunningCost { cost: self.cost.clone(), drift: self.drift.clone() },
            terminal: TerminalSpec::Constant { values: vec![0.0; structure.m()] },
            state: Some(self.state_map()),
            horizon: self.horizon,
            dim: d,
        };
        spec.build()
    }

    pub fn state_map(&self) -> StateMap {
        let d = self.x0.len();
        let x0 = self.x0.clone();
        let vol = self.volatility.vol().to_vec();
        match self.volatility {
            Volatility::Constant { .. } => StateMap::Arithmetic { x0, drift: vec![0.0; d], vol },
            Volatility::Proportional { .. } => StateMap::Geometric { x0, drift: vec![0.0; d], vol },
        }
    }
}

impl DiffusionModel for SwitchedDiffusion {
    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn modes(&self) -> usize {
        self.cost.len()
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn diffusion(&self, _t: f64, path: &[f64], out: &mut [f64]) {
        let d = self.x0.len();
        let x = &path[path.len() - d..];
        out.fill(0.0);
        match &self.volatility {
            Volatility::Constant { vol } => (0..d).for_each(|k| out[k * d + k] = vol[k]),
            Volatility::Proportional { vol } => (0..d).for_each(|k| out[k * d + k] = vol[k] * x[k]),
        }
    }

    fn drift(&self, _t: f64, _path: &[f64], mode: usize, out: &mut [f64]) {
        match self.drift.get(mode) {
            Some(b) => out.copy_from_slice(b),
            None => out.fill(0.0),
        }
    }

    fn running_cost(&self, _t: f64, path: &[f64], mode: usize) -> f64 {
        let d = self.x0.len();
        match self.cost_argument {
            CostArgument::Current => self.cost[mode].eval(&path[path.len() - d..]),
            CostArgument::RunningMax => {
                let mut best = [f64::NEG_INFINITY; MAX_DIM];
                let best = &mut best[..d.min(MAX_DIM)];
                for x in path.chunks_exact(d) {
                    for (b, v) in best.iter_mut().zip(x) {
                        *b = b.max(*v);
                    }
                }
                self.cost[mode].eval(best)
            }
        }
    }
}

/// Empirical path sup-norm Lipschitz ratios of the coefficients.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathLipschitz {
    pub cost: f64,
    pub drift: f64,
    pub diffusion: f64,
}

/// Probes Lipschitz continuity on randomly perturbed driverless paths.
pub fn probe_path_lipschitz(
    model: &dyn DiffusionModel,
    steps: usize,
    samples: usize,
    seed: u64,
) -> Result<PathLipschitz> {
    let d = model.dim();
    let m = model.modes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = vec![0.0; (steps + 1) * d];
    let mut incs = vec![0.0; steps * d];
    let mut out = PathLipschitz { cost: 0.0, drift: 0.0, diffusion: 0.0 };
    let dt = model.horizon() / steps as f64;
    let (mut b1, mut b2) = (vec![0.0; d], vec![0.0; d]);
    let (mut s1, mut s2) = (vec![0.0; d * d], vec![0.0; d * d]);
    for i in 0..samples {
        generate_path(model, steps, seed, i as u64, &mut states, &mut incs)?;
        let step = rng.random_range(0..=steps);
        let len = (step + 1) * d;
        let base = &states[..len];
        let scale = 10f64.powf(rng.random_range(-4.0..-1.0));
        let bumped: Vec<f64> =
            base.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
        let dist = base.iter().zip(&bumped).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if dist == 0.0 {
            continue;
        }
        let t = step as f64 * dt;
        for mode in 0..m {
            let dl = (model.running_cost(t, base, mode) - model.running_cost(t, &bumped, mode)).abs();
            out.cost = out.cost.max(dl / dist);
            model.drift(t, base, mode, &mut b1);
            model.drift(t, &bumped, mode, &mut b2);
            let db = b1.iter().zip(&b2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            out.drift = out.drift.max(db / dist);
        }
        model.diffusion(t, base, &mut s1);
        model.diffusion(t, &bumped, &mut s2);
        let ds = s1.iter().zip(&s2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.diffusion = out.diffusion.max(ds / dist);
    }
    Ok(out)
}

/// Euler-Maruyama path of the driverless equation. The path is a pure
/// function of `(seed, index)`.
pub fn generate_path(
    model: &dyn DiffusionModel,
    steps: usize,
    seed: u64,
    index: u64,
    states: &mut [f64],
    increments: &mut [f64],
) -> Result<()> {
    let d = model.dim();
    let dt = model.horizon() / steps as f64;
    let sq = dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    for v in increments.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v = g * sq;
    }
    states[..d].copy_from_slice(model.x0());
    let mut sigma = vec![0.0; d * d];
    for n in 0..steps {
        let t = n as f64 * dt;
        model.diffusion(t, &states[..(n + 1) * d], &mut sigma);
        let dw = &increments[n * d..(n + 1) * d];
        for r in 0..d {
            let mut x = states[n * d + r];
            for c in 0..d {
                x += sigma[r * d + c] * dw[c];
            }
            if !x.is_finite() {
                return Err(SolverError::BlowUp { path: index as usize, step: n + 1 });
            }
            states[(n + 1) * d + r] = x;
        }
    }
    Ok(())
}

/// Anything that can hand out driverless paths by index.
pub trait PathSource: Sync {
    fn paths(&self) -> usize;
    fn steps(&self) -> usize;
    fn seed(&self) -> u64;
    /// Calls `f(states, increments)` on path `index`.
    fn with_path<R>(&self, model: &dyn DiffusionModel, index: usize, f: impl FnOnce(&[f64], &[f64]) -> R) -> Result<R>;
}

/// Stored ensemble of driverless paths and their Brownian increments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub seed: u64,
    pub steps: usize,
    pub paths: usize,
    pub dim: usize,
    pub dt: f64,
    /// `states[(p * (steps + 1) + n) * dim + k]`.
    pub states: Vec<f64>,
    /// `increments[(p * steps + n) * dim + k]`.
    pub increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn path(&self, p: usize) -> &[f64] {
        let len = (self.steps + 1) * self.dim;
        &self.states[p * len..(p + 1) * len]
    }

    pub fn path_increments(&self, p: usize) -> &[f64] {
        let len = self.steps * self.dim;
        &self.increments[p * len..(p + 1) * len]
    }

    /// Terminal values of coordinate `k` over all paths.
    pub fn terminal(&self, k: usize) -> Vec<f64> {
        (0..self.paths).map(|p| self.path(p)[self.steps * self.dim + k]).collect()
    }
}

impl PathSource for PathEnsemble {
    fn paths(&self) -> usize {
        self.paths
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn with_path<R>(&self, _model: &dyn DiffusionModel, index: usize, f: impl FnOnce(&[f64], &[f64]) -> R) -> Result<R> {
        Ok(f(self.path(index), self.path_increments(index)))
    }
}

/// Ensemble that regenerates each path on demand instead of storing it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StreamedEnsemble {
    pub seed: u64,
    pub steps: usize,
    pub paths: usize,
}

impl PathSource for StreamedEnsemble {
    fn paths(&self) -> usize {
        self.paths
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn with_path<R>(&self, model: &dyn DiffusionModel, index: usize, f: impl FnOnce(&[f64], &[f64]) -> R) -> Result<R> {
        let d = model.dim();
        let mut states = vec![0.0; (self.steps + 1) * d];
        let mut incs = vec![0.0; self.steps * d];
        generate_path(model, self.steps, self.seed, index as u64, &mut states, &mut incs)?;
        Ok(f(&states, &incs))
    }
}

fn check_grid(steps: usize, paths: usize) -> Result<()> {
    if steps == 0 || paths == 0 {
        return Err(SolverError::Structure("need at least one step and one path".into()));
    }
    Ok(())
}

/// Simulates and stores `paths` driverless paths.
pub fn simulate_driverless(model: &dyn DiffusionModel, steps: usize, paths: usize, seed: u64) -> Result<PathEnsemble> {
    check_grid(steps, paths)?;
    let d = model.dim();
    let slen = (steps + 1) * d;
    let ilen = steps * d;
    let mut states = vec![0.0; paths * slen];
    let mut increments = vec![0.0; paths * ilen];
    states
        .par_chunks_mut(slen)
        .zip(increments.par_chunks_mut(ilen))
        .enumerate()
        .try_for_each(|(p, (s, i))| generate_path(model, steps, seed, p as u64, s, i))?;
    Ok(PathEnsemble { seed, steps, paths, dim: d, dt: model.horizon() / steps as f64, states, increments })
}

/// A switching rule that sees the path so far and the mode currently held.
pub trait FeedbackPolicy: Send + Sync {
    fn start_mode(&self) -> usize;
    /// Mode to hold over `[t_step, t_step+1)`.
    fn decide(&self, step: usize, t: f64, path: &[f64], incoming: usize) -> usize;
    fn label(&self) -> String;
}

/// Never switches.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub usize);

impl FeedbackPolicy for ConstantPolicy {
    fn start_mode(&self) -> usize {
        self.0
    }

    fn decide(&self, _step: usize, _t: f64, _path: &[f64], incoming: usize) -> usize {
        incoming
    }

    fn label(&self) -> String {
        format!("constant({})", self.0)
    }
}

/// Switches at fixed times regardless of the path.
#[derive(Debug, Clone)]
pub struct SchedulePolicy {
    pub start: usize,
    /// `(time, mode)` pairs in increasing time order.
    pub switches: Vec<(f64, usize)>,
}

impl FeedbackPolicy for SchedulePolicy {
    fn start_mode(&self) -> usize {
        self.start
    }

    fn decide(&self, _step: usize, t: f64, _path: &[f64], incoming: usize) -> usize {
        // The last scheduled switch at or before `t` determines the mode.
        let eps = 1e-12 * t.abs().max(1.0);
        self.switches.iter().rev().find(|(s, _)| *s <= t + eps).map_or(incoming, |(_, m)| *m)
    }

    fn label(&self) -> String {
        let parts: Vec<String> = self.switches.iter().map(|(t, m)| format!("{t:.3}->{m}")).collect();
        format!("schedule({};{})", self.start, parts.join(","))
    }
}

/// Two-mode hysteresis on the first coordinate: go to `above` when the state
/// exceeds `upper`, to `below` when it falls under `lower`.
#[derive(Debug, Clone)]
pub struct ThresholdPolicy {
    pub start: usize,
    pub above: usize,
    pub below: usize,
    pub upper: f64,
    pub lower: f64,
    pub dim: usize,
}

impl FeedbackPolicy for ThresholdPolicy {
    fn start_mode(&self) -> usize {
        self.start
    }

    fn decide(&self, _step: usize, _t: f64, path: &[f64], incoming: usize) -> usize {
        let x = path[path.len() - self.dim];
        if x > self.upper {
            self.above
        } else if x < self.lower {
            self.below
        } else {
            incoming
        }
    }

    fn label(&self) -> String {
        format!("threshold({};{}>{:.3},{}<{:.3})", self.start, self.above, self.upper, self.below, self.lower)
    }
}

/// A lattice decision table applied to simulated paths: the current state is
/// mapped back to Brownian coordinates and rounded to the nearest node.
/// Optionally flips a fraction of decisions to produce nearby suboptimal
/// strategies that remain feedback rules.
#[derive(Debug, Clone)]
pub struct LatticePolicy {
    strategy: Arc<Strategy>,
    lattice: Arc<LatticeModel>,
    state: StateMap,
    ratio: usize,
    flip_rate: f64,
    flip_seed: u64,
}

impl LatticePolicy {
    /// `sim_steps` must be a multiple of the lattice step count.
    pub fn new(strategy: Arc<Strategy>, lattice: Arc<LatticeModel>, state: StateMap, sim_steps: usize) -> Result<Self> {
        let n = lattice.steps();
        if sim_steps == 0 || sim_steps % n != 0 {
            return Err(SolverError::Structure(format!(
                "simulation steps ({sim_steps}) must be a multiple of the lattice steps ({n})"
            )));
        }
        if state.dim() != lattice.dim() || lattice.dim() > MAX_DIM {
            return Err(SolverError::Structure("state map and lattice dimensions differ".into()));
        }
        Ok(Self { strategy, lattice, state, ratio: sim_steps / n, flip_rate: 0.0, flip_seed: 0 })
    }

    pub fn perturbed(&self, rate: f64, seed: u64) -> Self {
        Self { flip_rate: rate, flip_seed: seed, ..self.clone() }
    }

    fn flip(&self, level: usize, node: usize, incoming: usize) -> Option<u64> {
        if self.flip_rate <= 0.0 {
            return None;
        }
        let mut h = self.flip_seed ^ 0x9e37_79b9_7f4a_7c15;
        for v in [level as u64, node as u64, incoming as u64] {
            h = splitmix(h ^ v);
        }
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        (u < self.flip_rate).then(|| splitmix(h))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl FeedbackPolicy for LatticePolicy {
    fn start_mode(&self) -> usize {
        self.strategy.start_mode
    }

    fn decide(&self, step: usize, _t: f64, path: &[f64], incoming: usize) -> usize {
        if step % self.ratio != 0 {
            return incoming;
        }
        let level = step / self.ratio;
        if level >= self.lattice.steps() {
            return incoming;
        }
        let d = self.lattice.dim();
        let mut w = [0.0; MAX_DIM];
        let w = &mut w[..d];
        self.state.brownian_of(self.lattice.elapsed(level), &path[path.len() - d..], w);
        let node = self.lattice.nearest_node(level, w);
        let choice = self.strategy.decide(level, node, incoming);
        match self.flip(level, node, incoming) {
            Some(h) if self.strategy.m > 1 => {
                let m = self.strategy.m as u64;
                ((choice as u64 + 1 + h % (m - 1)) % m) as usize
            }
            _ => choice,
        }
    }

    fn label(&self) -> String {
        if self.flip_rate > 0.0 {
            format!("lattice(flip {:.3}, seed {})", self.flip_rate, self.flip_seed)
        } else {
            "lattice".into()
        }
    }
}

/// Log of the discrete stochastic exponential and the payoff along one path.
fn price_path(
    model: &dyn DiffusionModel,
    structure: &SwitchingStructure,
    policy: &dyn FeedbackPolicy,
    states: &[f64],
    increments: &[f64],
    steps: usize,
) -> (f64, f64) {
    let d = model.dim();
    let dt = model.horizon() / steps as f64;
    let mut b = vec![0.0; d];
    let mut mode = policy.start_mode();
    let mut log_w = 0.0;
    let mut running = 0.0;
    let mut switching = 0.0;
    for n in 0..steps {
        let t = n as f64 * dt;
        let prefix = &states[..(n + 1) * d];
        let next = policy.decide(n, t, prefix, mode);
        if next != mode {
            switching += structure.cost(mode, next);
            mode = next;
        }
        running += model.running_cost(t, prefix, mode) * dt;
        model.drift(t, prefix, mode, &mut b);
        let dw = &increments[n * d..(n + 1) * d];
        let mut bb = 0.0;
        for k in 0..d {
            log_w += b[k] * dw[k];
            bb += b[k] * b[k];
        }
        log_w -= 0.5 * bb * dt;
    }
    (log_w, running + switching)
}

/// Per-path weights and their sample statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightReport {
    pub weights: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub log_variance: f64,
}

/// Girsanov weights of `policy` on every path of `source`.
pub fn girsanov_weight(
    source: &impl PathSource,
    policy: &dyn FeedbackPolicy,
    model: &dyn DiffusionModel,
) -> Result<WeightReport> {
    let structure = SwitchingStructure::uniform(model.modes(), 0.0)?;
    let steps = source.steps();
    let logs: Vec<f64> = (0..source.paths())
        .into_par_iter()
        .map(|p| source.with_path(model, p, |s, i| price_path(model, &structure, policy, s, i, steps).0))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    let (mean, se) = mean_and_se(&weights);
    let (_, lse) = mean_and_se(&logs);
    let log_variance = lse * lse * logs.len() as f64;
    Ok(WeightReport { weights, mean, se, log_variance })
}

/// Weighted Monte Carlo estimate of the cost functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub label: String,
    pub value: f64,
    pub se: f64,
    pub weight_mean: f64,
    pub weight_se: f64,
    pub paths: usize,
}

/// Prices several policies on the same paths in one pass.
pub fn estimate_costs(
    source: &impl PathSource,
    policies: &[&dyn FeedbackPolicy],
    model: &dyn DiffusionModel,
    structure: &SwitchingStructure,
) -> Result<Vec<CostEstimate>> {
    if structure.m() != model.modes() {
        return Err(SolverError::Structure("cost matrix and diffusion disagree on the mode count".into()));
    }
    let steps = source.steps();
    let k = policies.len();
    let per_path: Vec<Vec<(f64, f64)>> = (0..source.paths())
        .into_par_iter()
        .map(|p| {
            source.with_path(model, p, |s, i| {
                policies
                    .iter()
                    .map(|pol| {
                        let (lw, payoff) = price_path(model, structure, *pol, s, i, steps);
                        let w = lw.exp();
                        (w, w * payoff)
                    })
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    let out = (0..k)
        .map(|j| {
            let w: Vec<f64> = per_path.iter().map(|r| r[j].0).collect();
            let v: Vec<f64> = per_path.iter().map(|r| r[j].1).collect();
            let (value, se) = mean_and_se(&v);
            let (weight_mean, weight_se) = mean_and_se(&w);
            CostEstimate { label: policies[j].label(), value, se, weight_mean, weight_se, paths: w.len() }
        })
        .collect();
    Ok(out)
}

pub fn estimate_cost(
    source: &impl PathSource,
    policy: &dyn FeedbackPolicy,
    model: &dyn DiffusionModel,
    structure: &SwitchingStructure,
) -> Result<CostEstimate> {
    Ok(estimate_costs(source, &[policy], model, structure)?.remove(0))
}

/// Outcome of the lower-bound and attainment checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowerBoundVerdict {
    pub reference: f64,
    pub sigmas: f64,
    pub estimates: Vec<CostEstimate>,
    /// Index into `estimates` of the optimal candidate, if one was supplied.
    pub optimal: Option<usize>,
    /// Labels of strategies priced below the reference by more than the gate.
    pub below_bound: Vec<String>,
    pub attainment_gap: Option<f64>,
    pub passed: bool,
}

/// Checks `J(a) >= reference - sigmas * SE` for every estimate and
/// `|J(a*) - reference| <= sigmas * SE` for the optimal one. Estimates with
/// zero standard error are held to `1e-9`.
pub fn check_lower_bound(
    reference: f64,
    estimates: Vec<CostEstimate>,
    optimal: Option<usize>,
    sigmas: f64,
) -> LowerBoundVerdict {
    let gate = |e: &CostEstimate| (sigmas * e.se).max(1e-9);
    let below_bound: Vec<String> = estimates
        .iter()
        .filter(|e| e.value < reference - gate(e))
        .map(|e| format!("{} J={:.6e} se={:.2e}", e.label, e.value, e.se))
        .collect();
    let attainment_gap = optimal.map(|i| estimates[i].value - reference);
    let attained = optimal.is_none_or(|i| (estimates[i].value - reference).abs() <= gate(&estimates[i]));
    let passed = below_bound.is_empty() && attained;
    LowerBoundVerdict { reference, sigmas, estimates, optimal, below_bound, attainment_gap, passed }
}

/// A mixed family of admissible policies started in mode `start`, for
/// lower-bound testing: immediate switches, time schedules, hysteresis bands
/// around `x0`, and perturbations of `base` when given.
pub fn sample_policies(
    model: &SwitchedDiffusion,
    start: usize,
    base: Option<&LatticePolicy>,
    count: usize,
    seed: u64,
) -> Vec<Box<dyn FeedbackPolicy>> {
    let m = model.modes();
    let d = model.dim();
    let t = model.horizon;
    let x0 = model.x0[0];
    let spread = model.volatility.vol()[0].abs() * x0.abs().max(1.0) * t.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Box<dyn FeedbackPolicy>> = Vec::with_capacity(count);
    let mut kind = 0;
    while out.len() < count {
        match kind % 4 {
            0 => {
                let to = rng.random_range(0..m);
                out.push(Box::new(SchedulePolicy { start, switches: vec![(0.0, to)] }));
            }
            1 => {
                let n = rng.random_range(1..=3);
                let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..t)).collect();
                times.sort_by(f64::total_cmp);
                let switches = times.into_iter().map(|s| (s, rng.random_range(0..m))).collect();
                out.push(Box::new(SchedulePolicy { start, switches }));
            }
            2 if m >= 2 => {
                let above = rng.random_range(0..m);
                let below = (above + rng.random_range(1..m)) % m;
                let centre = x0 + spread * rng.random_range(-0.5..0.5);
                let half = spread * rng.random_range(0.0..0.5);
                out.push(Box::new(ThresholdPolicy {
                    start,
                    above,
                    below,
                    upper: centre + half,
                    lower: centre - half,
                    dim: d,
                }));
            }
            3 => {
                if let Some(b) = base {
                    let rate = rng.random_range(0.02..0.3);
                    out.push(Box::new(b.perturbed(rate, rng.random())));
                }
            }
            _ => {}
        }
        kind += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brownian(m: usize) -> SwitchedDiffusion {
        SwitchedDiffusion {
            x0: vec![0.0],
            horizon: 1.0,
            volatility: Volatility::Constant { vol: vec![1.0] },
            drift: vec![],
            cost: vec![RunningCost::Constant { c: 1.0 }; m],
            cost_argument: CostArgument::Current,
        }
    }

    #[test]
    fn brownian_terminal_variance() {
        let model = brownian(1);
        let e = simulate_driverless(&model, 16, 20_000, 7).unwrap();
        let xt = e.terminal(0);
        let sq: Vec<f64> = xt.iter().map(|x| x * x).collect();
        let (var, se) = mean_and_se(&sq);
        assert!((var - 1.0).abs() <= 3.0 * se, "{var} {se}");
    }

    #[test]
    fn geometric_martingale() {
        let model = SwitchedDiffusion {
            x0: vec![1.0],
            volatility: Volatility::Proportional { vol: vec![0.2] },
            ..brownian(1)
        };
        let e = simulate_driverless(&model, 50, 20_000, 3).unwrap();
        let (mean, se) = mean_and_se(&e.terminal(0));
        assert!((mean - 1.0).abs() <= 3.0 * se);
    }

    #[test]
    fn deterministic_paths() {
        let model = brownian(1);
        let a = simulate_driverless(&model, 10, 1, 42).unwrap();
        let b = simulate_driverless(&model, 10, 1, 42).unwrap();
        assert_eq!(a.states, b.states);
        let s = StreamedEnsemble { seed: 42, steps: 10, paths: 1 };
        s.with_path(&model, 0, |st, _| assert_eq!(st, a.path(0))).unwrap();
    }

    #[test]
    fn blow_up_is_reported() {
        struct Exploding;
        impl DiffusionModel for Exploding {
            fn dim(&self) -> usize {
                1
            }
            fn modes(&self) -> usize {
                1
            }
            fn x0(&self) -> &[f64] {
                &[1.0]
            }
            fn horizon(&self) -> f64 {
                1.0
            }
            fn diffusion(&self, _t: f64, path: &[f64], out: &mut [f64]) {
                out[0] = 1e200 * path[path.len() - 1].abs().max(1.0);
            }
            fn drift(&self, _t: f64, _p: &[f64], _m: usize, out: &mut [f64]) {
                out[0] = 0.0;
            }
            fn running_cost(&self, _t: f64, _p: &[f64], _m: usize) -> f64 {
                0.0
            }
        }
        let err = simulate_driverless(&Exploding, 20, 4, 1).unwrap_err();
        assert!(matches!(err, SolverError::BlowUp { .. }));
    }

    #[test]
    fn zero_drift_unit_weights() {
        let model = brownian(2);
        let e = simulate_driverless(&model, 8, 100, 1).unwrap();
        let r = girsanov_weight(&e, &ConstantPolicy(0), &model).unwrap();
        assert!(r.weights.iter().all(|w| *w == 1.0));
    }

    #[test]
    fn constant_drift_weights() {
        let model = SwitchedDiffusion { drift: vec![vec![0.5]], ..brownian(1) };
        let e = StreamedEnsemble { seed: 11, steps: 20, paths: 40_000 };
        let r = girsanov_weight(&e, &ConstantPolicy(0), &model).unwrap();
        assert!((r.mean - 1.0).abs() <= 3.0 * r.se);
        assert!((r.log_variance - 0.25).abs() < 0.01, "{}", r.log_variance);
    }

    #[test]
    fn exact_costs() {
        let model = brownian(1);
        let s = SwitchingStructure::single();
        let e = simulate_driverless(&model, 10, 5, 0).unwrap();
        let j = estimate_cost(&e, &ConstantPolicy(0), &model, &s).unwrap();
        assert!((j.value - 1.0).abs() < 1e-12);

        let model = SwitchedDiffusion { cost: vec![RunningCost::Constant { c: 0.0 }; 2], ..brownian(2) };
        let s = SwitchingStructure::uniform(2, 0.5).unwrap();
        let pol = SchedulePolicy { start: 0, switches: vec![(0.3, 1)] };
        let j = estimate_cost(&e, &pol, &model, &s).unwrap();
        assert!((j.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn running_max_sees_only_the_past() {
        let model = SwitchedDiffusion {
            cost: vec![RunningCost::Affine { slope: 1.0, intercept: 0.0 }],
            cost_argument: CostArgument::RunningMax,
            ..brownian(1)
        };
        assert_eq!(model.running_cost(0.0, &[0.0, 2.0, -1.0], 0), 2.0);
        assert_eq!(model.running_cost(0.0, &[0.0, 2.0], 0), 2.0);
        assert_eq!(model.running_cost(0.0, &[0.0], 0), 0.0);
        let lip = probe_path_lipschitz(&model, 10, 200, 5).unwrap();
        assert!(lip.cost <= 1.0 + 1e-9);
    }

    #[test]
    fn lower_bound_verdict() {
        let est = |label: &str, value: f64| CostEstimate {
            label: label.into(),
            value,
            se: 0.01,
            weight_mean: 1.0,
            weight_se: 0.0,
            paths: 1,
        };
        let v = check_lower_bound(0.5, vec![est("a", 0.6), est("b", 0.51)], Some(1), 3.0);
        assert!(v.passed);
        let v = check_lower_bound(0.5, vec![est("a", 0.45), est("b", 0.51)], Some(1), 3.0);
        assert!(!v.passed);
        assert_eq!(v.below_bound.len(), 1);
    }
}

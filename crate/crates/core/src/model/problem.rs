use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::costs::SwitchingStructure;
use super::generator::{Generator, GeneratorSpec};
use crate::error::{Result, SolverError};

/// Terminal payoff `g(x, i)`, written into `out[i]`.
pub trait Terminal: Send + Sync {
    fn eval(&self, x: &[f64], out: &mut [f64]);

    /// True when the payoff does not depend on the state.
    fn is_constant(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalSpec {
    Constant { values: Vec<f64> },
    /// `g(x, i) = slope_i * x_0 + intercept_i`.
    Affine { slope: Vec<f64>, intercept: Vec<f64> },
}

impl TerminalSpec {
    pub fn build(&self, structure: &SwitchingStructure) -> Result<Arc<dyn Terminal>> {
        let m = structure.m();
        match self {
            TerminalSpec::Constant { values } => {
                if values.len() != m {
                    return Err(SolverError::Structure(format!("terminal: `values` needs {m} entries")));
                }
                let (ok, worst) = structure.in_closure(values, 0.0);
                if !ok {
                    return Err(SolverError::Precondition(format!(
                        "terminal values lie outside the constraint domain (violation {worst})"
                    )));
                }
                Ok(Arc::new(ConstantTerminal(values.clone())))
            }
            TerminalSpec::Affine { slope, intercept } => {
                if slope.len() != m || intercept.len() != m {
                    return Err(SolverError::Structure(format!(
                        "terminal: `slope` and `intercept` need {m} entries"
                    )));
                }
                // With equal slopes the constraint does not depend on x. Other
                // pairs are checked against the actual terminal states by the solvers.
                for i in 0..m {
                    for j in 0..m {
                        if i != j && slope[i] != slope[j] {
                            continue;
                        }
                        if i != j && intercept[i] > intercept[j] + structure.cost(i, j) {
                            return Err(SolverError::Precondition(format!(
                                "terminal payoff leaves the constraint domain between modes {i} and {j}"
                            )));
                        }
                    }
                }
                Ok(Arc::new(AffineTerminal { slope: slope.clone(), intercept: intercept.clone() }))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstantTerminal(pub Vec<f64>);

impl Terminal for ConstantTerminal {
    fn eval(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }

    fn is_constant(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct AffineTerminal {
    slope: Vec<f64>,
    intercept: Vec<f64>,
}

impl Terminal for AffineTerminal {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let x0 = x.first().copied().unwrap_or(0.0);
        for (o, (s, c)) in out.iter_mut().zip(self.slope.iter().zip(&self.intercept)) {
            *o = s * x0 + c;
        }
    }
}

/// Markov state as an explicit function of elapsed time and the driving
/// Brownian motion, one coordinate per Brownian dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateMap {
    /// `x0 + drift * s + vol * W`.
    Arithmetic { x0: Vec<f64>, drift: Vec<f64>, vol: Vec<f64> },
    /// `x0 * exp((drift - vol^2 / 2) s + vol * W)`.
    Geometric { x0: Vec<f64>, drift: Vec<f64>, vol: Vec<f64> },
}

impl StateMap {
    /// The driving Brownian motion itself.
    pub fn brownian(d: usize) -> Self {
        StateMap::Arithmetic { x0: vec![0.0; d], drift: vec![0.0; d], vol: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        match self {
            StateMap::Arithmetic { x0, .. } | StateMap::Geometric { x0, .. } => x0.len(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let (x0, drift, vol) = self.parts();
        if x0.len() != d || drift.len() != d || vol.len() != d {
            return Err(SolverError::Structure(format!("state map needs {d} entries per field")));
        }
        if let StateMap::Geometric { x0, .. } = self {
            if x0.iter().any(|v| *v <= 0.0) {
                return Err(SolverError::Structure("geometric state needs positive x0".into()));
            }
        }
        Ok(())
    }

    fn parts(&self) -> (&[f64], &[f64], &[f64]) {
        match self {
            StateMap::Arithmetic { x0, drift, vol } | StateMap::Geometric { x0, drift, vol } => {
                (x0, drift, vol)
            }
        }
    }

    pub fn eval(&self, elapsed: f64, w: &[f64], out: &mut [f64]) {
        match self {
            StateMap::Arithmetic { x0, drift, vol } => {
                for k in 0..out.len() {
                    out[k] = x0[k] + drift[k] * elapsed + vol[k] * w[k];
                }
            }
            StateMap::Geometric { x0, drift, vol } => {
                for k in 0..out.len() {
                    out[k] = x0[k] * ((drift[k] - 0.5 * vol[k] * vol[k]) * elapsed + vol[k] * w[k]).exp();
                }
            }
        }
    }

    /// Inverse in the Brownian argument.
    pub fn brownian_of(&self, elapsed: f64, x: &[f64], out: &mut [f64]) {
        match self {
            StateMap::Arithmetic { x0, drift, vol } => {
                for k in 0..out.len() {
                    out[k] = (x[k] - x0[k] - drift[k] * elapsed) / vol[k];
                }
            }
            StateMap::Geometric { x0, drift, vol } => {
                for k in 0..out.len() {
                    out[k] =
                        ((x[k] / x0[k]).ln() - (drift[k] - 0.5 * vol[k] * vol[k]) * elapsed) / vol[k];
                }
            }
        }
    }

    /// Same dynamics started from another point.
    pub fn restarted(&self, x: &[f64]) -> Self {
        let mut out = self.clone();
        match &mut out {
            StateMap::Arithmetic { x0, .. } | StateMap::Geometric { x0, .. } => x0.copy_from_slice(x),
        }
        out
    }

    /// Drift and diffusion coefficients `(b(x), sigma(x))` of the first coordinate.
    pub fn coefficients(&self, x: f64) -> (f64, f64) {
        match self {
            StateMap::Arithmetic { drift, vol, .. } => (drift[0], vol[0]),
            StateMap::Geometric { drift, vol, .. } => (drift[0] * x, vol[0] * x),
        }
    }
}

/// A fully assembled problem: costs, driver, terminal payoff and the state
/// seen by the driver.
#[derive(Clone)]
pub struct Problem {
    pub structure: SwitchingStructure,
    pub generator: Arc<dyn Generator>,
    pub terminal: Arc<dyn Terminal>,
    pub state: StateMap,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("structure", &self.structure)
            .field("lipschitz", &self.generator.lipschitz())
            .field("state", &self.state)
            .finish()
    }
}

impl Problem {
    pub fn new(
        structure: SwitchingStructure,
        generator: Arc<dyn Generator>,
        terminal: Arc<dyn Terminal>,
        state: StateMap,
    ) -> Self {
        Self { structure, generator, terminal, state }
    }

    pub fn m(&self) -> usize {
        self.structure.m()
    }

    pub fn d(&self) -> usize {
        self.state.dim()
    }

    /// Same problem with the state restarted from `x`.
    pub fn restarted(&self, x: &[f64]) -> Self {
        Self { state: self.state.restarted(x), ..self.clone() }
    }

    pub fn with_structure(&self, structure: SwitchingStructure) -> Self {
        Self { structure, ..self.clone() }
    }
}

/// Serializable problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub costs: SwitchingStructure,
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
    #[serde(default)]
    pub state: Option<StateMap>,
    pub horizon: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_dim() -> usize {
    1
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SolverError::Structure("horizon must be positive".into()));
        }
        if self.dim == 0 {
            return Err(SolverError::Structure("dim must be at least 1".into()));
        }
        let m = self.costs.m();
        let generator = Arc::new(self.generator.build(m, self.dim)?);
        let terminal = self.terminal.build(&self.costs)?;
        let state = self.state.clone().unwrap_or_else(|| StateMap::brownian(self.dim));
        state.validate(self.dim)?;
        Ok(Problem::new(self.costs.clone(), generator, terminal, state))
    }
}

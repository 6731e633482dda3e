//! Experiment configuration: schema types, loading, environment overrides
//! and hashing.

use std::path::Path;

use obliq_core::lattice::{Branching, LatticeModel, LatticeSpec};
use obliq_core::pde::{PdeGridSpec, VariationalScheme};
use obliq_core::sde::SwitchedDiffusion;
use obliq_core::switching::EnumerationScope;
use obliq_core::{Problem, ProblemSpec, SwitchingStructure};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Prefix of environment variables that patch configuration fields, with
/// `__` separating path segments: `OBLIQ_CFG__solver__lattice__steps=128`.
pub const ENV_PREFIX: &str = "OBLIQ_CFG__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Backward equation on the driving Brownian motion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    /// Switched diffusion; its backward equation is derived from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<DiffusionBlock>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub checks: ChecksConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionBlock {
    pub costs: SwitchingStructure,
    pub model: SwitchedDiffusion,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub lattice: LatticeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<PenaltyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde: Option<PdeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub branching: Branching,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self { steps: default_steps(), branching: Branching::Binomial }
    }
}

fn default_steps() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub schedule: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(default)]
    pub start_mode: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enumerate: Option<EnumerationScope>,
    #[serde(default)]
    pub separation_audit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub paths: usize,
    /// Euler steps; a multiple of the lattice steps.
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Random comparison strategies on top of the extracted one.
    #[serde(default = "default_strategies")]
    pub strategies: usize,
    #[serde(default)]
    pub start_mode: usize,
}

fn default_strategies() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeConfig {
    pub grid: PdeGridSpec,
    #[serde(default)]
    pub scheme: VariationalScheme,
    /// Lattice steps for the cross-check at the base resolution.
    pub lattice_steps: usize,
    /// Sample points `(t, x)`.
    #[serde(default)]
    pub points: Vec<(f64, f64)>,
    /// Refinement factors applied to both the grid and the lattice.
    #[serde(default)]
    pub refinement: Vec<usize>,
    #[serde(default)]
    pub penalties: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_root: Option<Vec<f64>>,
    #[serde(default = "default_root_tol")]
    pub root_tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_form: Option<ClosedForm>,
    #[serde(default = "default_closed_tol")]
    pub closed_form_tolerance: f64,
    #[serde(default = "default_tight")]
    pub optimality_tolerance: f64,
    #[serde(default = "default_tight")]
    pub monotonicity_tolerance: f64,
    #[serde(default = "default_sigmas")]
    pub sigmas: f64,
    #[serde(default = "default_fk_tol")]
    pub feynman_kac_tolerance: f64,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("defaults")
    }
}

fn default_root_tol() -> f64 {
    1e-6
}
fn default_closed_tol() -> f64 {
    2e-3
}
fn default_tight() -> f64 {
    1e-9
}
fn default_sigmas() -> f64 {
    3.0
}
fn default_fk_tol() -> f64 {
    1e-2
}

/// Reference values with a closed form, per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClosedForm {
    /// `Y(0) = terminal * exp(rate * T)`, the solution for `psi = rate * y`
    /// and a constant terminal value.
    Exponential { rate: f64, terminal: f64 },
}

impl ClosedForm {
    pub fn value(&self, horizon: f64) -> f64 {
        match *self {
            ClosedForm::Exponential { rate, terminal } => terminal * (rate * horizon).exp(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.problem, &self.diffusion) {
            (Some(_), Some(_)) => {
                return Err(CliError::config("", "give either `problem` or `diffusion`, not both"))
            }
            (None, None) => return Err(CliError::config("", "missing field `problem` (or `diffusion`)")),
            _ => {}
        }
        if self.solver.lattice.steps == 0 {
            return Err(CliError::config("solver.lattice.steps", "must be positive"));
        }
        if let Some(mc) = &self.solver.monte_carlo {
            if self.diffusion.is_none() {
                return Err(CliError::config("solver.monte_carlo", "needs a `diffusion` block"));
            }
            if mc.paths == 0 || mc.steps == 0 || mc.steps % self.solver.lattice.steps != 0 {
                return Err(CliError::config(
                    "solver.monte_carlo.steps",
                    "must be a positive multiple of solver.lattice.steps",
                ));
            }
        }
        if let Some(p) = &self.solver.penalty {
            if p.schedule.is_empty() || p.schedule.iter().any(|n| !(*n >= 0.0 && n.is_finite())) {
                return Err(CliError::config("solver.penalty.schedule", "needs finite non-negative penalties"));
            }
        }
        self.build_problem()?;
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        match (&self.problem, &self.diffusion) {
            (Some(p), _) => p.horizon,
            (_, Some(d)) => d.model.horizon,
            _ => f64::NAN,
        }
    }

    pub fn build_problem(&self) -> Result<Problem, CliError> {
        match (&self.problem, &self.diffusion) {
            (Some(p), _) => p.build().map_err(|e| CliError::config("problem", e.to_string())),
            (_, Some(d)) => d.model.lattice_problem(&d.costs).map_err(|e| CliError::config("diffusion", e.to_string())),
            _ => Err(CliError::config("", "missing field `problem` (or `diffusion`)")),
        }
    }

    pub fn lattice(&self) -> Result<LatticeModel, CliError> {
        let dim = self.problem.as_ref().map_or(1, |p| p.dim);
        let spec = LatticeSpec::new(self.horizon(), self.solver.lattice.steps, dim).branching(self.solver.lattice.branching);
        LatticeModel::new(&spec).map_err(|e| CliError::config("solver.lattice", e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Writes `value` at the `__`-separated `path` inside `root`, creating
/// objects on the way. `raw` is parsed as JSON when possible and kept as a
/// string otherwise.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split("__").filter(|s| !s.is_empty()).collect();
    if segments.is_empty() {
        return Err(CliError::config(path, "empty override path"));
    }
    let mut cur = root;
    for (depth, seg) in segments.iter().enumerate() {
        let last = depth + 1 == segments.len();
        if let Ok(idx) = seg.parse::<usize>() {
            if let Value::Array(items) = cur {
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::config(path, format!("index {idx} out of range ({len} items)")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                cur = slot;
                continue;
            }
        }
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let map = cur.as_object_mut().expect("object");
        if last {
            map.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cur = map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Overrides with `prefix` taken from `vars`, in sorted key order.
pub fn apply_env_overrides<I>(root: &mut Value, prefix: &str, vars: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut selected: Vec<(String, String)> =
        vars.into_iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|p| (p.to_string(), v))).collect();
    selected.sort();
    for (path, raw) in selected {
        apply_override(root, &path, &raw)?;
    }
    Ok(())
}

/// Deserializes with the failing field path in the error.
pub fn from_value<T: serde::de::DeserializeOwned>(value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(if path == "." { "" } else { &path }, e.into_inner().to_string())
    })
}

pub fn parse_config(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<ExperimentConfig, CliError> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| CliError::config("", format!("invalid JSON: {e}")))?;
    apply_env_overrides(&mut value, ENV_PREFIX, env)?;
    let config: ExperimentConfig = from_value(value)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text, env)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "problem": {
            "costs": [[0, 0.5], [0.5, 0]],
            "generator": {"kind": "constant", "c": [2, 0]},
            "terminal": {"kind": "constant", "values": [0, 0]},
            "horizon": 1.0
        }
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = parse_config(MINIMAL, Vec::new()).unwrap();
        assert_eq!(c.solver.lattice.steps, 64);
        assert_eq!(c.checks.sigmas, 3.0);
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let env = vec![
            ("OBLIQ_CFG__solver__lattice__steps".to_string(), "16".to_string()),
            ("OBLIQ_CFG__problem__costs".to_string(), "[[0, 0.25], [0.25, 0]]".to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        let c = parse_config(MINIMAL, env).unwrap();
        assert_eq!(c.solver.lattice.steps, 16);
        assert_eq!(c.problem.unwrap().costs.cost(0, 1), 0.25);
    }

    #[test]
    fn array_index_override() {
        let mut v: Value = serde_json::from_str(r#"{"a": [1, 2, 3]}"#).unwrap();
        apply_override(&mut v, "a__1", "5").unwrap();
        assert_eq!(v["a"][1], 5);
        assert!(apply_override(&mut v, "a__7", "5").is_err());
    }

    #[test]
    fn missing_costs_names_the_field() {
        let text = r#"{"problem": {"generator": {"kind": "constant", "c": [0]},
                      "terminal": {"kind": "constant", "values": [0]}, "horizon": 1}}"#;
        let err = parse_config(text, Vec::new()).unwrap_err().to_string();
        assert!(err.contains("problem") && err.contains("costs"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected_with_path() {
        let text = MINIMAL.replace("\"horizon\": 1.0", "\"horizon\": 1.0, \"horizn\": 2");
        let err = parse_config(&text, Vec::new()).unwrap_err().to_string();
        assert!(err.contains("horizn"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse_config(MINIMAL, Vec::new()).unwrap();
        let b = parse_config(MINIMAL, vec![("OBLIQ_CFG__solver__lattice__steps".into(), "8".into())]).unwrap();
        assert_eq!(a.hash(), parse_config(MINIMAL, Vec::new()).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
    }
}

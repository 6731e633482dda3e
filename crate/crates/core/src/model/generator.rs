use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};

/// Driver `psi(t, x, y, z, i)` of the per-mode backward equations.
///
/// `x` carries the Markov state (or is empty when the driver does not depend
/// on it). Implementations must be Lipschitz in `(y, z)` with constant
/// [`Generator::lipschitz`].
pub trait Generator: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], mode: usize) -> f64;

    fn lipschitz(&self) -> f64;

    fn dy(&self, t: f64, x: &[f64], y: f64, z: &[f64], mode: usize) -> f64 {
        let h = 1e-6 * (1.0 + y.abs());
        (self.eval(t, x, y + h, z, mode) - self.eval(t, x, y - h, z, mode)) / (2.0 * h)
    }

    fn dz(&self, t: f64, x: &[f64], y: f64, z: &[f64], mode: usize, k: usize) -> f64 {
        let h = 1e-6 * (1.0 + z[k].abs());
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[k] += h;
        zm[k] -= h;
        (self.eval(t, x, y, &zp, mode) - self.eval(t, x, y, &zm, mode)) / (2.0 * h)
    }
}

/// State-dependent running cost used by [`GeneratorSpec::RunningCost`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunningCost {
    Constant { c: f64 },
    /// `scale * (x_0 - center)^2`.
    Quadratic { center: f64, #[serde(default = "one")] scale: f64 },
    /// `slope * x_0 + intercept`.
    Affine { slope: f64, intercept: f64 },
}

fn one() -> f64 {
    1.0
}

impl RunningCost {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let x0 = x.first().copied().unwrap_or(0.0);
        match *self {
            RunningCost::Constant { c } => c,
            RunningCost::Quadratic { center, scale } => scale * (x0 - center) * (x0 - center),
            RunningCost::Affine { slope, intercept } => slope * x0 + intercept,
        }
    }
}

/// Registry of named parametric drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// `psi = a_i y + b_i . z + c_i`.
    Linear {
        a: Vec<f64>,
        #[serde(default)]
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
    /// `psi = c_i`.
    Constant { c: Vec<f64> },
    /// `psi = l_i(x) + z . b_i`, the driver attached to a switched diffusion
    /// with running cost `l` and control drift `b`.
    RunningCost {
        cost: Vec<RunningCost>,
        #[serde(default)]
        drift: Vec<Vec<f64>>,
    },
    /// `psi = offset + amplitude * cos(2 pi (t / period - i / m))`: the cheap
    /// mode rotates through the modes over time.
    Rotating {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl GeneratorSpec {
    pub fn build(&self, m: usize, d: usize) -> Result<ParametricGenerator> {
        let bad = |what: &str| Err(SolverError::Structure(format!("generator: {what}")));
        let check_vec = |v: &[Vec<f64>], name: &str| -> Result<()> {
            if !v.is_empty() && (v.len() != m || v.iter().any(|r| r.len() != d)) {
                return Err(SolverError::Structure(format!(
                    "generator: `{name}` must be {m} rows of length {d}"
                )));
            }
            Ok(())
        };
        match self {
            GeneratorSpec::Linear { a, b, c } => {
                if a.len() != m || c.len() != m {
                    return bad(&format!("`a` and `c` need {m} entries"));
                }
                check_vec(b, "b")?;
            }
            GeneratorSpec::Constant { c } => {
                if c.len() != m {
                    return bad(&format!("`c` needs {m} entries"));
                }
            }
            GeneratorSpec::RunningCost { cost, drift } => {
                if cost.len() != m {
                    return bad(&format!("`cost` needs {m} entries"));
                }
                check_vec(drift, "drift")?;
            }
            GeneratorSpec::Rotating { period, .. } => {
                if *period <= 0.0 {
                    return bad("`period` must be positive");
                }
            }
        }
        Ok(ParametricGenerator { spec: self.clone(), m })
    }
}

#[derive(Debug, Clone)]
pub struct ParametricGenerator {
    spec: GeneratorSpec,
    m: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl ParametricGenerator {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }
}

impl Generator for ParametricGenerator {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], mode: usize) -> f64 {
        match &self.spec {
            GeneratorSpec::Linear { a, b, c } => {
                let bz = if b.is_empty() { 0.0 } else { dot(&b[mode], z) };
                a[mode] * y + bz + c[mode]
            }
            GeneratorSpec::Constant { c } => c[mode],
            GeneratorSpec::RunningCost { cost, drift } => {
                let bz = if drift.is_empty() { 0.0 } else { dot(&drift[mode], z) };
                cost[mode].eval(x) + bz
            }
            GeneratorSpec::Rotating { amplitude, period, offset } => {
                let phase = t / period - mode as f64 / self.m as f64;
                offset + amplitude * (2.0 * PI * phase).cos()
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        match &self.spec {
            GeneratorSpec::Linear { a, b, .. } => (0..self.m)
                .map(|i| {
                    let bn = if b.is_empty() { 0.0 } else { norm(&b[i]) };
                    a[i].abs().max(bn)
                })
                .fold(0.0, f64::max),
            GeneratorSpec::Constant { .. } | GeneratorSpec::Rotating { .. } => 0.0,
            GeneratorSpec::RunningCost { drift, .. } => {
                drift.iter().map(|b| norm(b)).fold(0.0, f64::max)
            }
        }
    }

    fn dy(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], mode: usize) -> f64 {
        match &self.spec {
            GeneratorSpec::Linear { a, .. } => a[mode],
            _ => 0.0,
        }
    }

    fn dz(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], mode: usize, k: usize) -> f64 {
        match &self.spec {
            GeneratorSpec::Linear { b, .. } if !b.is_empty() => b[mode][k],
            GeneratorSpec::RunningCost { drift, .. } if !drift.is_empty() => drift[mode][k],
            _ => 0.0,
        }
    }
}

/// Randomized spot check of the Lipschitz bound in `(y, z)`. Returns the
/// largest observed ratio `|psi(y,z) - psi(y',z')| / (|y - y'| + |z - z'|)`.
pub fn probe_lipschitz(
    generator: &dyn Generator,
    m: usize,
    d: usize,
    horizon: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let t = rng.random::<f64>() * horizon;
        let mode = rng.random_range(0..m);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: f64 = rng.random_range(-10.0..10.0);
        let y2 = y + rng.random_range(-1.0..1.0);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let z2: Vec<f64> = z.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let dist = (y - y2).abs() + norm(&z.iter().zip(&z2).map(|(a, b)| a - b).collect::<Vec<_>>());
        if dist < 1e-12 {
            continue;
        }
        let diff = (generator.eval(t, &x, y, &z, mode) - generator.eval(t, &x, y2, &z2, mode)).abs();
        worst = worst.max(diff / dist);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_eval_and_bound() {
        let g = GeneratorSpec::Linear { a: vec![-0.1, 0.5], b: vec![vec![0.3], vec![-2.0]], c: vec![1.0, 0.0] }
            .build(2, 1)
            .unwrap();
        assert!((g.eval(0.0, &[], 2.0, &[1.0], 0) - (-0.2 + 0.3 + 1.0)).abs() < 1e-15);
        assert_eq!(g.lipschitz(), 2.0);
        let probed = probe_lipschitz(&g, 2, 1, 1.0, 2000, 7);
        assert!(probed <= g.lipschitz() + 1e-12, "{probed}");
        assert!(probed > 0.5 * g.lipschitz());
    }

    #[test]
    fn running_cost_driver() {
        let g = GeneratorSpec::RunningCost {
            cost: vec![RunningCost::Quadratic { center: 1.0, scale: 1.0 }, RunningCost::Constant { c: 0.2 }],
            drift: vec![vec![0.1], vec![-0.1]],
        }
        .build(2, 1)
        .unwrap();
        assert!((g.eval(0.0, &[3.0], 0.0, &[2.0], 0) - (4.0 + 0.2)).abs() < 1e-15);
        assert!((g.eval(0.0, &[3.0], 0.0, &[2.0], 1) - (0.2 - 0.2)).abs() < 1e-15);
        assert!((g.lipschitz() - 0.1).abs() < 1e-15);
        assert!(probe_lipschitz(&g, 2, 1, 1.0, 500, 1) <= 0.1 + 1e-12);
    }

    #[test]
    fn rotating_phases() {
        let g = GeneratorSpec::Rotating { amplitude: 1.0, period: 1.0, offset: 0.0 }.build(3, 1).unwrap();
        assert!((g.eval(0.0, &[], 0.0, &[0.0], 0) - 1.0).abs() < 1e-15);
        assert!((g.eval(1.0 / 3.0, &[], 0.0, &[0.0], 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        assert!(GeneratorSpec::Constant { c: vec![1.0] }.build(2, 1).is_err());
        assert!(GeneratorSpec::Linear { a: vec![0.0; 2], b: vec![vec![0.0; 2]; 2], c: vec![0.0; 2] }
            .build(2, 1)
            .is_err());
    }

    #[test]
    fn spec_json_shape() {
        let g: GeneratorSpec = serde_json::from_str(r#"{"kind":"constant","c":[2.0,0.0]}"#).unwrap();
        assert_eq!(g, GeneratorSpec::Constant { c: vec![2.0, 0.0] });
    }
}

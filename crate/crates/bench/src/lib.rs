//! Shared benchmark fixtures.

use obliq_core::sde::{CostArgument, SwitchedDiffusion, Volatility};
use obliq_core::{GeneratorSpec, Problem, ProblemSpec, RunningCost, SwitchingStructure, TerminalSpec};

/// Two modes, linear driver with a mode-dependent `z` coefficient.
pub fn linear_two_mode() -> Problem {
    ProblemSpec {
        costs: SwitchingStructure::uniform(2, 0.2).expect("valid costs"),
        generator: GeneratorSpec::Linear { a: vec![-0.1, -0.1], b: vec![vec![0.3], vec![-0.3]], c: vec![1.0, -0.5] },
        terminal: TerminalSpec::Affine { slope: vec![1.0, 1.0], intercept: vec![0.0, 0.0] },
        state: None,
        horizon: 1.0,
        dim: 1,
    }
    .build()
    .expect("valid problem")
}

/// Three modes whose cheap mode rotates over time.
pub fn rotating_three_mode() -> Problem {
    ProblemSpec {
        costs: SwitchingStructure::uniform(3, 0.1).expect("valid costs"),
        generator: GeneratorSpec::Rotating { amplitude: 1.0, period: 1.0, offset: 0.0 },
        terminal: TerminalSpec::Constant { values: vec![0.0; 3] },
        state: None,
        horizon: 1.0,
        dim: 1,
    }
    .build()
    .expect("valid problem")
}

pub fn quadratic_diffusion() -> (SwitchedDiffusion, SwitchingStructure) {
    let model = SwitchedDiffusion {
        x0: vec![1.0],
        horizon: 1.0,
        volatility: Volatility::Proportional { vol: vec![0.2] },
        drift: vec![vec![-0.1], vec![0.1]],
        cost: vec![
            RunningCost::Quadratic { center: 0.9, scale: 1.0 },
            RunningCost::Quadratic { center: 1.1, scale: 1.0 },
        ],
        cost_argument: CostArgument::Current,
    };
    (model, SwitchingStructure::uniform(2, 0.005).expect("valid costs"))
}

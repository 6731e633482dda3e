pub mod costs;
pub mod domain;
pub mod generator;
pub mod problem;

pub use costs::{validate_costs, CostReport, SwitchingStructure};
pub use domain::{separation_constant, DomainGeometry, Separation};
pub use generator::{probe_lipschitz, Generator, GeneratorSpec, ParametricGenerator, RunningCost};
pub use problem::{Problem, ProblemSpec, StateMap, Terminal, TerminalSpec};

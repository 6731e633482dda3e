//! Configuration, experiment pipeline and acceptance suite behind the
//! `obliq` binary.

pub mod acceptance;
pub mod config;
pub mod error;
pub mod pipeline;

pub use error::CliError;

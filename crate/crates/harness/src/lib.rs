//! Configuration-driven experiment runner: JSON configs in, CSV tables, SVG
//! charts and a metadata file out.

pub mod config;
pub mod error;
pub mod output;
pub mod presets;
pub mod runner;
pub mod synth;

pub use config::{ExperimentConfig, Kind};
pub use error::{HarnessError, Result};
pub use layerdyn;

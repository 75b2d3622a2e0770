//! Experiment runner: configuration, seeded fan-out over baselines,
//! oracle checks, regret sweeps and heatmap export.

mod config;
mod experiment;
mod heatmap;
mod oracle;
mod sweep;

pub use config::*;
pub use experiment::*;
pub use heatmap::*;
pub use oracle::*;
pub use sweep::*;

//! Command-line front end: run configuration, file formats, plotting and
//! the `train`, `eval`, `recover` and `plot` commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod trajectory;

pub use commands::{cmd_eval, cmd_plot, cmd_recover, cmd_train, EvalReport, RecoverReport, TrainSummary};
pub use config::RunConfig;
pub use error::{CliError, Result};
pub use trajectory::{TrajectoryFile, TrajectoryHeader, TrajectoryRow};

//! Configuration, checkpoints and the command-line interface.

mod checkpoint;
mod cli;
mod config;

pub use checkpoint::{Checkpoint, NamedTensor, MAGIC};
pub use cli::{cli_main, CHECKPOINT_FILE, GRADCHECK_TOLERANCE, HISTORY_FILE, METRICS_FILE};
pub use config::{parse_config, Paths, RunConfig};

//! Library side of the `sentifuse` command: configuration parsing, run
//! manifests and the command implementations.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use commands::{run, Command, Invocation, Outcome};
pub use config::{parse_config, RunConfig};
pub use error::{CliError, ErrorKind};
pub use run::RunManifest;

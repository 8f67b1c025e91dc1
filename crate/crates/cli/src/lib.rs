//! Configuration, error reporting and the pipeline commands behind the `cfdense` binary.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

pub use commands::{execute, Command, Layout};
pub use config::{parse_overrides, RunConfig, RUN_DIR_ENV};
pub use error::CliError;

/// Run directory: explicit flag, then `paths.run_dir`, then the environment, then `runs/default`.
pub fn resolve_run_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.paths.run_dir.clone())
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/default"))
}

/// Loads the config, applies overrides and runs `command`.
pub fn run(command: Command, config: Option<&Path>, run_dir: Option<&Path>, overrides: &[String]) -> Result<PathBuf, CliError> {
    let overrides = parse_overrides(overrides)?;
    let cfg = RunConfig::load(config, &overrides)?;
    let layout = Layout::new(&cfg, resolve_run_dir(run_dir, &cfg));
    execute(command, &cfg, &layout)
}

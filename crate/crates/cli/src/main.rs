use std::path::PathBuf;
use std::process::ExitCode;

use cfdense_cli::Command;
use clap::Parser;

/// Counterfactual dense contrastive pretraining and evaluation.
#[derive(Parser, Debug)]
#[command(name = "cfdense", version)]
struct Args {
    /// Pipeline step to run.
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides paths.run_dir and CFDENSE_RUN_DIR).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Dotted overrides such as `--train.steps 100` or `--loss.method=sdvd`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

/// Pulls `--config` / `--run-dir` out of the trailing overrides so the
/// flags may appear anywhere on the line.
fn take_flag(rest: &mut Vec<String>, name: &str) -> Option<PathBuf> {
    let flag = format!("--{name}");
    let prefix = format!("--{name}=");
    let mut found = None;
    let mut i = 0;
    while i < rest.len() {
        if rest[i] == flag && i + 1 < rest.len() {
            found = Some(PathBuf::from(rest.remove(i + 1)));
            rest.remove(i);
        } else if let Some(v) = rest[i].strip_prefix(&prefix) {
            found = Some(PathBuf::from(v));
            rest.remove(i);
        } else {
            i += 1;
        }
    }
    found
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = Args::parse();
    let config = take_flag(&mut args.overrides, "config").or(args.config);
    let run_dir = take_flag(&mut args.overrides, "run-dir").or(args.run_dir);
    match cfdense_cli::run(args.command, config.as_deref(), run_dir.as_deref(), &args.overrides) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

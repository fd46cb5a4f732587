//! `ipdmix` command-line tool.
//!
//! Exit codes: 0 success, 2 invalid input or usage, 3 not estimable
//! (separation, singular information, enumeration cap), 4 no convergence.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use ipdmix::ErrorCategory;

use args::{Cli, Command};
use manifest::Run;

fn exit_code(err: &anyhow::Error) -> u8 {
    let category = err
        .chain()
        .find_map(|e| e.downcast_ref::<ipdmix::Error>())
        .map(ipdmix::Error::category);
    match category {
        Some(ErrorCategory::Estimability) => 3,
        Some(ErrorCategory::Convergence) => 4,
        Some(ErrorCategory::Input) | None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let raw: Vec<_> = std::env::args_os().collect();
    let argv = match args::merge_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };

    let common = cli.command.common().clone();
    let mut run = Run::new(
        &common.out,
        cli.command.name(),
        argv.iter()
            .skip(1)
            .map(|a| a.to_string_lossy().into_owned())
            .collect(),
    );
    let result = match &cli.command {
        Command::Estimate(a) => commands::estimate(a, &mut run),
        Command::Select(a) => commands::select_cmd(a, &mut run),
        Command::ReCurve(a) => commands::re_curve(a, &mut run),
        Command::Simulate(a) => commands::simulate(a, &mut run),
        Command::Summarize(a) => commands::summarize(a, &mut run),
    };
    if let Err(e) = run.finish(&result) {
        eprintln!("warning: could not write the manifest: {e:#}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

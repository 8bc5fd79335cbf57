mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn run(cli: Cli) -> seedloc::Result<ExitCode> {
    let mut cfg = RunConfig::resolve(cli.command.common())?;
    let out = &cli.command.common().out;
    match &cli.command {
        Command::GenPhantom { count, .. } => commands::gen_phantom(&mut cfg, *count, out)?,
        Command::MakeTargets { dataset, .. } => commands::make_targets(&cfg, dataset, out)?,
        Command::Train { dataset, .. } => commands::train_cmd(&cfg, dataset, out)?,
        Command::Infer {
            model, dataset, volumes, ..
        } => commands::infer_cmd(&cfg, model, dataset.as_deref(), volumes, out)?,
        Command::Evaluate {
            gt,
            det,
            dataset,
            detections,
            ..
        } => commands::evaluate_cmd(&cfg, gt.as_deref(), det.as_deref(), dataset.as_deref(), detections.as_deref(), out)?,
        Command::Gradcheck { .. } => {
            if !commands::gradcheck_cmd(&cfg, out)? {
                eprintln!("error: gradient check exceeded its bounds");
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
        Command::Report { inputs, .. } => commands::report_cmd(&cfg, inputs, out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}

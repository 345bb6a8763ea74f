mod args;
mod commands;
mod data;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// A run that completed but whose result fails a gate.
pub struct EvalFailure(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<rfx_core::Error>() {
        Some(rfx_core::Error::Divergence { .. } | rfx_core::Error::FrozenViolation(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let g = &cli.global;
    let result = match &cli.command {
        Command::Features(a) => commands::features(g, a),
        Command::Infer(a) => commands::infer(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::Bench(a) => commands::bench(g, a),
        Command::Roc(a) => commands::roc(g, a),
        Command::Sanity(a) => commands::sanity(g, a),
        Command::CodecSweep(a) => commands::codec_sweep(g, a),
        Command::Bandwidth(a) => commands::bandwidth(g, a),
        Command::Ablate(a) => commands::ablate(g, a),
        Command::Gradcheck(a) => commands::gradcheck(g, a),
    };
    match result {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(EvalFailure(msg))) => {
            eprintln!("FAIL: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sector::harness::scenario::Scenario;

/// Deterministic cluster scenarios checked against a serial reference.
#[derive(Parser)]
#[command(name = "sector-harness", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs a scenario file and prints a JSON report.
    Run { scenario: PathBuf },
}

fn run(args: Args) -> Result<bool, String> {
    match args.cmd {
        Cmd::Run { scenario } => {
            let text = std::fs::read_to_string(&scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
            let sc = Scenario::parse(&text).map_err(|e| e.to_string())?;
            let reports = sc.run().map_err(|e| e.to_string())?;
            let matched = reports.iter().all(|r| r.matched);
            let out = serde_json::json!({ "matched": matched, "runs": reports });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
            Ok(matched)
        }
    }
}

fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("sector-harness: {e}");
            ExitCode::FAILURE
        }
    }
}

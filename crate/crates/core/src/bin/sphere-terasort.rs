use std::process::ExitCode;

use clap::Parser;
use sector::apps::terasort;
use sector::cli::{self, ClientArgs};
use sector::harness::reference::Stage;
use sector::sphere::{DEFAULT_SMAX, DEFAULT_SMIN};

/// Two-stage sort: hash records into key-range buckets, then sort each bucket.
#[derive(Parser)]
#[command(name = "sphere-terasort", version)]
struct Args {
    #[command(flatten)]
    conn: ClientArgs,
    #[arg(long, default_value = "/sort/*.dat", value_name = "GLOB")]
    input: String,
    #[arg(long, default_value_t = 16)]
    buckets: u32,
    #[arg(long, default_value = "/terasort")]
    output: String,
    #[arg(long, value_name = "BYTES", default_value_t = DEFAULT_SMIN)]
    smin: u64,
    #[arg(long, value_name = "BYTES", default_value_t = DEFAULT_SMAX)]
    smax: u64,
    /// Compares the result with a local sort of the input.
    #[arg(long)]
    verify: bool,
}

fn run(args: Args) -> Result<bool, String> {
    if args.buckets == 0 {
        return Err("--buckets must be at least 1".into());
    }
    let client = args.conn.connect()?;
    let inputs = client.expand(&args.input)?;
    if inputs.is_empty() {
        return Err(format!("no files match `{}`", args.input));
    }
    let stages = [
        Stage::new(terasort::HASH).buckets(args.buckets).bounds(args.smin, args.smax),
        Stage::new(terasort::SORT).per_file(),
    ];
    let reports = client.run_chain(inputs.clone(), &stages, &args.output)?;
    let sorted = reports.last().expect("two stages").collect().expect("checked");
    let mut ok = true;
    let mut report = serde_json::json!({
        "stages": reports.iter().map(cli::report_json).collect::<Vec<_>>(),
    });
    if args.verify {
        let want = terasort::reference_sort(&client.download_all(&inputs)?);
        let got = client.download_all(&sorted)?;
        ok = got == want;
        report["verified"] = ok.into();
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    client.stop();
    Ok(ok)
}

fn main() -> ExitCode {
    cli::init_logging();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("sphere-terasort: {e}");
            ExitCode::FAILURE
        }
    }
}

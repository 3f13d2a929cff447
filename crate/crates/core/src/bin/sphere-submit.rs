use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use sector::cli::{self, ClientArgs};
use sector::client::JobSpec;
use sector::proto::OutputMode;
use sector::sphere::{DEFAULT_SMAX, DEFAULT_SMIN};

/// Runs one UDF over the files matching `--input`.
#[derive(Parser)]
#[command(name = "sphere-submit", version)]
struct Args {
    #[command(flatten)]
    conn: ClientArgs,
    /// Sector path pattern; repeatable.
    #[arg(long, required = true, value_name = "GLOB")]
    input: Vec<String>,
    #[arg(long)]
    udf: String,
    /// Output buckets; 0 keeps results local to each engine.
    #[arg(long, default_value_t = 0)]
    buckets: u32,
    /// One segment per input file.
    #[arg(long)]
    per_file: bool,
    #[arg(long, value_name = "BYTES", default_value_t = DEFAULT_SMIN)]
    smin: u64,
    #[arg(long, value_name = "BYTES", default_value_t = DEFAULT_SMAX)]
    smax: u64,
    #[arg(long, default_value = "/sphere")]
    output: String,
    /// Opaque UDF parameters.
    #[arg(long, default_value = "")]
    params: String,
    /// Seconds of silence before an engine is dropped.
    #[arg(long, default_value_t = 10)]
    timeout: u64,
}

fn run(args: Args) -> Result<bool, String> {
    let client = args.conn.connect()?;
    let mut inputs = Vec::new();
    for pattern in &args.input {
        let found = client.expand(pattern)?;
        if found.is_empty() {
            return Err(format!("no files match `{pattern}`"));
        }
        inputs.extend(found);
    }
    let mode = match args.buckets {
        0 => OutputMode::Local,
        b => OutputMode::Buckets(b),
    };
    let mut spec = JobSpec::new(inputs, args.udf, mode);
    spec.per_file = args.per_file;
    spec.smin = args.smin;
    spec.smax = args.smax;
    spec.output_prefix = args.output;
    spec.params = args.params.into_bytes();
    spec.timeout = Duration::from_secs(args.timeout.max(1));
    let report = client.job(spec).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&cli::report_json(&report)).expect("json"));
    client.stop();
    Ok(report.failures.is_empty())
}

fn main() -> ExitCode {
    cli::init_logging();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("sphere-submit: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sector::apps::invidx;
use sector::cli::{self, ClientArgs};
use sector::harness::reference::Stage;

/// Builds a word-to-pages index over text files.
#[derive(Parser)]
#[command(name = "sphere-invidx", version)]
struct Args {
    #[command(flatten)]
    conn: ClientArgs,
    #[arg(long, default_value = "/web/*", value_name = "GLOB")]
    input: String,
    #[arg(long, default_value = "/invidx")]
    output: String,
    /// Local pages to store under `--dir` first.
    #[arg(long)]
    upload: Vec<PathBuf>,
    #[arg(long, default_value = "/web")]
    dir: String,
    /// Compares the index with one built locally from the same pages.
    #[arg(long)]
    verify: bool,
}

fn page_name(path: &str) -> &str {
    let base = path.rsplit('/').next().unwrap_or(path);
    match base.rfind('.') {
        Some(0) | None => base,
        Some(i) => &base[..i],
    }
}

fn run(args: Args) -> Result<bool, String> {
    let client = args.conn.connect()?;
    for local in &args.upload {
        let name = local
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| format!("{}: not a file name", local.display()))?;
        let data = std::fs::read(local).map_err(|e| format!("{}: {e}", local.display()))?;
        let path = format!("{}/{name}", args.dir.trim_end_matches('/'));
        client.upload(&path, data, None).map_err(|e| format!("{path}: {e}"))?;
    }
    let inputs = client.expand(&args.input)?;
    if inputs.is_empty() {
        return Err(format!("no files match `{}`", args.input));
    }
    let stages = [
        Stage::new(invidx::MAP).buckets(invidx::BUCKETS).per_file(),
        Stage::new(invidx::REDUCE).per_file(),
    ];
    let reports = client.run_chain(inputs.clone(), &stages, &args.output)?;
    let index = reports.last().expect("two stages").collect().expect("checked");
    let mut ok = true;
    let mut report = serde_json::json!({
        "stages": reports.iter().map(cli::report_json).collect::<Vec<_>>(),
    });
    if args.verify {
        let mut pages = Vec::new();
        for p in &inputs {
            let text = client.download(p).map_err(|e| format!("{p}: {e}"))?;
            pages.push((page_name(p).to_string(), text));
        }
        let want: Vec<u8> = invidx::reference_index(&pages, invidx::BUCKETS).into_values().flatten().collect();
        ok = client.download_all(&index)? == want;
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
            eprintln!("sphere-invidx: {e}");
            ExitCode::FAILURE
        }
    }
}

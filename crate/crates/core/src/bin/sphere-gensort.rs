use std::process::ExitCode;

use clap::Parser;
use sector::apps::gensort::{self, RECORD};
use sector::cli::{self, ClientArgs};

/// Generates sort-benchmark slices and stores them in Sector.
#[derive(Parser)]
#[command(name = "sphere-gensort", version)]
struct Args {
    #[command(flatten)]
    conn: ClientArgs,
    /// Number of slices.
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    /// Bytes per slice, a multiple of the record size.
    #[arg(long, default_value_t = 100 * 10_000)]
    bytes_per_node: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "/sort")]
    dir: String,
    /// Reads every slice back and compares it with the generator.
    #[arg(long)]
    verify: bool,
}

fn run(args: Args) -> Result<bool, String> {
    if !args.bytes_per_node.is_multiple_of(RECORD as u64) {
        return Err(format!("--bytes-per-node must be a multiple of {RECORD}"));
    }
    let client = args.conn.connect()?;
    let mut ok = true;
    for node in 0..args.nodes {
        let path = gensort::slice_path(&args.dir, node);
        let data = gensort::generate(node, args.bytes_per_node, args.seed).map_err(|e| e.to_string())?;
        let index = sector::model::RecordIndex::fixed_width(args.bytes_per_node / RECORD as u64, RECORD as u64)
            .map_err(|e| e.to_string())?;
        client.upload(&path, data.clone(), Some(index)).map_err(|e| format!("{path}: {e}"))?;
        if args.verify {
            let back = client.download(&path).map_err(|e| format!("{path}: {e}"))?;
            let same = back == data;
            ok &= same;
            println!("{path} {}", if same { "ok" } else { "MISMATCH" });
        } else {
            println!("{path}");
        }
    }
    client.stop();
    Ok(ok)
}

fn main() -> ExitCode {
    cli::init_logging();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("sphere-gensort: {e}");
            ExitCode::FAILURE
        }
    }
}

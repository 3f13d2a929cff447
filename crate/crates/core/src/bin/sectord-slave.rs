use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use sector::apps::builtin_registry;
use sector::cli;
use sector::model::Location;
use sector::slave::{Slave, SlaveSettings, SliceStore};

/// Storage and processing node.
#[derive(Parser)]
#[command(name = "sectord-slave", version)]
struct Args {
    /// Directory holding this node's slices.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, value_name = "HOST:PORT")]
    master: SocketAddr,
    /// Messaging address; data uses the next port.
    #[arg(long, value_name = "HOST:PORT")]
    listen: SocketAddr,
    /// `<dc>/<rack>/<node>`, reported to the master.
    #[arg(long)]
    location: Option<Location>,
    /// Processing engines on this node.
    #[arg(long, default_value_t = 1)]
    spe: u32,
    /// Storage limit in bytes.
    #[arg(long)]
    capacity: Option<u64>,
}

fn run(args: Args) -> Result<(), String> {
    let mut store = SliceStore::open(&args.root).map_err(|e| format!("{}: {e}", args.root.display()))?;
    if let Some(c) = args.capacity {
        store = store.with_capacity(c);
    }
    let mut settings = SlaveSettings::new(args.master);
    settings.location = args.location;
    settings.spe_count = args.spe.max(1);
    let slave = Slave::new(settings, store, Arc::new(builtin_registry()));
    let node = cli::serve(Box::new(slave), args.listen).map_err(|e| format!("bind {}: {e}", args.listen))?;
    log::info!("slave on {} serving {}", node.msg_addr(), args.root.display());
    node.join();
    Ok(())
}

fn main() -> ExitCode {
    cli::init_logging();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sectord-slave: {e}");
            ExitCode::FAILURE
        }
    }
}

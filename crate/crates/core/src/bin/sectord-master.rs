use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sector::cli;
use sector::master::{Master, MasterConfig, MasterSettings};
use sector::model::Topology;

/// Metadata and slave coordinator.
#[derive(Parser)]
#[command(name = "sectord-master", version)]
struct Args {
    #[arg(long, value_name = "HOST:PORT")]
    listen: SocketAddr,
    /// Address of the security server.
    #[arg(long, value_name = "HOST:PORT")]
    security: SocketAddr,
    /// Lines of `<dc>/<rack>/<node> <host:port>`.
    #[arg(long)]
    topology: PathBuf,
    #[arg(long, default_value_t = 3)]
    replicas: usize,
    /// Key shared with the security server.
    #[arg(long, value_name = "HEX")]
    psk: String,
    /// Key shared with clients; defaults to `--psk`.
    #[arg(long, value_name = "HEX")]
    client_psk: Option<String>,
    /// Seconds between replication sweeps.
    #[arg(long, default_value_t = 10.0)]
    sweep: f64,
}

fn run(args: Args) -> Result<(), String> {
    let text = std::fs::read_to_string(&args.topology).map_err(|e| format!("{}: {e}", args.topology.display()))?;
    let topology = Topology::parse(&text).map_err(|e| e.to_string())?;
    let security_psk = cli::parse_psk(&args.psk)?;
    let client_psk = match &args.client_psk {
        Some(k) => cli::parse_psk(k)?,
        None => security_psk.clone(),
    };
    if args.replicas == 0 {
        return Err("--replicas must be at least 1".into());
    }
    if !(args.sweep.is_finite() && args.sweep > 0.0) {
        return Err("--sweep must be positive".into());
    }
    let settings = MasterSettings {
        config: MasterConfig {
            replicas: args.replicas,
            sweep_interval: std::time::Duration::from_secs_f64(args.sweep),
            ..MasterConfig::default()
        },
        security: args.security,
        security_psk,
        client_psk,
        topology,
    };
    let node = cli::serve(Box::new(Master::new(settings)), args.listen).map_err(|e| format!("bind {}: {e}", args.listen))?;
    log::info!("master on {} (data {})", node.msg_addr(), node.data_addr());
    node.join();
    Ok(())
}

fn main() -> ExitCode {
    cli::init_logging();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sectord-master: {e}");
            ExitCode::FAILURE
        }
    }
}

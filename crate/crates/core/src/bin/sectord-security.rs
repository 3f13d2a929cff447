use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sector::cli;
use sector::security::{parse_accounts, parse_slave_list, SecurityServer, SecurityState};

/// Account and slave admission service.
#[derive(Parser)]
#[command(name = "sectord-security", version)]
struct Args {
    /// Lines of `user:pwdigest:salt:acl,...:/prefix=RW,...`.
    #[arg(long)]
    accounts: PathBuf,
    /// One admitted slave address pattern per line.
    #[arg(long)]
    slaves: PathBuf,
    #[arg(long, value_name = "HOST:PORT")]
    listen: SocketAddr,
    /// Key shared with the master.
    #[arg(long, value_name = "HEX")]
    psk: String,
}

fn run(args: Args) -> Result<(), String> {
    let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
    let accounts = parse_accounts(&read(&args.accounts)?).map_err(|e| e.to_string())?;
    let slaves = parse_slave_list(&read(&args.slaves)?).map_err(|e| e.to_string())?;
    let psk = cli::parse_psk(&args.psk)?;
    log::info!("{} accounts, {} slave patterns", accounts.len(), slaves.len());
    let server = SecurityServer::new(SecurityState::new(accounts, slaves), psk);
    let node = cli::serve(Box::new(server), args.listen).map_err(|e| format!("bind {}: {e}", args.listen))?;
    log::info!("security server on {}", node.msg_addr());
    node.join();
    Ok(())
}

fn main() -> ExitCode {
    cli::init_logging();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sectord-security: {e}");
            ExitCode::FAILURE
        }
    }
}

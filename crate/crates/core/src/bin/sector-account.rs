use std::process::ExitCode;

use clap::Parser;
use rand::RngCore;
use sector::security::{parse_privileges, IpPattern, UserAccount};

/// Prints an account line for the security server's accounts file.
#[derive(Parser)]
#[command(name = "sector-account", version)]
struct Args {
    #[arg(long)]
    user: String,
    #[arg(long)]
    password: String,
    /// Client address patterns, comma separated.
    #[arg(long, default_value = "0.0.0.0/0")]
    acl: String,
    /// `/prefix=MODE` grants, comma separated.
    #[arg(long, default_value = "/=RWX")]
    privileges: String,
}

fn run(args: Args) -> Result<String, String> {
    let acl = args
        .acl
        .split(',')
        .map(|s| s.trim().parse::<IpPattern>())
        .collect::<Result<Vec<_>, _>>()?;
    let privileges = parse_privileges(&args.privileges)?;
    let mut salt = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut salt);
    Ok(UserAccount::new(&args.user, &args.password, &salt, acl, privileges).to_line())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sector-account: {e}");
            ExitCode::FAILURE
        }
    }
}

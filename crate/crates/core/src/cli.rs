//! Shared plumbing for the command-line daemons and job tools.

use std::io;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, UdpSocket};
use std::thread;
use std::time::{Duration, Instant};

use crate::client::{Client, ClientError, ClientSettings, JobReport, JobSpec, Op, OpResult};
use crate::harness::reference::Stage;
use crate::model::{FileMeta, RecordIndex};
use crate::runtime::udp::UdpNode;
use crate::runtime::{Actor, HostConfig};

pub const PSK_ENV: &str = "SECTOR_PSK";
pub const USER_ENV: &str = "SECTOR_USER";
pub const PASSWORD_ENV: &str = "SECTOR_PASSWORD";

const POLL: Duration = Duration::from_millis(20);

pub fn parse_psk(hex_key: &str) -> Result<Vec<u8>, String> {
    let key = hex::decode(hex_key.trim()).map_err(|e| format!("bad psk: {e}"))?;
    if key.is_empty() {
        return Err("bad psk: empty".into());
    }
    Ok(key)
}

/// The data port sits one above the messaging port.
pub fn data_addr_for(msg: SocketAddr) -> io::Result<SocketAddr> {
    let port = msg
        .port()
        .checked_add(1)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no room for data port"))?;
    Ok(SocketAddr::new(msg.ip(), if msg.port() == 0 { 0 } else { port }))
}

pub fn serve(actor: Box<dyn Actor>, listen: SocketAddr) -> io::Result<UdpNode> {
    let data = data_addr_for(listen)?;
    UdpNode::spawn(actor, listen, data, HostConfig::new(listen, data))
}

/// A client actor on its own sockets, driven synchronously.
pub struct RemoteClient {
    node: UdpNode,
    timeout: Duration,
}

impl RemoteClient {
    pub fn connect(master: SocketAddr, psk: Vec<u8>, bind: SocketAddr, timeout: Duration) -> io::Result<Self> {
        let mut settings = ClientSettings::new(master, psk);
        settings.op_timeout = timeout;
        let node = serve(Box::new(Client::new(settings)), bind)?;
        Ok(Self { node, timeout })
    }

    pub fn run(&self, op: Op) -> Result<OpResult, ClientError> {
        let bounded = !matches!(op, Op::Job(_));
        let id = self
            .node
            .call::<Client, _>(move |c, ctx| c.submit(ctx, op))
            .ok_or(ClientError::Unreachable)?;
        let deadline = Instant::now() + self.timeout + Duration::from_secs(5);
        loop {
            match self.node.call::<Client, _>(move |c, _| c.take(id)) {
                Some(Some(outcome)) => return outcome,
                Some(None) => {}
                None => return Err(ClientError::Unreachable),
            }
            if bounded && Instant::now() > deadline {
                return Err(ClientError::Timeout);
            }
            thread::sleep(POLL);
        }
    }

    pub fn login(&self, user: &str, password: &str) -> Result<u32, ClientError> {
        match self.run(Op::Login {
            user: user.into(),
            password: password.into(),
        })? {
            OpResult::LoggedIn(s) => Ok(s),
            _ => Err(ClientError::Protocol),
        }
    }

    pub fn ls(&self, prefix: &str) -> Result<Vec<FileMeta>, ClientError> {
        match self.run(Op::Ls(prefix.into()))? {
            OpResult::Listing(l) => Ok(l),
            _ => Err(ClientError::Protocol),
        }
    }

    pub fn upload(&self, path: &str, data: Vec<u8>, index: Option<RecordIndex>) -> Result<FileMeta, ClientError> {
        match self.run(Op::Upload {
            path: path.into(),
            data,
            index,
        })? {
            OpResult::Uploaded(m) => Ok(m),
            _ => Err(ClientError::Protocol),
        }
    }

    pub fn download(&self, path: &str) -> Result<Vec<u8>, ClientError> {
        match self.run(Op::Download(path.into()))? {
            OpResult::Downloaded { data, .. } => Ok(data),
            _ => Err(ClientError::Protocol),
        }
    }

    pub fn job(&self, spec: JobSpec) -> Result<JobReport, ClientError> {
        match self.run(Op::Job(spec))? {
            OpResult::Job(r) => Ok(r),
            _ => Err(ClientError::Protocol),
        }
    }

    /// Files whose path matches a shell-style pattern, in path order.
    pub fn expand(&self, pattern: &str) -> Result<Vec<String>, String> {
        let pat = glob::Pattern::new(pattern).map_err(|e| format!("bad pattern `{pattern}`: {e}"))?;
        let listing = self.ls(&literal_prefix(pattern)).map_err(|e| e.to_string())?;
        let mut paths: Vec<String> = listing
            .into_iter()
            .map(|m| m.path)
            .filter(|p| pat.matches_with(p, glob::MatchOptions { require_literal_separator: true, ..Default::default() }))
            .collect();
        paths.sort();
        Ok(paths)
    }

    /// Runs `stages` back to back, each over the previous stage's output.
    pub fn run_chain(&self, inputs: Vec<String>, stages: &[Stage], prefix: &str) -> Result<Vec<JobReport>, String> {
        let mut inputs = inputs;
        let mut reports = Vec::new();
        for (k, stage) in stages.iter().enumerate() {
            let spec = stage.job_spec(inputs, &format!("{}/s{k}", prefix.trim_end_matches('/')));
            let r = self.job(spec).map_err(|e| format!("stage {k} ({}): {e}", stage.udf))?;
            inputs = r
                .collect()
                .map_err(|f| format!("stage {k} ({}): {} failed segments, first {:?}", stage.udf, f.len(), f[0]))?;
            reports.push(r);
        }
        Ok(reports)
    }

    pub fn download_all(&self, paths: &[String]) -> Result<Vec<u8>, String> {
        let mut all = Vec::new();
        for p in paths {
            all.extend(self.download(p).map_err(|e| format!("{p}: {e}"))?);
        }
        Ok(all)
    }

    pub fn stop(self) {
        self.node.stop();
    }
}

/// Longest directory prefix of `pattern` free of wildcards.
pub fn literal_prefix(pattern: &str) -> String {
    let cut = pattern.find(['*', '?', '[']).unwrap_or(pattern.len());
    let head = &pattern[..cut];
    match head.rfind('/') {
        Some(0) | None => "/".into(),
        Some(i) => head[..i].to_string(),
    }
}

/// Connection flags shared by the job tools.
#[derive(Debug, Clone, clap::Args)]
pub struct ClientArgs {
    #[arg(long, value_name = "HOST:PORT")]
    pub master: SocketAddr,
    #[arg(long, value_name = "HEX", env = PSK_ENV)]
    pub psk: String,
    #[arg(long, env = USER_ENV)]
    pub user: String,
    #[arg(long, env = PASSWORD_ENV, hide_env_values = true)]
    pub password: String,
    /// Local messaging address; data uses the next port.
    #[arg(long, value_name = "HOST:PORT")]
    pub bind: Option<SocketAddr>,
    /// Limit in seconds on each file operation.
    #[arg(long, default_value_t = 120)]
    pub op_timeout: u64,
}

impl ClientArgs {
    pub fn connect(&self) -> Result<RemoteClient, String> {
        let psk = parse_psk(&self.psk)?;
        let bind = match self.bind {
            Some(b) => b,
            None => SocketAddr::new(local_ip_towards(self.master).map_err(|e| e.to_string())?, 0),
        };
        let c = RemoteClient::connect(self.master, psk, bind, Duration::from_secs(self.op_timeout))
            .map_err(|e| format!("bind {bind}: {e}"))?;
        c.login(&self.user, &self.password).map_err(|e| format!("login: {e}"))?;
        Ok(c)
    }
}

/// The local address the OS would use to reach `peer`.
pub fn local_ip_towards(peer: SocketAddr) -> io::Result<IpAddr> {
    let unspecified: IpAddr = if peer.is_ipv4() {
        Ipv4Addr::UNSPECIFIED.into()
    } else {
        Ipv6Addr::UNSPECIFIED.into()
    };
    let s = UdpSocket::bind(SocketAddr::new(unspecified, 0))?;
    s.connect(peer)?;
    Ok(s.local_addr()?.ip())
}

pub fn report_json(r: &JobReport) -> serde_json::Value {
    serde_json::json!({
        "job_id": r.job_id,
        "segments": r.segments,
        "attempts": r.attempts,
        "retries": r.retries,
        "speculated": r.speculated,
        "elapsed_secs": r.elapsed().as_secs_f64(),
        "output": r.output.iter().map(|o| serde_json::json!({
            "path": o.path, "size": o.size, "records": o.records,
        })).collect::<Vec<_>>(),
        "failures": r.failures.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>(),
    })
}

pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefixes() {
        assert_eq!(literal_prefix("/sort/*.dat"), "/sort");
        assert_eq!(literal_prefix("/a/b/part-?"), "/a/b");
        assert_eq!(literal_prefix("/*"), "/");
        assert_eq!(literal_prefix("/sort/part-0001.dat"), "/sort");
        assert_eq!(literal_prefix("x"), "/");
    }

    #[test]
    fn data_port_follows_listen_port() {
        let a: SocketAddr = "127.0.0.1:7000".parse().unwrap();
        assert_eq!(data_addr_for(a).unwrap().port(), 7001);
        let z: SocketAddr = "127.0.0.1:0".parse().unwrap();
        assert_eq!(data_addr_for(z).unwrap().port(), 0);
        assert!(data_addr_for("127.0.0.1:65535".parse().unwrap()).is_err());
    }

    #[test]
    fn loopback_route_is_loopback() {
        let ip = local_ip_towards("127.0.0.1:9".parse().unwrap()).unwrap();
        assert!(ip.is_loopback());
    }

    #[test]
    fn psk_must_be_hex() {
        assert_eq!(parse_psk("0aff").unwrap(), vec![0x0a, 0xff]);
        assert!(parse_psk("zz").is_err());
        assert!(parse_psk("").is_err());
    }
}

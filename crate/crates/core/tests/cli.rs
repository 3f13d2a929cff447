use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

const PSK: &str = "a1b2c3d4e5f60718";

struct Daemons(Vec<Child>);

impl Drop for Daemons {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// A loopback port whose successor is also free.
fn free_pair() -> SocketAddr {
    loop {
        let a = UdpSocket::bind("127.0.0.1:0").unwrap();
        let addr = a.local_addr().unwrap();
        if addr.port() == u16::MAX {
            continue;
        }
        let next = SocketAddr::new(addr.ip(), addr.port() + 1);
        if UdpSocket::bind(next).is_ok() {
            return addr;
        }
    }
}

fn daemon(bin: &str, args: &[&str]) -> Child {
    Command::new(bin)
        .args(args)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap()
}

fn tool(bin: &str, master: SocketAddr, args: &[&str]) -> Output {
    Command::new(bin)
        .arg("--master")
        .arg(master.to_string())
        .args(args)
        .env("SECTOR_PSK", PSK)
        .env("SECTOR_USER", "dave")
        .env("SECTOR_PASSWORD", "hunter2")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn daemons_and_tools_over_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let account = Command::new(env!("CARGO_BIN_EXE_sector-account"))
        .args(["--user", "dave", "--password", "hunter2", "--acl", "127.0.0.0/8"])
        .output()
        .unwrap();
    assert!(account.status.success());
    std::fs::write(d.join("accounts"), &account.stdout).unwrap();
    std::fs::write(d.join("slaves"), "127.0.0.1\n").unwrap();

    let sec = free_pair();
    let master = free_pair();
    let slaves: Vec<SocketAddr> = (0..3).map(|_| free_pair()).collect();
    let topo: String = slaves
        .iter()
        .enumerate()
        .map(|(i, a)| format!("dc0/r{}/n{i} {a}\n", i / 2))
        .collect();
    std::fs::write(d.join("topo"), topo).unwrap();
    let p = |f: &str| d.join(f).to_string_lossy().into_owned();

    let mut procs = Daemons(Vec::new());
    procs.0.push(daemon(
        env!("CARGO_BIN_EXE_sectord-security"),
        &["--accounts", &p("accounts"), "--slaves", &p("slaves"), "--listen", &sec.to_string(), "--psk", PSK],
    ));
    procs.0.push(daemon(
        env!("CARGO_BIN_EXE_sectord-master"),
        &[
            "--listen", &master.to_string(), "--security", &sec.to_string(), "--topology", &p("topo"),
            "--replicas", "2", "--psk", PSK,
        ],
    ));
    for (i, a) in slaves.iter().enumerate() {
        let root = d.join(format!("s{i}"));
        std::fs::create_dir(&root).unwrap();
        procs.0.push(daemon(
            env!("CARGO_BIN_EXE_sectord-slave"),
            &["--root", &root.to_string_lossy(), "--master", &master.to_string(), "--listen", &a.to_string()],
        ));
    }

    let deadline = Instant::now() + Duration::from_secs(30);
    let gen = loop {
        let out = tool(
            env!("CARGO_BIN_EXE_sphere-gensort"),
            master,
            &["--nodes", "3", "--bytes-per-node", "60000", "--verify"],
        );
        if out.status.success() || Instant::now() > deadline {
            break out;
        }
        thread::sleep(Duration::from_millis(500));
    };
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert_eq!(String::from_utf8_lossy(&gen.stdout).matches(" ok").count(), 3);

    let sort = json(&tool(
        env!("CARGO_BIN_EXE_sphere-terasort"),
        master,
        &["--buckets", "3", "--smin", "20000", "--smax", "40000", "--verify"],
    ));
    assert_eq!(sort["verified"], true);

    std::fs::write(d.join("a.txt"), "red fish\nblue fish\n").unwrap();
    std::fs::write(d.join("b.txt"), "one fish two\n").unwrap();
    let idx = json(&tool(
        env!("CARGO_BIN_EXE_sphere-invidx"),
        master,
        &["--upload", &p("a.txt"), "--upload", &p("b.txt"), "--verify"],
    ));
    assert_eq!(idx["verified"], true);

    let sub = json(&tool(
        env!("CARGO_BIN_EXE_sphere-submit"),
        master,
        &["--input", "/sort/*.dat", "--udf", "identity", "--per-file"],
    ));
    assert_eq!(sub["segments"], 3);
    assert_eq!(sub["failures"].as_array().unwrap().len(), 0);

    let missing = tool(env!("CARGO_BIN_EXE_sphere-submit"), master, &["--input", "/none/*", "--udf", "identity"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no files match"));
}

#[test]
fn bad_psk_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_sphere-submit"))
        .args(["--master", "127.0.0.1:9", "--psk", "zz", "--user", "x", "--password", "y"])
        .args(["--input", "/x", "--udf", "identity"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("psk"));
}

#[test]
fn harness_runs_shipped_scenarios() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = Command::new(env!("CARGO_BIN_EXE_sector-harness"))
            .arg("run")
            .arg(&path)
            .output()
            .unwrap();
        let v = json(&out);
        assert_eq!(v["matched"], true, "{}", path.display());
        assert!(!v["runs"].as_array().unwrap().is_empty());
        seen += 1;
    }
    assert!(seen >= 2);
}

#[test]
fn harness_rejects_bad_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.toml");
    std::fs::write(&f, "job = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sector-harness")).arg("run").arg(&f).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

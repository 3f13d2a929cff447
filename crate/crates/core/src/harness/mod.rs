//! Deterministic in-process clusters on the simulated runtime, fault
//! scripts, and differential checks against serial reference execution.

pub mod reference;
pub mod scenario;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Client, ClientError, ClientSettings, JobReport, JobSpec, Op, OpId, OpOutcome, OpResult};
use crate::master::{Master, MasterConfig, MasterSettings};
use crate::model::{FileMeta, Location, RecordIndex, SlaveId, Topology};
use crate::proto::{Mode, Privilege};
use crate::runtime::sim::{NodeId, NodeSpec, Sim};
use crate::security::{IpPattern, SecurityServer, SecurityState, UserAccount};
use crate::slave::{Slave, SlaveSettings, SliceStore};
use crate::sphere::spe::SpeConfig;
use crate::sphere::UdfRegistry;
use crate::time::Time;
use crate::transport::NetFaultPlan;

pub const USER: &str = "admin";
pub const PASSWORD: &str = "sector";
pub const CLIENT_PSK: &[u8] = b"harness-client-key";
pub const SECURITY_PSK: &[u8] = b"harness-security-key";

const MSG_PORT: u16 = 6000;
const DATA_PORT: u16 = 6001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub seed: u64,
    pub dcs: u32,
    pub racks_per_dc: u32,
    pub nodes_per_rack: u32,
    /// Replication threshold enforced by the master.
    pub replicas: usize,
    pub spe_per_node: u32,
    /// Modeled SPE processing rate, bytes per second.
    pub spe_throughput: f64,
    pub sweep_interval_secs: f64,
    pub net: NetFaultPlan,
    /// Slave indices left off the admission list.
    pub denied: Vec<usize>,
    /// Per-slave disk capacity in bytes.
    pub capacity: Option<u64>,
    /// Parent of the slaves' store roots; a temporary directory when unset.
    pub store_dir: Option<PathBuf>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            dcs: 1,
            racks_per_dc: 1,
            nodes_per_rack: 4,
            replicas: 1,
            spe_per_node: 1,
            spe_throughput: SpeConfig::default().throughput,
            sweep_interval_secs: 10.0,
            net: NetFaultPlan::default(),
            denied: Vec::new(),
            capacity: None,
            store_dir: None,
        }
    }
}

impl ClusterSpec {
    pub fn racks(racks: u32, nodes_per_rack: u32) -> Self {
        Self {
            racks_per_dc: racks,
            nodes_per_rack,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn node_count(&self) -> usize {
        (self.dcs * self.racks_per_dc * self.nodes_per_rack) as usize
    }

    /// Location of slave `i`, filling racks in order.
    pub fn location(&self, i: usize) -> Location {
        let per_dc = (self.racks_per_dc * self.nodes_per_rack) as usize;
        let dc = i / per_dc;
        let rack = i % per_dc / self.nodes_per_rack as usize;
        let node = i % self.nodes_per_rack as usize;
        Location::new(format!("dc{dc}"), format!("rack{rack}"), format!("n{node}"))
    }

    pub fn slave_addr(&self, i: usize) -> SocketAddr {
        let per_dc = (self.racks_per_dc * self.nodes_per_rack) as usize;
        let dc = i / per_dc;
        let rack = i % per_dc / self.nodes_per_rack as usize;
        let node = i % self.nodes_per_rack as usize;
        SocketAddr::new(IpAddr::V4(Ipv4Addr::new(10, dc as u8, rack as u8, node as u8 + 1)), MSG_PORT)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.node_count() == 0 {
            return Err(HarnessError::Spec("cluster has no slaves".into()));
        }
        if self.nodes_per_rack > 250 || self.racks_per_dc > 250 || self.dcs > 250 {
            return Err(HarnessError::Spec("topology too large for the address plan".into()));
        }
        if self.spe_throughput.is_nan() || self.spe_throughput <= 0.0 {
            return Err(HarnessError::Spec("spe_throughput must be positive".into()));
        }
        if let Some(d) = self.denied.iter().find(|d| **d >= self.node_count()) {
            return Err(HarnessError::Spec(format!("denied slave {d} does not exist")));
        }
        self.net.validate().map_err(HarnessError::Spec)
    }
}

fn ctl_addr(last: u8, port: u16) -> SocketAddr {
    SocketAddr::new(IpAddr::V4(Ipv4Addr::new(10, 200, 0, last)), port)
}

fn data_of(msg: SocketAddr) -> SocketAddr {
    SocketAddr::new(msg.ip(), DATA_PORT)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("bad cluster spec: {0}")]
    Spec(String),
    #[error("store: {0}")]
    Store(String),
    #[error("cluster did not come up: {0}")]
    Boot(String),
    #[error("operation did not finish within {0:?} of simulated time")]
    Stalled(Duration),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("reference run failed: {0}")]
    Reference(String),
    #[error("scenario: {0}")]
    Scenario(String),
}

/// A file written straight into slave stores before boot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedFile {
    pub nodes: Vec<usize>,
    pub path: String,
    pub data: Vec<u8>,
    pub index: Option<RecordIndex>,
}

pub struct SlaveNode {
    pub node: NodeId,
    pub addr: SocketAddr,
    pub root: PathBuf,
    pub location: Location,
    pub admitted: bool,
    settings: SlaveSettings,
}

/// Timed fault injected during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultAction {
    /// Stops a slave process.
    Kill { slave: usize },
    /// Starts a fresh slave process on the same store.
    Restart { slave: usize },
    /// Multiplies a slave's modeled processing time.
    Slow { slave: usize, factor: f64 },
    /// Suspends a slave for a while.
    Freeze { slave: usize, secs: f64 },
    /// Replaces the fault plan, on one directed slave link or everywhere.
    SetNet {
        #[serde(default)]
        from: Option<usize>,
        #[serde(default)]
        to: Option<usize>,
        plan: NetFaultPlan,
    },
    RestartMaster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    /// Seconds after the run starts.
    pub at_secs: f64,
    #[serde(flatten)]
    pub action: FaultAction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultScript {
    pub events: Vec<FaultEvent>,
}

impl FaultScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(mut self, secs: f64, action: FaultAction) -> Self {
        self.events.push(FaultEvent { at_secs: secs, action });
        self
    }

    /// Events in the order they fire; ties keep script order.
    pub fn ordered(&self) -> Vec<FaultEvent> {
        let mut ev = self.events.clone();
        ev.sort_by(|a, b| a.at_secs.total_cmp(&b.at_secs));
        ev
    }
}

/// Security server, master, slaves and one client on a simulated network.
pub struct Cluster {
    pub sim: Sim,
    spec: ClusterSpec,
    pub security: NodeId,
    pub master: NodeId,
    pub client: NodeId,
    slaves: Vec<SlaveNode>,
    registry: Arc<UdfRegistry>,
    master_settings: MasterSettings,
    _tmp: Option<tempfile::TempDir>,
    armed: VecDeque<(Time, FaultAction)>,
    /// Upper bound on simulated time for one operation.
    pub op_limit: Duration,
}

impl Cluster {
    /// Boots with the built-in UDFs and waits for every admitted slave to register.
    pub fn boot(spec: ClusterSpec, seeds: &[SeedFile]) -> Result<Self, HarnessError> {
        Self::boot_with(spec, seeds, Arc::new(crate::apps::builtin_registry()))
    }

    pub fn boot_with(spec: ClusterSpec, seeds: &[SeedFile], registry: Arc<UdfRegistry>) -> Result<Self, HarnessError> {
        spec.validate()?;
        let (tmp, base) = match &spec.store_dir {
            Some(d) => (None, d.clone()),
            None => {
                let t = tempfile::Builder::new()
                    .prefix("sector-harness-")
                    .tempdir()
                    .map_err(|e| HarnessError::Store(e.to_string()))?;
                let p = t.path().to_path_buf();
                (Some(t), p)
            }
        };
        let n = spec.node_count();
        let roots: Vec<PathBuf> = (0..n).map(|i| base.join(format!("slave-{i:03}"))).collect();
        for seed in seeds {
            for &i in &seed.nodes {
                let root = roots.get(i).ok_or_else(|| HarnessError::Spec(format!("seed on missing slave {i}")))?;
                let store = SliceStore::open(root).map_err(|e| HarnessError::Store(e.to_string()))?;
                store
                    .write(&seed.path, &seed.data, seed.index.as_ref())
                    .map_err(|e| HarnessError::Store(e.to_string()))?;
            }
        }

        let mut sim = Sim::new(spec.seed);
        let sec_addr = ctl_addr(2, MSG_PORT);
        let master_addr = ctl_addr(1, MSG_PORT);
        let client_addr = ctl_addr(3, MSG_PORT);
        sim.set_faults(spec.net.clone());

        let admitted: Vec<IpPattern> = (0..n)
            .filter(|i| !spec.denied.contains(i))
            .map(|i| IpPattern::exact(spec.slave_addr(i).ip()))
            .collect();
        let account = UserAccount::new(
            USER,
            PASSWORD,
            b"harness-salt",
            vec!["0.0.0.0/0".parse().expect("valid pattern")],
            vec![Privilege {
                prefix: "/".into(),
                mode: Mode::parse("RWX").expect("valid mode"),
            }],
        );
        let state = SecurityState::new(vec![account], admitted);
        let ctl = |name: &str, addr: SocketAddr| NodeSpec {
            name: name.into(),
            msg_addr: addr,
            data_addr: data_of(addr),
            location: Some(Location::new("dc0", "ctl", name)),
        };
        let security = sim.add_node(ctl("security", sec_addr), Box::new(SecurityServer::new(state, SECURITY_PSK.to_vec())));

        let mut topology = Topology::new();
        for i in 0..n {
            topology
                .insert(spec.slave_addr(i), spec.location(i))
                .map_err(|e| HarnessError::Spec(e.to_string()))?;
        }
        let master_settings = MasterSettings {
            config: MasterConfig {
                replicas: spec.replicas,
                sweep_interval: Duration::from_secs_f64(spec.sweep_interval_secs),
                ..MasterConfig::default()
            },
            security: sec_addr,
            security_psk: SECURITY_PSK.to_vec(),
            client_psk: CLIENT_PSK.to_vec(),
            topology,
        };
        let master = sim.add_node(ctl("master", master_addr), Box::new(Master::new(master_settings.clone())));

        let mut slaves = Vec::new();
        for (i, root) in roots.into_iter().enumerate() {
            let addr = spec.slave_addr(i);
            let mut settings = SlaveSettings::new(master_addr);
            settings.location = Some(spec.location(i));
            settings.spe_count = spec.spe_per_node.max(1);
            settings.spe.throughput = spec.spe_throughput;
            let node = NodeSpec {
                name: format!("slave-{i}"),
                msg_addr: addr,
                data_addr: data_of(addr),
                location: Some(spec.location(i)),
            };
            let actor = make_slave(&settings, &root, spec.capacity, &registry)?;
            let id = sim.add_node(node, actor);
            slaves.push(SlaveNode {
                node: id,
                addr,
                root,
                location: spec.location(i),
                admitted: !spec.denied.contains(&i),
                settings,
            });
        }
        let client = sim.add_node(
            ctl("client", client_addr),
            Box::new(Client::new(ClientSettings::new(master_addr, CLIENT_PSK.to_vec()))),
        );
        let mut c = Self {
            sim,
            spec,
            security,
            master,
            client,
            slaves,
            registry,
            master_settings,
            _tmp: tmp,
            armed: VecDeque::new(),
            op_limit: Duration::from_secs(3600),
        };
        c.await_registration(Duration::from_secs(60))?;
        Ok(c)
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn registry(&self) -> &Arc<UdfRegistry> {
        &self.registry
    }

    pub fn slaves(&self) -> &[SlaveNode] {
        &self.slaves
    }

    pub fn slave(&self, i: usize) -> &Slave {
        self.sim.actor::<Slave>(self.slaves[i].node).expect("slave actor")
    }

    pub fn master(&self) -> &Master {
        self.sim.actor::<Master>(self.master).expect("master actor")
    }

    pub fn client(&self) -> &Client {
        self.sim.actor::<Client>(self.client).expect("client actor")
    }

    pub fn now(&self) -> Time {
        self.sim.now()
    }

    /// Index of the slave the master knows as `id`.
    pub fn slave_index(&self, id: SlaveId) -> Option<usize> {
        let addr = self.master().state().slave(id)?.status.address;
        self.slaves.iter().position(|s| s.addr == addr)
    }

    /// Admitted slaves the master currently counts as alive.
    pub fn registered(&self) -> BTreeSet<SocketAddr> {
        self.master().state().alive_slaves().map(|s| s.status.address).collect()
    }

    pub fn files(&self) -> BTreeMap<String, FileMeta> {
        self.master().state().files().clone()
    }

    /// Waits until every admitted, live slave is registered.
    pub fn await_registration(&mut self, limit: Duration) -> Result<(), HarnessError> {
        let want: BTreeSet<SocketAddr> = self
            .slaves
            .iter()
            .filter(|s| s.admitted && self.sim.is_alive(s.node))
            .map(|s| s.addr)
            .collect();
        let master = self.master;
        let deadline = self.sim.now() + limit;
        let ok = self.sim.run_until_pred(deadline, |sim| {
            let m = sim.actor::<Master>(master).expect("master actor");
            let have: BTreeSet<SocketAddr> = m.state().alive_slaves().map(|s| s.status.address).collect();
            want.is_subset(&have)
        });
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Boot(format!("{} slaves expected", want.len())))
        }
    }

    pub fn submit(&mut self, op: Op) -> OpId {
        self.sim.invoke::<Client, _>(self.client, |c, ctx| c.submit(ctx, op))
    }

    /// Schedules `script` relative to now. Events fire while operations are awaited.
    pub fn arm(&mut self, script: &FaultScript) {
        let now = self.sim.now();
        let mut all: Vec<(Time, FaultAction)> = self.armed.drain(..).collect();
        all.extend(
            script
                .ordered()
                .into_iter()
                .map(|e| (now + Duration::from_secs_f64(e.at_secs.max(0.0)), e.action)),
        );
        all.sort_by_key(|(t, _)| *t);
        self.armed = all.into();
    }

    /// Runs the simulation until `op` finishes, firing armed faults on the way.
    pub fn wait(&mut self, op: OpId) -> Result<OpOutcome, HarnessError> {
        let deadline = self.sim.now() + self.op_limit;
        let client = self.client;
        let done = |sim: &Sim| sim.actor::<Client>(client).is_some_and(|c| c.is_done(op));
        loop {
            let next = self.armed.front().map(|(t, _)| *t).filter(|t| *t <= deadline);
            if self.sim.run_until_pred(next.unwrap_or(deadline), done) {
                break;
            }
            match next {
                Some(_) => {
                    let (_, action) = self.armed.pop_front().expect("peeked");
                    self.apply(&action)?;
                }
                None => return Err(HarnessError::Stalled(self.op_limit)),
            }
        }
        Ok(self
            .sim
            .invoke::<Client, _>(self.client, |c, _| c.take(op))
            .expect("finished op has an outcome"))
    }

    /// Runs for `d`, firing armed faults on the way.
    pub fn run_for(&mut self, d: Duration) -> Result<(), HarnessError> {
        let until = self.sim.now() + d;
        while let Some((t, _)) = self.armed.front() {
            if *t > until {
                break;
            }
            let t = *t;
            self.sim.run_until(t);
            let (_, action) = self.armed.pop_front().expect("peeked");
            self.apply(&action)?;
        }
        self.sim.run_until(until);
        Ok(())
    }

    pub fn op(&mut self, op: Op) -> Result<OpResult, HarnessError> {
        let id = self.submit(op);
        Ok(self.wait(id)??)
    }

    pub fn login(&mut self) -> Result<u32, HarnessError> {
        match self.op(Op::Login {
            user: USER.into(),
            password: PASSWORD.into(),
        })? {
            OpResult::LoggedIn(s) => Ok(s),
            _ => Err(ClientError::Protocol.into()),
        }
    }

    pub fn upload(&mut self, path: &str, data: Vec<u8>, index: Option<RecordIndex>) -> Result<FileMeta, HarnessError> {
        match self.op(Op::Upload {
            path: path.into(),
            data,
            index,
        })? {
            OpResult::Uploaded(m) => Ok(m),
            _ => Err(ClientError::Protocol.into()),
        }
    }

    pub fn download(&mut self, path: &str) -> Result<(Vec<u8>, Option<RecordIndex>), HarnessError> {
        match self.op(Op::Download(path.into()))? {
            OpResult::Downloaded { data, index } => Ok((data, index)),
            _ => Err(ClientError::Protocol.into()),
        }
    }

    pub fn run_job(&mut self, spec: JobSpec) -> Result<JobReport, HarnessError> {
        self.run_job_scripted(spec, &FaultScript::default())
    }

    pub fn run_job_scripted(&mut self, spec: JobSpec, script: &FaultScript) -> Result<JobReport, HarnessError> {
        self.arm(script);
        let id = self.submit(Op::Job(spec));
        match self.wait(id)?? {
            OpResult::Job(r) => Ok(r),
            _ => Err(ClientError::Protocol.into()),
        }
    }

    pub fn apply(&mut self, action: &FaultAction) -> Result<(), HarnessError> {
        let check = |i: usize, n: usize| {
            if i < n {
                Ok(())
            } else {
                Err(HarnessError::Spec(format!("no slave {i}")))
            }
        };
        let n = self.slaves.len();
        match action {
            FaultAction::Kill { slave } => {
                check(*slave, n)?;
                self.sim.kill(self.slaves[*slave].node);
            }
            FaultAction::Restart { slave } => {
                check(*slave, n)?;
                self.restart_slave(*slave)?;
            }
            FaultAction::Slow { slave, factor } => {
                check(*slave, n)?;
                self.sim.set_compute_scale(self.slaves[*slave].node, *factor);
            }
            FaultAction::Freeze { slave, secs } => {
                check(*slave, n)?;
                self.sim.freeze(self.slaves[*slave].node, Duration::from_secs_f64(*secs));
            }
            FaultAction::SetNet { from, to, plan } => match (from, to) {
                (Some(a), Some(b)) => {
                    check(*a, n)?;
                    check(*b, n)?;
                    self.sim.set_link_faults(self.slaves[*a].node, self.slaves[*b].node, plan.clone());
                }
                (None, None) => self.sim.set_faults(plan.clone()),
                _ => return Err(HarnessError::Spec("set_net needs both link ends or neither".into())),
            },
            FaultAction::RestartMaster => self.restart_master(),
        }
        Ok(())
    }

    pub fn kill_slave(&mut self, i: usize) {
        self.sim.kill(self.slaves[i].node);
    }

    pub fn restart_slave(&mut self, i: usize) -> Result<(), HarnessError> {
        let s = &self.slaves[i];
        let actor = make_slave(&s.settings, &s.root, self.spec.capacity, &self.registry)?;
        self.sim.restart(s.node, actor);
        Ok(())
    }

    /// Replaces the master process; its state is rebuilt from slave reports.
    pub fn restart_master(&mut self) {
        self.sim
            .restart(self.master, Box::new(Master::new(self.master_settings.clone())));
    }

    /// Data-channel bytes between slaves in different racks.
    pub fn cross_rack_slave_bytes(&self) -> u64 {
        let slaves: BTreeMap<NodeId, &Location> = self.slaves.iter().map(|s| (s.node, &s.location)).collect();
        self.sim
            .stats()
            .data_bytes
            .iter()
            .filter_map(|((a, b), v)| {
                let (la, lb) = (slaves.get(a)?, slaves.get(b)?);
                (!la.same_rack(lb)).then_some(*v)
            })
            .sum()
    }

    /// Nominal processing time of `bytes` on an unslowed SPE.
    pub fn nominal(&self, bytes: u64) -> Duration {
        Duration::from_secs_f64(bytes as f64 / self.spec.spe_throughput)
    }
}

fn make_slave(
    settings: &SlaveSettings,
    root: &PathBuf,
    capacity: Option<u64>,
    registry: &Arc<UdfRegistry>,
) -> Result<Box<Slave>, HarnessError> {
    let mut store = SliceStore::open(root).map_err(|e| HarnessError::Store(e.to_string()))?;
    if let Some(c) = capacity {
        store = store.with_capacity(c);
    }
    Ok(Box::new(Slave::new(settings.clone(), store, registry.clone())))
}

//! The master: metadata index, slave table, replication repair and the
//! broker for every data connection.

mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::ops::Range;
use std::time::Duration;

use rand::Rng;

use crate::model::{normalize_path, FileMeta, SlaveId, SlaveStatus};
use crate::proto::{
    self, AccessDenied, FsError, JobGrant, MasterReply, Mode, Msg, OpenGrant, Outbox, ScanEntry, SecurityReply,
    TransferKind,
};
use crate::runtime::{Actor, Ctx, Delivery};
use crate::transport::{ChannelId, Message};

pub use state::{
    pick_read, place_replicas, spread, ChannelLedger, ChannelPurpose, CopyPlan, MasterConfig, MasterState,
    PlacementNode, Quarantined, ReadCandidate, SlaveEntry,
};

const TIMER_LIVENESS: u64 = 1;
const TIMER_SWEEP: u64 = 2;

#[derive(Debug, Clone)]
pub struct MasterSettings {
    pub config: MasterConfig,
    pub security: SocketAddr,
    pub security_psk: Vec<u8>,
    pub client_psk: Vec<u8>,
    pub topology: crate::model::Topology,
}

enum SecWait {
    Login { client: SocketAddr, req: u64 },
    Register { from: SocketAddr, status: SlaveStatus, scan: Vec<ScanEntry> },
    Check { op: u64 },
}

enum OpKind {
    Ls { prefix: String },
    Stat { path: String },
    OpenRead { path: String, data: SocketAddr, index_only: bool },
    OpenWrite { path: String, size: u64, data: SocketAddr },
    Rm { path: String },
    Job { inputs: Vec<String>, channels: u32 },
}

fn fail_reply(kind: &OpKind, e: FsError) -> MasterReply {
    match kind {
        OpKind::Ls { .. } => MasterReply::Ls(Err(e)),
        OpKind::Stat { .. } => MasterReply::Stat(Err(e)),
        OpKind::OpenRead { .. } | OpKind::OpenWrite { .. } => MasterReply::Open(Err(e)),
        OpKind::Rm { .. } => MasterReply::Removed(Err(e)),
        OpKind::Job { .. } => MasterReply::Job(Err(e)),
    }
}

struct GatedOp {
    client: SocketAddr,
    req: u64,
    remaining: usize,
    denied: Option<AccessDenied>,
    kind: OpKind,
}

#[derive(Debug)]
struct WriteState {
    path: String,
    slave: SlaveId,
    done: Option<Result<FileMeta, String>>,
    close: Option<(SocketAddr, u64)>,
}

#[derive(Debug, Clone)]
struct CopyState {
    path: String,
    source: SlaveId,
    target: SlaveId,
}

#[derive(Debug, Clone)]
pub struct JobRecord {
    pub client: SocketAddr,
    pub channels: Range<u32>,
    pub slaves: Vec<SlaveId>,
}

/// Counters exposed for tests and reports.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MasterStats {
    pub sweeps: u64,
    pub copies_started: u64,
    pub copies_done: u64,
    pub copies_failed: u64,
    pub slaves_denied: u64,
    pub bad_tags: u64,
}

pub struct Master {
    st: MasterState,
    security: SocketAddr,
    security_psk: Vec<u8>,
    client_psk: Vec<u8>,
    outbox: Outbox,
    next_req: u64,
    sec_wait: BTreeMap<u64, SecWait>,
    ops: BTreeMap<u64, GatedOp>,
    writes: BTreeMap<ChannelId, WriteState>,
    reads: BTreeMap<ChannelId, SlaveId>,
    copies: BTreeMap<ChannelId, CopyState>,
    jobs: BTreeMap<u32, JobRecord>,
    next_job: u32,
    denied: BTreeSet<SocketAddr>,
    stats: MasterStats,
    sweep_log: Vec<Vec<CopyPlan>>,
}

impl Master {
    pub fn new(settings: MasterSettings) -> Self {
        Self {
            st: MasterState::new(settings.config, settings.topology),
            security: settings.security,
            security_psk: settings.security_psk,
            client_psk: settings.client_psk,
            outbox: Outbox::default(),
            next_req: 1,
            sec_wait: BTreeMap::new(),
            ops: BTreeMap::new(),
            writes: BTreeMap::new(),
            reads: BTreeMap::new(),
            copies: BTreeMap::new(),
            jobs: BTreeMap::new(),
            next_job: 1,
            denied: BTreeSet::new(),
            stats: MasterStats::default(),
            sweep_log: Vec::new(),
        }
    }

    pub fn state(&self) -> &MasterState {
        &self.st
    }

    pub fn stats(&self) -> &MasterStats {
        &self.stats
    }

    pub fn sweep_log(&self) -> &[Vec<CopyPlan>] {
        &self.sweep_log
    }

    pub fn jobs(&self) -> &BTreeMap<u32, JobRecord> {
        &self.jobs
    }

    /// Addresses refused admission at least once.
    pub fn denied(&self) -> &BTreeSet<SocketAddr> {
        &self.denied
    }

    pub fn copies_in_flight(&self) -> usize {
        self.copies.len()
    }

    fn req(&mut self) -> u64 {
        self.next_req += 1;
        self.next_req
    }

    fn to_security(&mut self, ctx: &mut Ctx<'_>, wait: SecWait, build: impl FnOnce(u64) -> Msg) {
        let req = self.req();
        self.sec_wait.insert(req, wait);
        let psk = self.security_psk.clone();
        let sec = self.security;
        self.outbox.send(ctx, sec, &build(req), 0, Some(&psk));
    }

    fn reply(&mut self, ctx: &mut Ctx<'_>, client: SocketAddr, req: u64, reply: MasterReply) {
        let psk = self.client_psk.clone();
        self.outbox.send(ctx, client, &Msg::MasterReply { req, reply }, 0, Some(&psk));
    }

    fn send_slave(&mut self, ctx: &mut Ctx<'_>, slave: SlaveId, msg: Msg) {
        if let Some(e) = self.st.slave(slave) {
            let to = e.status.address;
            self.outbox.send(ctx, to, &msg, 0, None);
        }
    }

    fn gate(&mut self, ctx: &mut Ctx<'_>, client: SocketAddr, req: u64, session: u32, checks: Vec<(String, Mode)>, kind: OpKind) {
        let op = self.req();
        self.ops.insert(
            op,
            GatedOp {
                client,
                req,
                remaining: checks.len(),
                denied: None,
                kind,
            },
        );
        if checks.is_empty() {
            self.run_op(ctx, op);
            return;
        }
        for (path, mode) in checks {
            self.to_security(ctx, SecWait::Check { op }, |req| Msg::CheckAccess {
                req,
                session,
                path,
                mode,
            });
        }
    }

    fn on_client(&mut self, ctx: &mut Ctx<'_>, from: SocketAddr, msg: Msg) {
        let norm = |p: &str| normalize_path(p).map_err(|_| FsError::InvalidPath(p.to_string()));
        match msg {
            Msg::Login { req, user, password } => {
                self.to_security(ctx, SecWait::Login { client: from, req }, |r| Msg::VerifyUser {
                    req: r,
                    user,
                    password,
                    client: from,
                });
            }
            Msg::Logout { session } => {
                let psk = self.security_psk.clone();
                let sec = self.security;
                self.outbox.send(ctx, sec, &Msg::Logout { session }, 0, Some(&psk));
            }
            Msg::Ls { req, session, prefix } => match norm(&prefix) {
                Ok(p) => self.gate(ctx, from, req, session, vec![(p.clone(), Mode::READ)], OpKind::Ls { prefix: p }),
                Err(e) => self.reply(ctx, from, req, MasterReply::Ls(Err(e))),
            },
            Msg::Stat { req, session, path } => match norm(&path) {
                Ok(p) => self.gate(ctx, from, req, session, vec![(p.clone(), Mode::READ)], OpKind::Stat { path: p }),
                Err(e) => self.reply(ctx, from, req, MasterReply::Stat(Err(e))),
            },
            Msg::OpenRead {
                req,
                session,
                path,
                data,
                index_only,
            } => match norm(&path) {
                Ok(p) => self.gate(
                    ctx,
                    from,
                    req,
                    session,
                    vec![(p.clone(), Mode::READ)],
                    OpKind::OpenRead {
                        path: p,
                        data,
                        index_only,
                    },
                ),
                Err(e) => self.reply(ctx, from, req, MasterReply::Open(Err(e))),
            },
            Msg::OpenWrite {
                req,
                session,
                path,
                size,
                data,
            } => match norm(&path) {
                Ok(p) => self.gate(
                    ctx,
                    from,
                    req,
                    session,
                    vec![(p.clone(), Mode::WRITE)],
                    OpKind::OpenWrite { path: p, size, data },
                ),
                Err(e) => self.reply(ctx, from, req, MasterReply::Open(Err(e))),
            },
            Msg::Rm { req, session, path } => match norm(&path) {
                Ok(p) => self.gate(ctx, from, req, session, vec![(p.clone(), Mode::WRITE)], OpKind::Rm { path: p }),
                Err(e) => self.reply(ctx, from, req, MasterReply::Removed(Err(e))),
            },
            Msg::Close { req, channel, .. } => self.on_close(ctx, from, req, channel),
            Msg::JobRequest {
                req,
                session,
                inputs,
                output_prefix,
                channels,
            } => {
                let mut checks = Vec::new();
                let mut paths = Vec::new();
                for p in inputs.iter().chain(std::iter::once(&output_prefix)) {
                    match norm(p) {
                        Ok(n) => paths.push(n),
                        Err(e) => {
                            self.reply(ctx, from, req, MasterReply::Job(Err(e)));
                            return;
                        }
                    }
                }
                let out = paths.pop().expect("output prefix pushed last");
                checks.extend(paths.iter().map(|p| (p.clone(), Mode::READ)));
                checks.push((out, Mode::WRITE.union(Mode::EXEC)));
                self.gate(ctx, from, req, session, checks, OpKind::Job { inputs: paths, channels });
            }
            Msg::JobEnd { job, .. } => {
                if let Some(rec) = self.jobs.get(&job) {
                    if rec.client == from {
                        let rec = self.jobs.remove(&job).expect("present");
                        for s in rec.slaves {
                            self.send_slave(ctx, s, Msg::JobRevoke { job });
                        }
                    }
                }
            }
            other => log::warn!("unexpected client message {:#06x} from {from}", other.code()),
        }
    }

    fn on_security(&mut self, ctx: &mut Ctx<'_>, req: u64, reply: SecurityReply) {
        let Some(wait) = self.sec_wait.remove(&req) else {
            return;
        };
        match (wait, reply) {
            (SecWait::Login { client, req }, SecurityReply::User(r)) => {
                let r = r.map(|s| s.session_id).map_err(FsError::Login);
                self.reply(ctx, client, req, MasterReply::Login(r));
            }
            (SecWait::Register { from, status, scan }, SecurityReply::Slave(admit)) => {
                if admit {
                    let now = ctx.now();
                    let mut status = status;
                    status.address = from;
                    let id = self.st.register_slave(now, status, &scan);
                    self.denied.remove(&from);
                    log::info!("{id} registered from {from} with {} files", scan.len());
                    self.outbox.send(ctx, from, &Msg::RegisterReply { result: Ok(id) }, 0, None);
                } else {
                    self.stats.slaves_denied += 1;
                    self.denied.insert(from);
                    self.outbox.send(
                        ctx,
                        from,
                        &Msg::RegisterReply {
                            result: Err("not admitted".into()),
                        },
                        0,
                        None,
                    );
                }
            }
            (SecWait::Check { op }, SecurityReply::Access(r)) => {
                let Some(g) = self.ops.get_mut(&op) else {
                    return;
                };
                g.remaining -= 1;
                if let Err(e) = r {
                    g.denied.get_or_insert(e);
                }
                if g.remaining == 0 {
                    self.run_op(ctx, op);
                }
            }
            _ => log::warn!("security reply does not match request {req}"),
        }
    }

    fn run_op(&mut self, ctx: &mut Ctx<'_>, op: u64) {
        let g = self.ops.remove(&op).expect("op present");
        let (client, req) = (g.client, g.req);
        if let Some(denied) = g.denied {
            let reply = fail_reply(&g.kind, FsError::NoAccess(denied));
            self.reply(ctx, client, req, reply);
            return;
        }
        let client_loc = self.st.location_of(&client);
        let reply = match g.kind {
            OpKind::Ls { prefix } => MasterReply::Ls(Ok(self.st.list(&prefix))),
            OpKind::Stat { path } => MasterReply::Stat(self.st.lookup(&path)),
            OpKind::OpenRead { path, data, index_only } => MasterReply::Open(self.st.lookup(&path).and_then(|meta| {
                if index_only && meta.record_count.is_none() {
                    return Err(FsError::NotFound(format!("{path}.idx")));
                }
                let slave = self
                    .st
                    .choose_slave_for_read(&meta, client_loc.as_ref())
                    .expect("lookup guarantees a live replica");
                let channel = self.st.channels.issue(ChannelPurpose::Read {
                    path: path.clone(),
                    slave,
                });
                self.st.grant_transfer(slave);
                self.reads.insert(channel, slave);
                let slave_data = self.st.slave(slave).expect("alive").status.data_address;
                self.send_slave(
                    ctx,
                    slave,
                    Msg::ServeRead {
                        channel,
                        path,
                        index_only,
                        peer: data,
                    },
                );
                Ok(OpenGrant {
                    channel,
                    slave,
                    slave_data,
                    meta: Some(meta),
                })
            })),
            OpKind::OpenWrite { path, size, data } => MasterReply::Open(self.open_write(ctx, path, size, data, client_loc)),
            OpKind::Rm { path } => MasterReply::Removed(match self.st.remove_file(&path) {
                Some(meta) => {
                    for s in meta.replicas {
                        self.send_slave(ctx, s, Msg::Remove { path: path.clone() });
                    }
                    Ok(())
                }
                None => Err(FsError::NotFound(path)),
            }),
            OpKind::Job { inputs, channels } => MasterReply::Job(self.grant_job(ctx, client, inputs, channels)),
        };
        self.reply(ctx, client, req, reply);
    }

    fn open_write(
        &mut self,
        ctx: &mut Ctx<'_>,
        path: String,
        size: u64,
        data: SocketAddr,
        client_loc: Option<crate::model::Location>,
    ) -> Result<OpenGrant, FsError> {
        if self.st.files().contains_key(&path) {
            return Err(FsError::Exists(path));
        }
        if self.writes.values().any(|w| w.path == path && w.done.is_none()) {
            return Err(FsError::Busy(path));
        }
        let slave = self.st.choose_slave_for_write(size, client_loc.as_ref())?;
        let channel = self.st.channels.issue(ChannelPurpose::Write {
            path: path.clone(),
            slave,
        });
        self.st.grant_transfer(slave);
        self.writes.insert(
            channel,
            WriteState {
                path: path.clone(),
                slave,
                done: None,
                close: None,
            },
        );
        let slave_data = self.st.slave(slave).expect("alive").status.data_address;
        self.send_slave(ctx, slave, Msg::ServeWrite { channel, path, peer: data });
        Ok(OpenGrant {
            channel,
            slave,
            slave_data,
            meta: None,
        })
    }

    fn grant_job(&mut self, ctx: &mut Ctx<'_>, client: SocketAddr, inputs: Vec<String>, channels: u32) -> Result<JobGrant, FsError> {
        let metas = inputs.iter().map(|p| self.st.lookup(p)).collect::<Result<Vec<_>, _>>()?;
        let job = self.next_job;
        self.next_job += 1;
        let block = self
            .st
            .channels
            .issue_block(channels.clamp(1, self.st.config.job_channel_block), job);
        let slaves: Vec<SlaveStatus> = self.st.alive_slaves().map(|s| s.status.clone()).collect();
        let peers: Vec<SocketAddr> = slaves.iter().map(|s| s.address).collect();
        for s in &slaves {
            self.outbox.send(
                ctx,
                s.address,
                &Msg::JobGrant {
                    job,
                    client,
                    channels: block.clone(),
                    peers: peers.clone(),
                },
                0,
                None,
            );
        }
        self.jobs.insert(
            job,
            JobRecord {
                client,
                channels: block.clone(),
                slaves: slaves.iter().map(|s| s.id).collect(),
            },
        );
        Ok(JobGrant {
            job_id: job,
            channels: block,
            slaves,
            inputs: metas,
        })
    }

    fn on_close(&mut self, ctx: &mut Ctx<'_>, from: SocketAddr, req: u64, channel: ChannelId) {
        if self.reads.contains_key(&channel) || self.st.channels.purpose(channel).is_some() && !self.writes.contains_key(&channel) {
            self.reply(ctx, from, req, MasterReply::Closed(Ok(None)));
            return;
        }
        let Some(w) = self.writes.get_mut(&channel) else {
            self.reply(ctx, from, req, MasterReply::Closed(Err(FsError::Transfer("unknown channel".into()))));
            return;
        };
        match &w.done {
            Some(r) => {
                let r = r.clone().map(Some).map_err(FsError::Transfer);
                self.writes.remove(&channel);
                self.reply(ctx, from, req, MasterReply::Closed(r));
            }
            None => w.close = Some((from, req)),
        }
    }

    fn on_slave(&mut self, ctx: &mut Ctx<'_>, from: SocketAddr, msg: Msg) {
        let now = ctx.now();
        match msg {
            Msg::Register { status, scan } => {
                self.to_security(ctx, SecWait::Register { from, status, scan }, |req| Msg::VerifySlave { req, addr: from });
            }
            Msg::Heartbeat { mut status } => {
                status.address = from;
                let known = self.st.heartbeat(now, &status);
                self.outbox.send(ctx, from, &Msg::HeartbeatReply { known }, 0, None);
            }
            Msg::TransferDone {
                channel,
                kind,
                path,
                result,
            } => self.on_transfer_done(ctx, from, channel, kind, path, result),
            Msg::FileAdded { entry } => {
                if let Some(id) = self.st.slave_by_addr(&from).filter(|id| self.st.is_alive(*id)) {
                    self.st.add_replica(id, &entry);
                    self.send_slave(ctx, id, Msg::FileAck { path: entry.path });
                }
            }
            other => log::warn!("unexpected slave message {:#06x} from {from}", other.code()),
        }
    }

    fn on_transfer_done(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: SocketAddr,
        channel: ChannelId,
        kind: TransferKind,
        path: String,
        result: Result<ScanEntry, String>,
    ) {
        let Some(slave) = self.st.slave_by_addr(&from) else {
            return;
        };
        match kind {
            TransferKind::Read => {
                if self.reads.remove(&channel).is_some() {
                    self.st.finish_transfer(slave);
                }
            }
            TransferKind::Write => {
                let Some(w) = self.writes.get_mut(&channel) else {
                    return;
                };
                if w.done.is_some() || w.slave != slave {
                    return;
                }
                self.st.finish_transfer(slave);
                let outcome = match result {
                    Ok(entry) if entry.path == w.path => {
                        if self.st.add_replica(slave, &entry) {
                            self.st.lookup(&entry.path).map_err(|e| e.to_string())
                        } else {
                            Err("size conflict".to_string())
                        }
                    }
                    Ok(entry) => Err(format!("slave wrote {} instead of {}", entry.path, w.path)),
                    Err(e) => Err(e),
                };
                let w = self.writes.get_mut(&channel).expect("present");
                match w.close.take() {
                    Some((client, req)) => {
                        self.writes.remove(&channel);
                        let r = outcome.map(Some).map_err(FsError::Transfer);
                        self.reply(ctx, client, req, MasterReply::Closed(r));
                    }
                    None => w.done = Some(outcome),
                }
            }
            TransferKind::CopyOut => self.st.finish_transfer(slave),
            TransferKind::CopyIn => {
                let Some(c) = self.copies.remove(&channel) else {
                    return;
                };
                self.st.finish_transfer(c.target);
                match result {
                    Ok(entry) if entry.path == c.path && c.target == slave => {
                        if self.st.add_replica(slave, &entry) {
                            self.stats.copies_done += 1;
                        } else {
                            self.stats.copies_failed += 1;
                        }
                    }
                    other => {
                        self.stats.copies_failed += 1;
                        log::warn!("copy of {path} to {slave} failed: {other:?}");
                    }
                }
            }
        }
    }

    fn sweep(&mut self, ctx: &mut Ctx<'_>) {
        self.stats.sweeps += 1;
        let mut in_flight: BTreeMap<String, BTreeSet<SlaveId>> = BTreeMap::new();
        for c in self.copies.values() {
            in_flight.entry(c.path.clone()).or_default().insert(c.target);
        }
        let (plan, warnings) = self.st.replication_sweep(&in_flight);
        for w in &warnings {
            log::warn!("replication: {w}");
        }
        for p in &plan {
            let channel = self.st.channels.issue(ChannelPurpose::Copy {
                path: p.path.clone(),
                source: p.source,
                target: p.target,
            });
            self.st.grant_transfer(p.source);
            self.st.grant_transfer(p.target);
            self.copies.insert(
                channel,
                CopyState {
                    path: p.path.clone(),
                    source: p.source,
                    target: p.target,
                },
            );
            self.stats.copies_started += 1;
            let src = self.st.slave(p.source).expect("alive").status.data_address;
            let tgt = self.st.slave(p.target).expect("alive").status.data_address;
            self.send_slave(
                ctx,
                p.source,
                Msg::CopyOut {
                    channel,
                    path: p.path.clone(),
                    target: tgt,
                },
            );
            self.send_slave(
                ctx,
                p.target,
                Msg::CopyIn {
                    channel,
                    path: p.path.clone(),
                    source: src,
                },
            );
        }
        self.sweep_log.push(plan);
    }

    fn liveness(&mut self, ctx: &mut Ctx<'_>) {
        let dead = self.st.check_liveness(ctx.now());
        for id in dead {
            self.copies.retain(|_, c| c.source != id && c.target != id);
            let addr = self.st.slave(id).expect("known").status.address;
            self.outbox.forget(ctx, addr);
        }
    }
}

impl Actor for Master {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let base: u32 = ctx.rng().gen_range(1..1u32 << 30);
        self.st.channels = ChannelLedger::starting_at(base);
        ctx.set_timer(Duration::from_secs(1), TIMER_LIVENESS);
        let sweep = self.st.config.sweep_interval;
        ctx.set_timer(sweep, TIMER_SWEEP);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: SocketAddr, m: Message) {
        let key = match m.msg_type >> 8 {
            0x01 => Some(self.security_psk.clone()),
            0x02 => Some(self.client_psk.clone()),
            _ => None,
        };
        let msg = match proto::decode(&m, key.as_deref()) {
            Ok(msg) => msg,
            Err(e) => {
                self.stats.bad_tags += 1;
                log::warn!("dropping message from {from}: {e}");
                return;
            }
        };
        match m.msg_type >> 8 {
            0x01 => match msg {
                Msg::SecurityReply { req, reply } if from == self.security => self.on_security(ctx, req, reply),
                _ => log::warn!("unexpected security-link message from {from}"),
            },
            0x02 => self.on_client(ctx, from, msg),
            0x03 => self.on_slave(ctx, from, msg),
            _ => log::warn!("unexpected message {:#06x} from {from}", m.msg_type),
        }
    }

    fn on_delivery(&mut self, ctx: &mut Ctx<'_>, d: Delivery) {
        if let Some(peer) = self.outbox.on_delivery(ctx, &d) {
            if peer == self.security {
                let waits = std::mem::take(&mut self.sec_wait);
                for (_, w) in waits {
                    match w {
                        SecWait::Login { client, req } => {
                            self.reply(ctx, client, req, MasterReply::Login(Err(FsError::SecurityUnavailable)))
                        }
                        SecWait::Check { op } => {
                            if let Some(g) = self.ops.remove(&op) {
                                let reply = fail_reply(&g.kind, FsError::SecurityUnavailable);
                                self.reply(ctx, g.client, g.req, reply);
                            }
                        }
                        SecWait::Register { .. } => {}
                    }
                }
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        match token {
            TIMER_LIVENESS => {
                self.liveness(ctx);
                ctx.set_timer(Duration::from_secs(1), TIMER_LIVENESS);
            }
            TIMER_SWEEP => {
                self.sweep(ctx);
                let sweep = self.st.config.sweep_interval;
                ctx.set_timer(sweep, TIMER_SWEEP);
            }
            _ => {}
        }
    }
}

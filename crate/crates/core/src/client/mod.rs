//! Client library: file operations against the master and Sphere job
//! submission. Operations are submitted, then polled for their outcome.

mod job;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;

use crate::model::{FileMeta, RecordIndex, SphereStream, StreamFile};
use crate::proto::{self, FsError, JobGrant, MasterReply, Msg, OpenGrant, Outbox};
use crate::runtime::{Actor, Ctx, Delivery};
use crate::slave::store::{frame, unframe};
use crate::sphere::{segment_stream, SegmentPolicy};
use crate::transport::{ChannelEvent, ChannelId, Message};
use crate::time::Time;

pub use job::{AssignmentInstant, JobError, JobReport, JobSpec, Speculation};
use job::{JobIo, JobRun};

pub type OpId = u64;

const TIMER_TICK: u64 = 1;
const TIMER_DEADLINE_BASE: u64 = 1 << 32;
const INDEX_TRIES: u32 = 10;
const INDEX_RETRY: Duration = Duration::from_secs(1);

#[derive(Debug, Clone)]
pub struct ClientSettings {
    pub master: SocketAddr,
    pub psk: Vec<u8>,
    /// Limit on file operations; jobs are bounded by their own timeouts.
    pub op_timeout: Duration,
    pub tick: Duration,
}

impl ClientSettings {
    pub fn new(master: SocketAddr, psk: Vec<u8>) -> Self {
        Self {
            master,
            psk,
            op_timeout: Duration::from_secs(120),
            tick: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Login { user: String, password: String },
    Logout,
    Ls(String),
    Stat(String),
    Upload { path: String, data: Vec<u8>, index: Option<RecordIndex> },
    Download(String),
    DownloadIndex(String),
    Rm(String),
    Job(JobSpec),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpResult {
    LoggedIn(u32),
    LoggedOut,
    Listing(Vec<FileMeta>),
    Meta(FileMeta),
    Uploaded(FileMeta),
    Downloaded { data: Vec<u8>, index: Option<RecordIndex> },
    Index(RecordIndex),
    Removed,
    Job(JobReport),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("not logged in")]
    NotLoggedIn,
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("transfer failed: {0}")]
    Transfer(String),
    #[error("operation timed out")]
    Timeout,
    #[error("master unreachable")]
    Unreachable,
    #[error("unexpected reply from master")]
    Protocol,
    #[error(transparent)]
    Job(#[from] JobError),
}

pub type OpOutcome = Result<OpResult, ClientError>;

enum Waiting {
    Login,
    Ls,
    Stat,
    OpenWrite { payload: Vec<u8> },
    OpenRead { index_only: bool },
    Close,
    Rm,
    Job(JobSpec),
    JobIndex { job: u32, path: String },
}

enum Transfer {
    Upload { op: OpId },
    Download { op: OpId, buf: Vec<u8>, index_only: bool },
    JobIndex { job: u32, path: String, buf: Vec<u8> },
}

struct Preparing {
    op: OpId,
    spec: JobSpec,
    grant: JobGrant,
    indexes: BTreeMap<String, Option<RecordIndex>>,
    missing: usize,
    tries: BTreeMap<String, u32>,
    retry_at: Vec<(Time, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub bad_tags: u64,
    pub ops_submitted: u64,
    pub ops_done: u64,
}

pub struct Client {
    settings: ClientSettings,
    session: Option<u32>,
    outbox: Outbox,
    next_op: OpId,
    next_req: u64,
    waiting: BTreeMap<u64, (OpId, Waiting)>,
    transfers: BTreeMap<ChannelId, Transfer>,
    preparing: BTreeMap<u32, Preparing>,
    jobs: BTreeMap<u32, (OpId, JobRun)>,
    done: BTreeMap<OpId, OpOutcome>,
    live_ops: BTreeMap<OpId, bool>,
    ticking: bool,
    stats: ClientStats,
}

impl Client {
    pub fn new(settings: ClientSettings) -> Self {
        Self {
            settings,
            session: None,
            outbox: Outbox::default(),
            next_op: 1,
            next_req: 1,
            waiting: BTreeMap::new(),
            transfers: BTreeMap::new(),
            preparing: BTreeMap::new(),
            jobs: BTreeMap::new(),
            done: BTreeMap::new(),
            live_ops: BTreeMap::new(),
            ticking: false,
            stats: ClientStats::default(),
        }
    }

    pub fn session(&self) -> Option<u32> {
        self.session
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    pub fn is_done(&self, op: OpId) -> bool {
        self.done.contains_key(&op)
    }

    /// Removes and returns the outcome of a finished operation.
    pub fn take(&mut self, op: OpId) -> Option<OpOutcome> {
        self.done.remove(&op)
    }

    pub fn pending_ops(&self) -> usize {
        self.live_ops.len()
    }

    pub fn submit(&mut self, ctx: &mut Ctx<'_>, op: Op) -> OpId {
        let id = self.next_op;
        self.next_op += 1;
        self.stats.ops_submitted += 1;
        self.live_ops.insert(id, matches!(op, Op::Job(_)));
        if !matches!(op, Op::Job(_)) {
            ctx.set_timer(self.settings.op_timeout, TIMER_DEADLINE_BASE + id);
        }
        self.ensure_tick(ctx);
        let session = match (&op, self.session) {
            (Op::Login { .. }, _) => 0,
            (_, Some(s)) => s,
            (_, None) => {
                self.finish(id, Err(ClientError::NotLoggedIn));
                return id;
            }
        };
        let data = ctx.data_addr();
        match op {
            Op::Login { user, password } => self.request(ctx, id, Waiting::Login, |req| Msg::Login { req, user, password }),
            Op::Logout => {
                self.send_master(ctx, Msg::Logout { session });
                self.session = None;
                self.finish(id, Ok(OpResult::LoggedOut));
            }
            Op::Ls(prefix) => self.request(ctx, id, Waiting::Ls, |req| Msg::Ls { req, session, prefix }),
            Op::Stat(path) => self.request(ctx, id, Waiting::Stat, |req| Msg::Stat { req, session, path }),
            Op::Upload { path, data: bytes, index } => {
                let size = bytes.len() as u64;
                let payload = frame(&bytes, index.as_ref());
                self.request(ctx, id, Waiting::OpenWrite { payload }, |req| Msg::OpenWrite {
                    req,
                    session,
                    path,
                    size,
                    data,
                })
            }
            Op::Download(path) => self.request(ctx, id, Waiting::OpenRead { index_only: false }, |req| Msg::OpenRead {
                req,
                session,
                path,
                data,
                index_only: false,
            }),
            Op::DownloadIndex(path) => self.request(ctx, id, Waiting::OpenRead { index_only: true }, |req| Msg::OpenRead {
                req,
                session,
                path,
                data,
                index_only: true,
            }),
            Op::Rm(path) => self.request(ctx, id, Waiting::Rm, |req| Msg::Rm { req, session, path }),
            Op::Job(spec) => {
                let (inputs, output_prefix, channels) = (spec.inputs.clone(), spec.output_prefix.clone(), spec.channels);
                self.request(ctx, id, Waiting::Job(spec), |req| Msg::JobRequest {
                    req,
                    session,
                    inputs,
                    output_prefix,
                    channels,
                })
            }
        }
        id
    }

    fn ensure_tick(&mut self, ctx: &mut Ctx<'_>) {
        if !self.ticking {
            self.ticking = true;
            ctx.set_timer(self.settings.tick, TIMER_TICK);
        }
    }

    fn send_master(&mut self, ctx: &mut Ctx<'_>, msg: Msg) {
        let psk = self.settings.psk.clone();
        let master = self.settings.master;
        self.outbox.send(ctx, master, &msg, 0, Some(&psk));
    }

    fn request(&mut self, ctx: &mut Ctx<'_>, op: OpId, w: Waiting, build: impl FnOnce(u64) -> Msg) {
        let req = self.next_req;
        self.next_req += 1;
        self.waiting.insert(req, (op, w));
        self.send_master(ctx, build(req));
    }

    fn finish(&mut self, op: OpId, outcome: OpOutcome) {
        if self.live_ops.remove(&op).is_some() {
            self.stats.ops_done += 1;
            self.done.insert(op, outcome);
        }
    }

    fn on_reply(&mut self, ctx: &mut Ctx<'_>, req: u64, reply: MasterReply) {
        let Some((op, w)) = self.waiting.remove(&req) else {
            return;
        };
        if !self.live_ops.contains_key(&op) {
            return;
        }
        match (w, reply) {
            (Waiting::Login, MasterReply::Login(r)) => {
                let r = r.map(|s| {
                    self.session = Some(s);
                    OpResult::LoggedIn(s)
                });
                self.finish(op, r.map_err(ClientError::from));
            }
            (Waiting::Ls, MasterReply::Ls(r)) => self.finish(op, r.map(OpResult::Listing).map_err(Into::into)),
            (Waiting::Stat, MasterReply::Stat(r)) => self.finish(op, r.map(OpResult::Meta).map_err(Into::into)),
            (Waiting::Rm, MasterReply::Removed(r)) => self.finish(op, r.map(|_| OpResult::Removed).map_err(Into::into)),
            (Waiting::OpenWrite { payload }, MasterReply::Open(r)) => match r {
                Ok(g) => self.start_upload(ctx, op, g, payload),
                Err(e) => self.finish(op, Err(e.into())),
            },
            (Waiting::OpenRead { index_only }, MasterReply::Open(r)) => match r {
                Ok(g) => self.start_download(ctx, g, Transfer::Download {
                    op,
                    buf: Vec::new(),
                    index_only,
                }),
                Err(e) => self.finish(op, Err(e.into())),
            },
            (Waiting::Close, MasterReply::Closed(r)) => match r {
                Ok(Some(meta)) => self.finish(op, Ok(OpResult::Uploaded(meta))),
                Ok(None) => self.finish(op, Err(ClientError::Protocol)),
                Err(e) => self.finish(op, Err(e.into())),
            },
            (Waiting::Job(spec), MasterReply::Job(r)) => match r {
                Ok(grant) => self.prepare_job(ctx, op, spec, grant),
                Err(e) => self.finish(op, Err(JobError::Master(e).into())),
            },
            (Waiting::JobIndex { job, path }, MasterReply::Open(r)) => match r {
                Ok(g) => self.start_download(ctx, g, Transfer::JobIndex { job, path, buf: Vec::new() }),
                Err(e) => self.abort_prep(ctx, job, JobError::Index(e.to_string())),
            },
            _ => self.finish(op, Err(ClientError::Protocol)),
        }
    }

    fn start_upload(&mut self, ctx: &mut Ctx<'_>, op: OpId, g: OpenGrant, payload: Vec<u8>) {
        let ch = g.channel;
        let r = ctx
            .channel_open(ch, g.slave_data)
            .and_then(|_| ctx.channel_send(ch, &payload).map(|_| ()))
            .and_then(|_| ctx.channel_finish(ch));
        match r {
            Ok(()) => {
                self.transfers.insert(ch, Transfer::Upload { op });
            }
            Err(e) => {
                ctx.channel_abort(ch);
                self.finish(op, Err(ClientError::Transfer(e.to_string())));
            }
        }
    }

    fn start_download(&mut self, ctx: &mut Ctx<'_>, g: OpenGrant, t: Transfer) {
        let ch = g.channel;
        if let Err(e) = ctx.channel_open(ch, g.slave_data) {
            self.transfer_failed(ctx, t, e.to_string());
            return;
        }
        self.transfers.insert(ch, t);
    }

    fn transfer_failed(&mut self, ctx: &mut Ctx<'_>, t: Transfer, reason: String) {
        match t {
            Transfer::Upload { op } | Transfer::Download { op, .. } => self.finish(op, Err(ClientError::Transfer(reason))),
            Transfer::JobIndex { job, path, .. } => self.retry_index(ctx, job, path, reason),
        }
    }

    /// Schedules another index fetch; the master may pick a different replica.
    fn retry_index(&mut self, ctx: &mut Ctx<'_>, job: u32, path: String, reason: String) {
        let now = ctx.now();
        let Some(p) = self.preparing.get_mut(&job) else { return };
        let n = p.tries.entry(path.clone()).or_insert(1);
        if *n >= INDEX_TRIES {
            return self.abort_prep(ctx, job, JobError::Index(reason));
        }
        *n += 1;
        log::debug!("job {job}: index of {path} failed ({reason}), retrying");
        p.retry_at.push((now + INDEX_RETRY, path));
    }

    fn fetch_index(&mut self, ctx: &mut Ctx<'_>, op: OpId, job: u32, path: String) {
        let session = self.session.unwrap_or(0);
        let data = ctx.data_addr();
        let p = path.clone();
        self.request(ctx, op, Waiting::JobIndex { job, path }, |req| Msg::OpenRead {
            req,
            session,
            path: p,
            data,
            index_only: true,
        });
    }

    fn prepare_job(&mut self, ctx: &mut Ctx<'_>, op: OpId, spec: JobSpec, grant: JobGrant) {
        let job = grant.job_id;
        let mut indexes = BTreeMap::new();
        let mut fetch = Vec::new();
        for m in &grant.inputs {
            if m.has_index() && !spec.per_file {
                fetch.push(m.path.clone());
            }
            indexes.insert(m.path.clone(), None);
        }
        self.preparing.insert(
            job,
            Preparing {
                op,
                spec,
                grant,
                indexes,
                missing: fetch.len(),
                tries: BTreeMap::new(),
                retry_at: Vec::new(),
            },
        );
        for path in fetch {
            self.fetch_index(ctx, op, job, path);
        }
        self.try_launch(ctx, job);
    }

    fn abort_prep(&mut self, ctx: &mut Ctx<'_>, job: u32, e: JobError) {
        if let Some(p) = self.preparing.remove(&job) {
            let session = self.session.unwrap_or(0);
            self.send_master(ctx, Msg::JobEnd { session, job });
            self.finish(p.op, Err(e.into()));
        }
    }

    fn try_launch(&mut self, ctx: &mut Ctx<'_>, job: u32) {
        if self.preparing.get(&job).is_none_or(|p| p.missing > 0) {
            return;
        }
        let p = self.preparing.remove(&job).expect("checked");
        let mut files = Vec::new();
        for path in &p.spec.inputs {
            let Some(meta) = p.grant.inputs.iter().find(|m| &m.path == path || m.path == normalized(path)) else {
                continue;
            };
            let index = p.indexes.get(&meta.path).cloned().flatten();
            files.push(StreamFile { meta: meta.clone(), index });
        }
        let stream = SphereStream::new(files);
        let spes: u64 = p.grant.slaves.iter().map(|s| s.spe_count.max(1) as u64).sum();
        let policy = SegmentPolicy {
            spe_count: spes.max(1),
            smin: p.spec.smin,
            smax: p.spec.smax,
            per_file: p.spec.per_file,
        };
        let segments = match segment_stream(&stream, &policy, &p.spec.params) {
            Ok(s) => s,
            Err(e) => {
                self.preparing.insert(job, p);
                return self.abort_prep(ctx, job, e.into());
            }
        };
        let mut run = JobRun::new(
            p.spec,
            job,
            self.session.unwrap_or(0),
            self.settings.master,
            self.settings.psk.clone(),
            p.grant.channels,
            p.grant.slaves,
            p.grant.inputs,
            segments,
            ctx.now(),
        );
        let mut io = JobIo {
            ctx,
            outbox: &mut self.outbox,
        };
        run.start(&mut io);
        self.jobs.insert(job, (p.op, run));
        self.settle(job);
    }

    fn settle(&mut self, job: u32) {
        let Some((op, run)) = self.jobs.get_mut(&job) else { return };
        if let Some(outcome) = run.take_outcome() {
            let op = *op;
            self.jobs.remove(&job);
            self.finish(op, outcome.map(OpResult::Job).map_err(Into::into));
        }
    }

    fn on_transfer(&mut self, ctx: &mut Ctx<'_>, ev: ChannelEvent) {
        let id = ev.id();
        match ev {
            ChannelEvent::Data { bytes, .. } => match self.transfers.get_mut(&id) {
                Some(Transfer::Download { buf, .. }) | Some(Transfer::JobIndex { buf, .. }) => buf.extend_from_slice(&bytes),
                _ => {}
            },
            ChannelEvent::Finished { .. } => {
                let Some(t) = self.transfers.remove(&id) else { return };
                ctx.channel_close(id);
                match t {
                    Transfer::Download { op, buf, index_only } => {
                        let r = if index_only {
                            RecordIndex::decode(&buf)
                                .map(OpResult::Index)
                                .map_err(|e| ClientError::Transfer(e.to_string()))
                        } else {
                            unframe(buf)
                                .map(|(data, index)| OpResult::Downloaded { data, index })
                                .map_err(ClientError::Transfer)
                        };
                        self.finish(op, r);
                    }
                    Transfer::JobIndex { job, path, buf } => match RecordIndex::decode(&buf) {
                        Ok(ix) => {
                            if let Some(p) = self.preparing.get_mut(&job) {
                                p.indexes.insert(path, Some(ix));
                                p.missing -= 1;
                            }
                            self.try_launch(ctx, job);
                        }
                        Err(e) => self.retry_index(ctx, job, path, e.to_string()),
                    },
                    t @ Transfer::Upload { .. } => {
                        self.transfers.insert(id, t);
                    }
                }
            }
            ChannelEvent::SendComplete { .. } => {
                if let Some(Transfer::Upload { op }) = self.transfers.remove(&id) {
                    ctx.channel_close(id);
                    let session = self.session.unwrap_or(0);
                    self.request(ctx, op, Waiting::Close, |req| Msg::Close {
                        req,
                        session,
                        channel: id,
                    });
                }
            }
            ChannelEvent::Failed { error, .. } => {
                if let Some(t) = self.transfers.remove(&id) {
                    self.transfer_failed(ctx, t, error.to_string());
                }
            }
            ChannelEvent::Opened { .. } => {}
        }
    }

    fn with_job(&mut self, ctx: &mut Ctx<'_>, job: u32, f: impl FnOnce(&mut JobRun, &mut JobIo<'_, '_>)) {
        let Some((_, run)) = self.jobs.get_mut(&job) else { return };
        let mut io = JobIo {
            ctx,
            outbox: &mut self.outbox,
        };
        f(run, &mut io);
        self.settle(job);
    }
}

fn normalized(p: &str) -> String {
    crate::model::normalize_path(p).unwrap_or_else(|_| p.to_string())
}

fn job_of(msg: &Msg) -> Option<u32> {
    match msg {
        Msg::Progress { job, .. }
        | Msg::SegmentDone { job, .. }
        | Msg::Committed { job, .. }
        | Msg::FlushResult { job, .. }
        | Msg::BucketStored { job, .. }
        | Msg::Finalized { job, .. }
        | Msg::Keepalive { job, .. }
        | Msg::BucketFailed { job, .. } => Some(*job),
        _ => None,
    }
}

impl Actor for Client {
    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: SocketAddr, m: Message) {
        let sealed = proto::is_sealed(m.msg_type);
        let key = sealed.then(|| self.settings.psk.clone());
        let msg = match proto::decode(&m, key.as_deref()) {
            Ok(msg) => msg,
            Err(e) => {
                self.stats.bad_tags += 1;
                log::warn!("dropping message from {from}: {e}");
                return;
            }
        };
        match msg {
            Msg::MasterReply { req, reply } if from == self.settings.master => self.on_reply(ctx, req, reply),
            other if m.msg_type >> 8 == 0x04 => {
                if let Some(job) = job_of(&other) {
                    self.with_job(ctx, job, |run, io| run.on_message(io, from, other));
                }
            }
            other => log::debug!("ignoring {:#06x} from {from}", other.code()),
        }
    }

    fn on_delivery(&mut self, ctx: &mut Ctx<'_>, d: Delivery) {
        if let Some(peer) = self.outbox.on_delivery(ctx, &d) {
            if peer == self.settings.master {
                let waiting = std::mem::take(&mut self.waiting);
                for (_, (op, w)) in waiting {
                    match w {
                        Waiting::JobIndex { job, .. } => self.abort_prep(ctx, job, JobError::Index("master unreachable".into())),
                        _ => self.finish(op, Err(ClientError::Unreachable)),
                    }
                }
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        if token == TIMER_TICK {
            let now = ctx.now();
            let mut due = Vec::new();
            for (job, p) in self.preparing.iter_mut() {
                let (ready, later): (Vec<_>, Vec<_>) = p.retry_at.drain(..).partition(|(t, _)| *t <= now);
                p.retry_at = later;
                due.extend(ready.into_iter().map(|(_, path)| (p.op, *job, path)));
            }
            for (op, job, path) in due {
                self.fetch_index(ctx, op, job, path);
            }
            let jobs: Vec<u32> = self.jobs.keys().copied().collect();
            for job in jobs {
                self.with_job(ctx, job, |run, io| run.tick(io));
            }
            if self.live_ops.is_empty() && self.jobs.is_empty() {
                self.ticking = false;
            } else {
                ctx.set_timer(self.settings.tick, TIMER_TICK);
            }
        } else if token >= TIMER_DEADLINE_BASE {
            let op = token - TIMER_DEADLINE_BASE;
            if self.live_ops.get(&op) == Some(&false) {
                self.waiting.retain(|_, (o, _)| *o != op);
                let chans: Vec<ChannelId> = self
                    .transfers
                    .iter()
                    .filter(|(_, t)| matches!(t, Transfer::Upload { op: o } | Transfer::Download { op: o, .. } if *o == op))
                    .map(|(c, _)| *c)
                    .collect();
                for c in chans {
                    self.transfers.remove(&c);
                    ctx.channel_abort(c);
                }
                self.finish(op, Err(ClientError::Timeout));
            }
        }
    }

    fn on_channel(&mut self, ctx: &mut Ctx<'_>, ev: ChannelEvent) {
        self.on_transfer(ctx, ev);
    }
}

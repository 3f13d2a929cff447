//! The Sphere side of a slave: runs segments, serves segment fetches to
//! peers and hosts bucket files.
//!
//! Sphere commands are honoured only for jobs the master has granted, and
//! only from that job's client (control) or its peer slaves (data
//! exchange). Commands that arrive before their grant are held briefly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::SocketAddr;
use std::ops::Range;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use crate::model::{Location, RecordIndex, SegmentExtent};
use crate::proto::{
    BucketTarget, Msg, OutputFile, OutputMode, Outbox, RunSegment, SegmentFailure, SegmentSummary, Verdict,
    PROGRESS_INTERVAL,
};
use crate::runtime::{Ctx, TimerId};
use crate::slave::store::{frame, unframe, SliceStore};
use crate::time::Time;
use crate::transport::{ChannelError, ChannelEvent, ChannelId};

use super::bucket::BucketFile;
use super::engine;
use super::udf::UdfRegistry;

/// Timer tokens at or above this value belong to the SPE host.
pub const TIMER_BASE: u64 = 1 << 40;

const MAX_HELD: usize = 4096;

#[derive(Debug, Clone)]
pub struct SpeConfig {
    /// Nominal UDF processing rate in input bytes per second.
    pub throughput: f64,
    pub keepalive: Duration,
    /// How long commands for an unknown job wait for its grant.
    pub grant_wait: Duration,
    pub busy_retry: Duration,
    pub busy_limit: u32,
}

impl Default for SpeConfig {
    fn default() -> Self {
        Self {
            throughput: 20e6,
            keepalive: PROGRESS_INTERVAL,
            grant_wait: Duration::from_secs(10),
            busy_retry: Duration::from_millis(500),
            busy_limit: 240,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpeStats {
    pub segments_started: u64,
    pub segments_done: u64,
    pub udf_failures: u64,
    pub fetches_served: u64,
    pub fetch_failures: u64,
    pub offers_sent: u64,
    pub buckets_stored: u64,
    pub duplicates_dropped: u64,
    pub rejected: u64,
    pub held: u64,
}

/// What the host needs from its slave.
pub struct SlaveIo<'a> {
    pub store: &'a SliceStore,
    pub outbox: &'a mut Outbox,
    pub master: SocketAddr,
}

type Key = (u32, u64, u32);

struct Grant {
    client: SocketAddr,
    channels: Range<u32>,
    peers: BTreeSet<SocketAddr>,
}

enum Output {
    Local { data: PathBuf, index: PathBuf },
    Buckets(BTreeMap<u32, PathBuf>),
}

enum Phase {
    Fetching { channel: ChannelId, buf: Vec<u8> },
    Computing { started: Time, done_at: Time, total: u64 },
    Done,
    Committed(OutputFile),
}

struct Attempt {
    req: RunSegment,
    phase: Phase,
    result: Option<Result<SegmentSummary, SegmentFailure>>,
    output: Option<Output>,
    progress_timer: Option<TimerId>,
}

enum TimerAction {
    Progress(Key),
    Finish(Key),
    RetryOffer(Key, u32),
    Keepalive,
    Expire,
}

#[derive(PartialEq, Eq)]
enum OfferState {
    Offered,
    Sending,
}

struct Offer {
    target: BucketTarget,
    state: OfferState,
    busy: u32,
}

/// Client reply waiting for the master to acknowledge new files.
struct Awaiting {
    job: u32,
    paths: BTreeSet<String>,
    msg: Msg,
}

struct Incoming {
    job: u32,
    bucket: u32,
    segment: u64,
    attempt: u32,
    buf: Vec<u8>,
}

pub struct SpeHost {
    cfg: SpeConfig,
    registry: Arc<UdfRegistry>,
    location: Option<Location>,
    grants: BTreeMap<u32, Grant>,
    held: Vec<(Time, SocketAddr, Msg)>,
    awaiting: Vec<Awaiting>,
    attempts: BTreeMap<Key, Attempt>,
    fetching: BTreeMap<ChannelId, Key>,
    serving: BTreeSet<ChannelId>,
    offers: BTreeMap<(Key, u32), Offer>,
    sending: BTreeMap<ChannelId, (Key, u32)>,
    handlers: BTreeMap<(u32, u32), BucketFile>,
    finalized: BTreeMap<u32, Vec<(u32, OutputFile)>>,
    incoming: BTreeMap<ChannelId, Incoming>,
    timers: BTreeMap<u64, TimerAction>,
    next_timer: u64,
    stats: SpeStats,
}

fn job_of(msg: &Msg) -> Option<u32> {
    Some(match msg {
        Msg::RunSegment(r) => r.job,
        Msg::Commit { job, .. }
        | Msg::Discard { job, .. }
        | Msg::Flush { job, .. }
        | Msg::HostBuckets { job, .. }
        | Msg::Finalize { job, .. }
        | Msg::Cleanup { job }
        | Msg::BucketOffer { job, .. }
        | Msg::BucketVerdict { job, .. }
        | Msg::Fetch { job, .. }
        | Msg::FetchFailed { job, .. } => *job,
        _ => return None,
    })
}

fn from_client(msg: &Msg) -> bool {
    matches!(
        msg,
        Msg::RunSegment(_)
            | Msg::Commit { .. }
            | Msg::Discard { .. }
            | Msg::Flush { .. }
            | Msg::HostBuckets { .. }
            | Msg::Finalize { .. }
            | Msg::Cleanup { .. }
    )
}

/// Reads a segment's bytes and its segment-relative index from the store.
pub fn read_segment(
    store: &SliceStore,
    path: &str,
    extent: &SegmentExtent,
) -> Result<(Vec<u8>, Option<RecordIndex>), String> {
    match extent {
        SegmentExtent::Records { records, bytes } => {
            let full = store
                .read_index(path)
                .ok_or_else(|| format!("{path}: index missing or invalid"))?;
            if full.byte_range(records.clone()).as_ref() != Some(bytes) {
                return Err(format!("{path}: records {records:?} do not span bytes {bytes:?}"));
            }
            let ix = full.slice(records.clone()).expect("range checked");
            let data = store.read_range(path, bytes.clone()).map_err(|e| e.to_string())?;
            Ok((data, Some(ix)))
        }
        SegmentExtent::WholeFile { size, .. } => {
            let data = store.read(path).map_err(|e| e.to_string())?;
            if data.len() as u64 != *size {
                return Err(format!("{path}: size {} but segment says {size}", data.len()));
            }
            Ok((data, store.read_index(path)))
        }
    }
}

impl SpeHost {
    pub fn new(cfg: SpeConfig, registry: Arc<UdfRegistry>, location: Option<Location>) -> Self {
        Self {
            cfg,
            registry,
            location,
            grants: BTreeMap::new(),
            held: Vec::new(),
            awaiting: Vec::new(),
            attempts: BTreeMap::new(),
            fetching: BTreeMap::new(),
            serving: BTreeSet::new(),
            offers: BTreeMap::new(),
            sending: BTreeMap::new(),
            handlers: BTreeMap::new(),
            finalized: BTreeMap::new(),
            incoming: BTreeMap::new(),
            timers: BTreeMap::new(),
            next_timer: TIMER_BASE,
            stats: SpeStats::default(),
        }
    }

    pub fn stats(&self) -> &SpeStats {
        &self.stats
    }

    pub fn granted_jobs(&self) -> impl Iterator<Item = u32> + '_ {
        self.grants.keys().copied()
    }

    /// Attempts currently fetching or computing.
    pub fn active_attempts(&self) -> usize {
        self.attempts
            .values()
            .filter(|a| matches!(a.phase, Phase::Fetching { .. } | Phase::Computing { .. }))
            .count()
    }

    pub fn start(&mut self, ctx: &mut Ctx<'_>) {
        let d = self.cfg.keepalive;
        self.timer(ctx, d, TimerAction::Keepalive);
    }

    fn timer(&mut self, ctx: &mut Ctx<'_>, after: Duration, action: TimerAction) -> TimerId {
        let token = self.next_timer;
        self.next_timer += 1;
        self.timers.insert(token, action);
        ctx.set_timer(after, token)
    }

    fn send(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, to: SocketAddr, msg: Msg) {
        io.outbox.send(ctx, to, &msg, 0, None);
    }

    fn client(&self, job: u32) -> Option<SocketAddr> {
        self.grants.get(&job).map(|g| g.client)
    }

    fn to_client(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, job: u32, msg: Msg) {
        if let Some(c) = self.client(job) {
            self.send(ctx, io, c, msg);
        }
    }

    fn after_ack(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, job: u32, paths: BTreeSet<String>, msg: Msg) {
        if paths.is_empty() {
            self.to_client(ctx, io, job, msg);
        } else {
            self.awaiting.push(Awaiting { job, paths, msg });
        }
    }

    /// The master has recorded `path`; releases replies that were waiting on it.
    pub fn on_file_ack(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, path: &str) {
        for a in &mut self.awaiting {
            a.paths.remove(path);
        }
        let (ready, rest) = std::mem::take(&mut self.awaiting).into_iter().partition(|a| a.paths.is_empty());
        self.awaiting = rest;
        for a in ready {
            self.to_client(ctx, io, a.job, a.msg);
        }
    }

    /// A fresh registration carried a full scan, so every local file is known.
    pub fn on_registered(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>) {
        for a in std::mem::take(&mut self.awaiting) {
            self.to_client(ctx, io, a.job, a.msg);
        }
    }

    fn channel_issued(&self, job: u32, ch: ChannelId) -> bool {
        self.grants.get(&job).is_some_and(|g| g.channels.contains(&ch))
    }

    pub fn on_grant(
        &mut self,
        ctx: &mut Ctx<'_>,
        io: &mut SlaveIo<'_>,
        job: u32,
        client: SocketAddr,
        channels: Range<u32>,
        peers: Vec<SocketAddr>,
    ) {
        if self.grants.contains_key(&job) {
            return;
        }
        self.grants.insert(
            job,
            Grant {
                client,
                channels,
                peers: peers.into_iter().collect(),
            },
        );
        let (ready, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.held)
            .into_iter()
            .partition(|(_, _, m)| job_of(m) == Some(job));
        self.held = rest;
        for (_, from, m) in ready {
            self.handle(ctx, io, from, m);
        }
    }

    pub fn on_revoke(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, job: u32) {
        self.cleanup(ctx, io, job);
        self.grants.remove(&job);
        self.finalized.remove(&job);
    }

    /// Handles a Sphere message. Returns false for messages it does not own.
    pub fn handle(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, from: SocketAddr, msg: Msg) -> bool {
        let Some(job) = job_of(&msg) else {
            return false;
        };
        let Some(g) = self.grants.get(&job) else {
            if self.held.len() < MAX_HELD {
                self.stats.held += 1;
                self.held.push((ctx.now(), from, msg));
                let wait = self.cfg.grant_wait;
                self.timer(ctx, wait, TimerAction::Expire);
            } else {
                self.stats.rejected += 1;
            }
            return true;
        };
        let allowed = if from_client(&msg) {
            from == g.client
        } else {
            g.peers.contains(&from)
        };
        if !allowed {
            self.stats.rejected += 1;
            log::warn!("rejecting {:#06x} for job {job} from {from}", msg.code());
            return true;
        }
        match msg {
            Msg::RunSegment(r) => self.run(ctx, io, r),
            Msg::Commit {
                job,
                segment_id,
                attempt,
                path,
            } => self.commit(ctx, io, (job, segment_id, attempt), path),
            Msg::Discard {
                job,
                segment_id,
                attempt,
            } => self.discard(ctx, (job, segment_id, attempt)),
            Msg::Flush {
                job,
                segment_id,
                attempt,
                targets,
            } => self.flush(ctx, io, (job, segment_id, attempt), targets),
            Msg::HostBuckets { job, buckets, .. } => self.host_buckets(ctx, io, job, buckets),
            Msg::Finalize { job, output_prefix } => self.finalize(ctx, io, job, &output_prefix),
            Msg::Cleanup { job } => self.cleanup(ctx, io, job),
            Msg::BucketOffer {
                job,
                bucket,
                segment_id,
                attempt,
                channel,
                data,
                ..
            } => self.on_offer(ctx, io, from, job, bucket, segment_id, attempt, channel, data),
            Msg::BucketVerdict {
                job,
                bucket,
                segment_id,
                attempt,
                verdict,
            } => self.on_verdict(ctx, io, (job, segment_id, attempt), bucket, verdict),
            Msg::Fetch {
                job,
                channel,
                path,
                extent,
                data,
            } => self.serve_fetch(ctx, io, from, job, channel, &path, &extent, data),
            Msg::FetchFailed { channel, reason, .. } => {
                if let Some(key) = self.fetching.remove(&channel) {
                    ctx.channel_abort(channel);
                    self.fail(ctx, io, key, SegmentFailure::Fetch(reason));
                }
            }
            _ => unreachable!("job_of covers only handled variants"),
        }
        true
    }

    fn run(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, req: RunSegment) {
        let key = (req.job, req.segment.segment_id, req.attempt);
        if self.attempts.contains_key(&key) {
            return;
        }
        self.stats.segments_started += 1;
        self.attempts.insert(
            key,
            Attempt {
                req: req.clone(),
                phase: Phase::Done,
                result: None,
                output: None,
                progress_timer: None,
            },
        );
        let buckets = match req.output {
            OutputMode::Local => None,
            OutputMode::Buckets(b) => Some(b),
        };
        let udf = match self.registry.resolve(&req.udf) {
            Ok(u) => u.clone(),
            Err(e) => return self.fail(ctx, io, key, SegmentFailure::Resolve(e.to_string())),
        };
        if let Err(f) = engine::validate(&udf, &req.segment, buckets) {
            return self.fail(ctx, io, key, f);
        }
        if io.store.contains(&req.segment.file) {
            match read_segment(io.store, &req.segment.file, &req.segment.extent) {
                Ok((data, ix)) => self.compute(ctx, io, key, data, ix),
                Err(e) => self.fail(ctx, io, key, SegmentFailure::Io(e)),
            }
            return;
        }
        let me = ctx.msg_addr();
        let Some(src) = req.sources.iter().find(|s| s.msg != me).copied() else {
            return self.fail(ctx, io, key, SegmentFailure::Fetch("no replica to fetch from".into()));
        };
        let ch = req.fetch_channel;
        if !self.channel_issued(req.job, ch) {
            return self.fail(ctx, io, key, SegmentFailure::Fetch(format!("channel {ch} not issued")));
        }
        if let Err(e) = ctx.channel_open(ch, src.data) {
            return self.fail(ctx, io, key, SegmentFailure::Fetch(e.to_string()));
        }
        self.fetching.insert(ch, key);
        let data = ctx.data_addr();
        self.send(
            ctx,
            io,
            src.msg,
            Msg::Fetch {
                job: req.job,
                channel: ch,
                path: req.segment.file.clone(),
                extent: req.segment.extent.clone(),
                data,
            },
        );
        let a = self.attempts.get_mut(&key).expect("inserted");
        a.phase = Phase::Fetching {
            channel: ch,
            buf: Vec::new(),
        };
        self.progress(ctx, io, key);
    }

    fn compute(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, key: Key, data: Vec<u8>, ix: Option<RecordIndex>) {
        let Some(a) = self.attempts.get(&key) else { return };
        let req = a.req.clone();
        let udf = self.registry.resolve(&req.udf).expect("resolved at start").clone();
        let buckets = match req.output {
            OutputMode::Local => None,
            OutputMode::Buckets(b) => Some(b),
        };
        let bytes_in = data.len() as u64;
        let outcome = engine::run_segment(&udf, &req.segment, &data, ix.as_ref(), buckets);
        drop(data);
        let (result, output, records_in) = match outcome {
            Ok(run) => match self.write_output(io.store, key, run.output) {
                Ok((summary, out)) => (
                    Ok(SegmentSummary {
                        records_in: run.records_in,
                        ..summary
                    }),
                    Some(out),
                    run.records_in,
                ),
                Err(e) => (Err(SegmentFailure::Io(e)), None, run.records_in),
            },
            Err(f) => (Err(f), None, req.segment.record_count().unwrap_or(1)),
        };
        let nominal = Duration::from_secs_f64(bytes_in as f64 / self.cfg.throughput);
        let delay = ctx.compute_time(nominal);
        let now = ctx.now();
        let a = self.attempts.get_mut(&key).expect("present");
        a.result = Some(result);
        a.output = output;
        a.phase = Phase::Computing {
            started: now,
            done_at: now + delay,
            total: records_in,
        };
        if delay.is_zero() {
            self.finish(ctx, io, key);
        } else {
            self.timer(ctx, delay, TimerAction::Finish(key));
            if self.attempts[&key].progress_timer.is_none() {
                self.progress(ctx, io, key);
            }
        }
    }

    fn write_output(
        &self,
        store: &SliceStore,
        key: Key,
        out: super::udf::Emitter,
    ) -> Result<(SegmentSummary, Output), String> {
        let (job, seg, att) = key;
        let records_out = out.records_out();
        let err = |e: std::io::Error| e.to_string();
        if out.bucket_count() == 0 {
            let dir = store.scratch("work").map_err(err)?.join(format!("job{job}"));
            fs::create_dir_all(&dir).map_err(err)?;
            let local = out.into_local();
            let data = dir.join(format!("s{seg}.a{att}"));
            let index = dir.join(format!("s{seg}.a{att}.idx"));
            store.reserve(local.data.len() as u64).map_err(|e| e.to_string())?;
            fs::write(&data, &local.data).map_err(err)?;
            fs::write(&index, local.index.encode()).map_err(err)?;
            let summary = SegmentSummary {
                records_in: 0,
                records_out,
                bytes_out: local.data.len() as u64,
                buckets: BTreeMap::new(),
            };
            Ok((summary, Output::Local { data, index }))
        } else {
            let dir = store.scratch("spool").map_err(err)?.join(format!("job{job}"));
            fs::create_dir_all(&dir).map_err(err)?;
            let mut files = BTreeMap::new();
            let mut sizes = BTreeMap::new();
            let mut bytes_out = 0;
            for (b, bd) in out.into_buckets() {
                let p = dir.join(format!("s{seg}.a{att}.b{b}"));
                store.reserve(bd.data.len() as u64).map_err(|e| e.to_string())?;
                fs::write(&p, frame(&bd.data, Some(&bd.index))).map_err(err)?;
                bytes_out += bd.data.len() as u64;
                sizes.insert(b, bd.data.len() as u64);
                files.insert(b, p);
            }
            let summary = SegmentSummary {
                records_in: 0,
                records_out,
                bytes_out,
                buckets: sizes,
            };
            Ok((summary, Output::Buckets(files)))
        }
    }

    fn progress(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, key: Key) {
        let now = ctx.now();
        let Some(a) = self.attempts.get_mut(&key) else { return };
        let (done, total) = match &a.phase {
            Phase::Fetching { .. } => (0, a.req.segment.record_count().unwrap_or(1)),
            Phase::Computing {
                started,
                done_at,
                total,
            } => {
                let span = done_at.saturating_since(*started).as_secs_f64();
                let frac = if span <= 0.0 {
                    1.0
                } else {
                    (now.saturating_since(*started).as_secs_f64() / span).min(1.0)
                };
                ((*total as f64 * frac) as u64, *total)
            }
            _ => {
                a.progress_timer = None;
                return;
            }
        };
        let msg = Msg::Progress {
            job: key.0,
            segment_id: key.1,
            attempt: key.2,
            records_done: done,
            records_total: total,
        };
        let id = self.timer(ctx, PROGRESS_INTERVAL, TimerAction::Progress(key));
        self.attempts.get_mut(&key).expect("present").progress_timer = Some(id);
        self.to_client(ctx, io, key.0, msg);
    }

    fn finish(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, key: Key) {
        let Some(a) = self.attempts.get_mut(&key) else { return };
        if !matches!(a.phase, Phase::Computing { .. }) {
            return;
        }
        a.phase = Phase::Done;
        if let Some(t) = a.progress_timer.take() {
            ctx.cancel_timer(t);
        }
        let result = a.result.clone().expect("computed");
        match &result {
            Ok(_) => self.stats.segments_done += 1,
            Err(SegmentFailure::Udf(_)) => self.stats.udf_failures += 1,
            Err(_) => {}
        }
        self.to_client(
            ctx,
            io,
            key.0,
            Msg::SegmentDone {
                job: key.0,
                segment_id: key.1,
                attempt: key.2,
                result,
            },
        );
    }

    fn fail(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, key: Key, f: SegmentFailure) {
        if let SegmentFailure::Fetch(_) = f {
            self.stats.fetch_failures += 1;
        }
        if let Some(a) = self.attempts.get_mut(&key) {
            a.phase = Phase::Done;
            a.result = Some(Err(f.clone()));
            if let Some(t) = a.progress_timer.take() {
                ctx.cancel_timer(t);
            }
        }
        self.to_client(
            ctx,
            io,
            key.0,
            Msg::SegmentDone {
                job: key.0,
                segment_id: key.1,
                attempt: key.2,
                result: Err(f),
            },
        );
    }

    fn commit(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, key: Key, path: String) {
        let reply = |result| Msg::Committed {
            job: key.0,
            segment_id: key.1,
            attempt: key.2,
            result,
        };
        let Some(a) = self.attempts.get_mut(&key) else {
            return self.to_client(ctx, io, key.0, reply(Err("no such attempt".into())));
        };
        if let Phase::Committed(of) = &a.phase {
            let m = reply(Ok(of.clone()));
            return self.to_client(ctx, io, key.0, m);
        }
        let (Phase::Done, Some(Ok(_)), Some(Output::Local { data, index })) = (&a.phase, &a.result, &a.output) else {
            return self.to_client(ctx, io, key.0, reply(Err("no local output to commit".into())));
        };
        match io.store.install(&path, data, Some(index)) {
            Ok(entry) => {
                let of = OutputFile {
                    path: entry.path.clone(),
                    size: entry.size,
                    records: entry.record_count.unwrap_or(0),
                };
                a.phase = Phase::Committed(of.clone());
                a.output = None;
                let master = io.master;
                let paths = BTreeSet::from([entry.path.clone()]);
                self.send(ctx, io, master, Msg::FileAdded { entry });
                self.after_ack(ctx, io, key.0, paths, reply(Ok(of)));
            }
            Err(e) => self.to_client(ctx, io, key.0, reply(Err(e.to_string()))),
        }
    }

    fn drop_attempt(&mut self, ctx: &mut Ctx<'_>, key: Key) {
        if let Some(a) = self.attempts.remove(&key) {
            if let Phase::Fetching { channel, .. } = a.phase {
                self.fetching.remove(&channel);
                ctx.channel_abort(channel);
            }
            if let Some(t) = a.progress_timer {
                ctx.cancel_timer(t);
            }
            match a.output {
                Some(Output::Local { data, index }) => {
                    let _ = fs::remove_file(data);
                    let _ = fs::remove_file(index);
                }
                Some(Output::Buckets(files)) => {
                    for p in files.values() {
                        let _ = fs::remove_file(p);
                    }
                }
                None => {}
            }
        }
        let stale: Vec<_> = self.offers.keys().filter(|(k, _)| *k == key).copied().collect();
        for s in stale {
            self.offers.remove(&s);
        }
    }

    fn discard(&mut self, ctx: &mut Ctx<'_>, key: Key) {
        self.drop_attempt(ctx, key);
    }

    fn flush_result(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, key: Key, t: &BucketTarget, stored: bool) {
        self.to_client(
            ctx,
            io,
            key.0,
            Msg::FlushResult {
                job: key.0,
                segment_id: key.1,
                attempt: key.2,
                bucket: t.bucket,
                handler: t.handler,
                stored,
            },
        );
    }

    fn spool_file(&self, key: Key, bucket: u32) -> Option<Option<PathBuf>> {
        let a = self.attempts.get(&key)?;
        match (&a.phase, &a.result, &a.output) {
            (Phase::Done, Some(Ok(_)), Some(Output::Buckets(files))) => Some(files.get(&bucket).cloned()),
            _ => None,
        }
    }

    fn flush(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, key: Key, targets: Vec<BucketTarget>) {
        for t in targets {
            match self.spool_file(key, t.bucket) {
                None => self.flush_result(ctx, io, key, &t, false),
                Some(None) => self.flush_result(ctx, io, key, &t, true),
                Some(Some(_)) => {
                    if let Some(o) = self.offers.get(&(key, t.bucket)) {
                        if o.target == t {
                            continue;
                        }
                    }
                    if t.handler != ctx.msg_addr() && !self.channel_issued(key.0, t.channel) {
                        self.flush_result(ctx, io, key, &t, false);
                        continue;
                    }
                    self.offers.insert(
                        (key, t.bucket),
                        Offer {
                            target: t.clone(),
                            state: OfferState::Offered,
                            busy: 0,
                        },
                    );
                    self.send_offer(ctx, io, key, t.bucket);
                }
            }
        }
    }

    fn send_offer(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, key: Key, bucket: u32) {
        let Some(o) = self.offers.get(&(key, bucket)) else { return };
        let t = o.target.clone();
        let Some(Some(path)) = self.spool_file(key, bucket) else { return };
        self.stats.offers_sent += 1;
        if t.handler == ctx.msg_addr() {
            let verdict = match self.handlers.get_mut(&(key.0, bucket)) {
                None => Verdict::NotHandler,
                Some(h) => h.offer(key.1, key.2, t.channel),
            };
            if verdict == Verdict::Accept {
                let me = ctx.msg_addr();
                match fs::read(&path).map_err(|e| e.to_string()) {
                    Ok(buf) => self.store_incoming(
                        ctx,
                        io,
                        Incoming {
                            job: key.0,
                            bucket,
                            segment: key.1,
                            attempt: key.2,
                            buf,
                        },
                    ),
                    Err(e) => log::error!("{me}: cannot read spool {}: {e}", path.display()),
                }
                self.offers.remove(&(key, bucket));
                return;
            }
            self.on_verdict(ctx, io, key, bucket, verdict);
            return;
        }
        let bytes = fs::metadata(&path).map_or(0, |m| m.len());
        let data = ctx.data_addr();
        self.send(
            ctx,
            io,
            t.handler,
            Msg::BucketOffer {
                job: key.0,
                bucket,
                segment_id: key.1,
                attempt: key.2,
                channel: t.channel,
                bytes,
                data,
            },
        );
    }

    fn on_verdict(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, key: Key, bucket: u32, verdict: Verdict) {
        let Some(o) = self.offers.get_mut(&(key, bucket)) else { return };
        if o.state != OfferState::Offered {
            return;
        }
        let t = o.target.clone();
        match verdict {
            Verdict::Accept => {
                let Some(Some(path)) = self.spool_file(key, bucket) else { return };
                let payload = match fs::read(&path) {
                    Ok(p) => p,
                    Err(e) => {
                        log::error!("spool {}: {e}", path.display());
                        self.offers.remove(&(key, bucket));
                        return self.flush_result(ctx, io, key, &t, false);
                    }
                };
                match ctx.channel_open(t.channel, t.handler_data) {
                    Ok(()) | Err(ChannelError::Duplicate(_)) => {}
                    Err(_) => {
                        self.offers.remove(&(key, bucket));
                        return self.flush_result(ctx, io, key, &t, false);
                    }
                }
                let _ = ctx.channel_send(t.channel, &payload);
                let _ = ctx.channel_finish(t.channel);
                self.offers.get_mut(&(key, bucket)).expect("present").state = OfferState::Sending;
                self.sending.insert(t.channel, (key, bucket));
            }
            Verdict::Duplicate => {
                self.stats.duplicates_dropped += 1;
                self.offers.remove(&(key, bucket));
                self.flush_result(ctx, io, key, &t, true);
            }
            Verdict::Busy => {
                o.busy += 1;
                if o.busy > self.cfg.busy_limit {
                    self.offers.remove(&(key, bucket));
                    self.flush_result(ctx, io, key, &t, false);
                } else {
                    let d = self.cfg.busy_retry;
                    self.timer(ctx, d, TimerAction::RetryOffer(key, bucket));
                }
            }
            Verdict::NotHandler => {
                self.offers.remove(&(key, bucket));
                self.flush_result(ctx, io, key, &t, false);
            }
        }
    }

    fn host_buckets(&mut self, _ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, job: u32, buckets: Vec<u32>) {
        for b in buckets {
            let done = self.finalized.get(&job).is_some_and(|f| f.iter().any(|(x, _)| *x == b));
            if done || self.handlers.contains_key(&(job, b)) {
                continue;
            }
            let path = io
                .store
                .scratch("buckets")
                .map(|d| d.join(format!("job{job}")).join(format!("b{b}")));
            match path.and_then(BucketFile::create) {
                Ok(h) => {
                    self.handlers.insert((job, b), h);
                }
                Err(e) => log::error!("bucket {b} of job {job}: {e}"),
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_offer(
        &mut self,
        ctx: &mut Ctx<'_>,
        io: &mut SlaveIo<'_>,
        from: SocketAddr,
        job: u32,
        bucket: u32,
        segment: u64,
        attempt: u32,
        channel: ChannelId,
        data: SocketAddr,
    ) {
        let issued = self.channel_issued(job, channel);
        let verdict = match self.handlers.get_mut(&(job, bucket)) {
            None => Verdict::NotHandler,
            Some(_) if !issued => Verdict::NotHandler,
            Some(h) => h.offer(segment, attempt, channel),
        };
        if verdict == Verdict::Accept && !self.incoming.contains_key(&channel) {
            match ctx.channel_open(channel, data) {
                Ok(()) => {
                    self.incoming.insert(
                        channel,
                        Incoming {
                            job,
                            bucket,
                            segment,
                            attempt,
                            buf: Vec::new(),
                        },
                    );
                }
                Err(e) => {
                    log::warn!("bucket channel {channel}: {e}");
                    if let Some(h) = self.handlers.get_mut(&(job, bucket)) {
                        h.abandon(segment, attempt);
                    }
                    return;
                }
            }
        }
        self.send(
            ctx,
            io,
            from,
            Msg::BucketVerdict {
                job,
                bucket,
                segment_id: segment,
                attempt,
                verdict,
            },
        );
    }

    fn store_incoming(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, inc: Incoming) {
        let Incoming {
            job,
            bucket,
            segment,
            attempt,
            buf,
        } = inc;
        let Some(h) = self.handlers.get_mut(&(job, bucket)) else { return };
        let res = unframe(buf).and_then(|(data, ix)| {
            let ix = ix.ok_or("bucket payload without index")?;
            io.store.reserve(data.len() as u64).map_err(|e| e.to_string())?;
            h.complete(segment, attempt, &data, &ix).map_err(|e| e.to_string())
        });
        match res {
            Ok(true) => {
                self.stats.buckets_stored += 1;
                self.to_client(
                    ctx,
                    io,
                    job,
                    Msg::BucketStored {
                        job,
                        bucket,
                        segment_id: segment,
                        attempt,
                    },
                );
            }
            Ok(false) => self.stats.duplicates_dropped += 1,
            Err(reason) => {
                if let Some(h) = self.handlers.get_mut(&(job, bucket)) {
                    h.abandon(segment, attempt);
                }
                self.to_client(ctx, io, job, Msg::BucketFailed { job, bucket, reason });
            }
        }
    }

    fn finalize(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, job: u32, prefix: &str) {
        let mine: Vec<u32> = self.handlers.range((job, 0)..=(job, u32::MAX)).map(|(k, _)| k.1).collect();
        let mut error = None;
        let mut paths = BTreeSet::new();
        for b in mine {
            let h = self.handlers.remove(&(job, b)).expect("listed");
            let logical = format!("{}/{job}.bucket.{b}", prefix.trim_end_matches('/'));
            let res = io
                .store
                .local_path(&logical)
                .map_err(|e| e.to_string())
                .and_then(|p| h.finalize(&p).map_err(|e| e.to_string()))
                .and_then(|_| io.store.entry(&logical).map_err(|e| e.to_string()));
            match res {
                Ok(entry) => {
                    self.finalized.entry(job).or_default().push((
                        b,
                        OutputFile {
                            path: entry.path.clone(),
                            size: entry.size,
                            records: entry.record_count.unwrap_or(0),
                        },
                    ));
                    let master = io.master;
                    paths.insert(entry.path.clone());
                    self.send(ctx, io, master, Msg::FileAdded { entry });
                }
                Err(e) => error = Some(format!("bucket {b}: {e}")),
            }
        }
        let result = match error {
            Some(e) => Err(e),
            None => {
                let mut files = self.finalized.get(&job).cloned().unwrap_or_default();
                files.sort_by_key(|(b, _)| *b);
                Ok(files)
            }
        };
        if result.is_err() {
            paths.clear();
        }
        self.after_ack(ctx, io, job, paths, Msg::Finalized { job, result });
    }

    #[allow(clippy::too_many_arguments)]
    fn serve_fetch(
        &mut self,
        ctx: &mut Ctx<'_>,
        io: &mut SlaveIo<'_>,
        from: SocketAddr,
        job: u32,
        channel: ChannelId,
        path: &str,
        extent: &SegmentExtent,
        data: SocketAddr,
    ) {
        if self.serving.contains(&channel) {
            return;
        }
        let fail = |reason: String| Msg::FetchFailed { job, channel, reason };
        if !self.channel_issued(job, channel) {
            return self.send(ctx, io, from, fail(format!("channel {channel} not issued")));
        }
        match read_segment(io.store, path, extent) {
            Ok((bytes, ix)) => {
                if let Err(e) = ctx.channel_open(channel, data) {
                    return self.send(ctx, io, from, fail(e.to_string()));
                }
                let _ = ctx.channel_send(channel, &frame(&bytes, ix.as_ref()));
                let _ = ctx.channel_finish(channel);
                self.serving.insert(channel);
                self.stats.fetches_served += 1;
            }
            Err(e) => self.send(ctx, io, from, fail(e)),
        }
    }

    fn cleanup(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, job: u32) {
        let keys: Vec<Key> = self.attempts.keys().filter(|k| k.0 == job).copied().collect();
        for k in keys {
            self.drop_attempt(ctx, k);
        }
        let chans: Vec<ChannelId> = self.incoming.iter().filter(|(_, i)| i.job == job).map(|(c, _)| *c).collect();
        for c in chans {
            self.incoming.remove(&c);
            ctx.channel_abort(c);
        }
        let hs: Vec<(u32, u32)> = self.handlers.range((job, 0)..=(job, u32::MAX)).map(|(k, _)| *k).collect();
        for k in hs {
            self.handlers.remove(&k);
        }
        for area in ["work", "spool", "buckets"] {
            if let Ok(d) = io.store.scratch(area) {
                let _ = fs::remove_dir_all(d.join(format!("job{job}")));
            }
        }
    }

    /// Handles a channel event. Returns false for channels it does not own.
    pub fn on_channel(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, ev: ChannelEvent) -> bool {
        let id = ev.id();
        if let Some(&key) = self.fetching.get(&id) {
            match ev {
                ChannelEvent::Data { bytes, .. } => {
                    if let Some(Attempt {
                        phase: Phase::Fetching { buf, .. },
                        ..
                    }) = self.attempts.get_mut(&key)
                    {
                        buf.extend_from_slice(&bytes);
                    }
                }
                ChannelEvent::Finished { .. } => {
                    self.fetching.remove(&id);
                    ctx.channel_close(id);
                    let buf = match self.attempts.get_mut(&key) {
                        Some(Attempt {
                            phase: Phase::Fetching { buf, .. },
                            ..
                        }) => std::mem::take(buf),
                        _ => return true,
                    };
                    match unframe(buf) {
                        Ok((data, ix)) => self.compute(ctx, io, key, data, ix),
                        Err(e) => self.fail(ctx, io, key, SegmentFailure::Fetch(e)),
                    }
                }
                ChannelEvent::Failed { error, .. } => {
                    self.fetching.remove(&id);
                    self.fail(ctx, io, key, SegmentFailure::Fetch(error.to_string()));
                }
                _ => {}
            }
            return true;
        }
        if self.serving.contains(&id) {
            if matches!(ev, ChannelEvent::SendComplete { .. } | ChannelEvent::Failed { .. }) {
                self.serving.remove(&id);
                ctx.channel_close(id);
            }
            return true;
        }
        if let Some(&(key, bucket)) = self.sending.get(&id) {
            match ev {
                ChannelEvent::SendComplete { .. } => {
                    self.sending.remove(&id);
                    ctx.channel_close(id);
                    self.offers.remove(&(key, bucket));
                }
                ChannelEvent::Failed { .. } => {
                    self.sending.remove(&id);
                    if let Some(o) = self.offers.remove(&(key, bucket)) {
                        self.flush_result(ctx, io, key, &o.target, false);
                    }
                }
                _ => {}
            }
            return true;
        }
        if self.incoming.contains_key(&id) {
            match ev {
                ChannelEvent::Data { bytes, .. } => {
                    self.incoming.get_mut(&id).expect("present").buf.extend_from_slice(&bytes);
                }
                ChannelEvent::Finished { .. } => {
                    let inc = self.incoming.remove(&id).expect("present");
                    ctx.channel_close(id);
                    self.store_incoming(ctx, io, inc);
                }
                ChannelEvent::Failed { .. } => {
                    let inc = self.incoming.remove(&id).expect("present");
                    if let Some(h) = self.handlers.get_mut(&(inc.job, inc.bucket)) {
                        h.abandon(inc.segment, inc.attempt);
                    }
                }
                _ => {}
            }
            return true;
        }
        false
    }

    /// Handles a timer. Returns false for tokens it does not own.
    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, io: &mut SlaveIo<'_>, token: u64) -> bool {
        if token < TIMER_BASE {
            return false;
        }
        let Some(action) = self.timers.remove(&token) else {
            return true;
        };
        match action {
            TimerAction::Progress(key) => self.progress(ctx, io, key),
            TimerAction::Finish(key) => self.finish(ctx, io, key),
            TimerAction::RetryOffer(key, b) => {
                if self
                    .offers
                    .get(&(key, b))
                    .is_some_and(|o| o.state == OfferState::Offered)
                {
                    self.send_offer(ctx, io, key, b);
                }
            }
            TimerAction::Keepalive => {
                let loc = self.location.clone();
                let jobs: Vec<(u32, SocketAddr)> = self.grants.iter().map(|(j, g)| (*j, g.client)).collect();
                for (job, client) in jobs {
                    let _ = ctx.send(
                        client,
                        crate::proto::code::KEEPALIVE,
                        0,
                        crate::proto::encode(
                            &Msg::Keepalive {
                                job,
                                location: loc.clone(),
                            },
                            0,
                            None,
                        )
                        .expect("unsealed"),
                    );
                }
                let d = self.cfg.keepalive;
                self.timer(ctx, d, TimerAction::Keepalive);
            }
            TimerAction::Expire => {
                let now = ctx.now();
                let wait = self.cfg.grant_wait;
                let before = self.held.len();
                self.held.retain(|(t, _, _)| now.saturating_since(*t) < wait);
                self.stats.rejected += (before - self.held.len()) as u64;
            }
        }
        true
    }
}

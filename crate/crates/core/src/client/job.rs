//! One Sphere stage as driven by the client.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::ops::Range;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{location_distance, FileMeta, Segment, SlaveId, SlaveStatus};
use crate::proto::{
    BucketTarget, FsError, Msg, OutputFile, OutputMode, Outbox, RunSegment, SegmentFailure, SegmentSummary, Source,
};
use crate::runtime::Ctx;
use crate::sphere::{schedule, speculate, PendingSegment, RunningSegment, SegmentError, Spe, SpeId, SpeculationPolicy};
use crate::time::Time;

/// When idle SPEs duplicate running segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speculation {
    Off,
    /// Every running segment is a candidate.
    Always,
    /// Only segments expected to outlast a typical segment are candidates.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub inputs: Vec<String>,
    pub udf: String,
    pub output: OutputMode,
    pub output_prefix: String,
    pub params: Vec<u8>,
    pub smin: u64,
    pub smax: u64,
    pub per_file: bool,
    /// Silence after which a node is dropped from the job.
    pub timeout: Duration,
    pub speculation: Speculation,
    /// Attempts per segment before it is failed for good.
    pub max_attempts: u32,
    pub channels: u32,
}

impl JobSpec {
    pub fn new(inputs: Vec<String>, udf: impl Into<String>, output: OutputMode) -> Self {
        Self {
            inputs,
            udf: udf.into(),
            output,
            output_prefix: "/sphere".into(),
            params: Vec::new(),
            smin: crate::sphere::DEFAULT_SMIN,
            smax: crate::sphere::DEFAULT_SMAX,
            per_file: false,
            timeout: Duration::from_secs(10),
            speculation: Speculation::Estimated,
            max_attempts: 20,
            channels: 65536,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JobError {
    #[error("master refused the job: {0}")]
    Master(FsError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("cannot read index: {0}")]
    Index(String),
    #[error("no slave is available")]
    NoSpe,
    #[error("job ran out of channel ids")]
    Channels,
    #[error("bucket {bucket}: {reason}")]
    Bucket { bucket: u32, reason: String },
    #[error("finalize failed: {0}")]
    Finalize(String),
}

/// One scheduling decision point, for locality checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentInstant {
    pub at_micros: u64,
    pub local_feasible: bool,
    pub local_made: bool,
    pub assigned: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobReport {
    pub job_id: u32,
    pub segments: u64,
    /// Output files in segment order (local output) or bucket order.
    pub output: Vec<OutputFile>,
    pub failures: Vec<SegmentFailure>,
    pub attempts: u64,
    pub retries: u64,
    pub speculated: u64,
    pub excluded: Vec<SlaveId>,
    pub started_micros: u64,
    pub finished_micros: u64,
    pub instants: Vec<AssignmentInstant>,
}

impl JobReport {
    pub fn elapsed(&self) -> Duration {
        Duration::from_micros(self.finished_micros.saturating_sub(self.started_micros))
    }

    /// Output paths, or the failures when any segment failed.
    pub fn collect(&self) -> Result<Vec<String>, Vec<SegmentFailure>> {
        if self.failures.is_empty() {
            Ok(self.output.iter().map(|o| o.path.clone()).collect())
        } else {
            Err(self.failures.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Status {
    Unassigned,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
struct AttemptInfo {
    spe: SpeId,
    node: SlaveId,
    started: Time,
    progress: f64,
}

#[derive(Debug, Clone)]
struct SegState {
    seg: Segment,
    status: Status,
    attempts: BTreeMap<u32, AttemptInfo>,
    next_attempt: u32,
    winner: Option<(u32, SlaveId)>,
    needed: BTreeSet<u32>,
    committed: Option<OutputFile>,
}

#[derive(Debug, Clone)]
struct NodeInfo {
    status: SlaveStatus,
    excluded: bool,
    last_heard: Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Running,
    Finalizing,
    Finished,
}

pub(crate) struct JobRun {
    pub spec: JobSpec,
    pub job: u32,
    session: u32,
    master: SocketAddr,
    psk: Vec<u8>,
    channels: Range<u32>,
    next_chan: u32,
    nodes: BTreeMap<SlaveId, NodeInfo>,
    by_addr: BTreeMap<SocketAddr, SlaveId>,
    spes: Vec<Spe>,
    busy: BTreeMap<SpeId, (u64, u32)>,
    metas: BTreeMap<String, FileMeta>,
    segs: Vec<SegState>,
    handlers: BTreeMap<u32, SlaveId>,
    stored: BTreeSet<(u32, u64)>,
    flushing: BTreeSet<(u32, u64)>,
    flush_retry: BTreeMap<(u32, u64), (Time, u32)>,
    finalized: BTreeMap<SlaveId, Vec<(u32, OutputFile)>>,
    finalize_sent: BTreeSet<SlaveId>,
    phase: Phase,
    durations: Vec<Duration>,
    report: JobReport,
    outcome: Option<Result<JobReport, JobError>>,
}

pub(crate) struct JobIo<'a, 'b> {
    pub ctx: &'a mut Ctx<'b>,
    pub outbox: &'a mut Outbox,
}

impl JobIo<'_, '_> {
    fn send(&mut self, to: SocketAddr, msg: Msg) {
        self.outbox.send(self.ctx, to, &msg, 0, None);
    }
}

const FLUSH_RETRY: Duration = Duration::from_secs(1);
const FLUSH_FAILURES: u32 = 5;

impl JobRun {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: JobSpec,
        job: u32,
        session: u32,
        master: SocketAddr,
        psk: Vec<u8>,
        channels: Range<u32>,
        slaves: Vec<SlaveStatus>,
        metas: Vec<FileMeta>,
        segments: Vec<Segment>,
        now: Time,
    ) -> Self {
        let mut nodes = BTreeMap::new();
        let mut by_addr = BTreeMap::new();
        let mut spes = Vec::new();
        let mut sorted = slaves;
        sorted.sort_by_key(|s| s.id);
        for s in sorted {
            by_addr.insert(s.address, s.id);
            for _ in 0..s.spe_count.max(1) {
                spes.push(Spe {
                    id: spes.len() as SpeId,
                    node: s.id,
                });
            }
            nodes.insert(
                s.id,
                NodeInfo {
                    status: s,
                    excluded: false,
                    last_heard: now,
                },
            );
        }
        let segs = segments
            .into_iter()
            .map(|seg| SegState {
                seg,
                status: Status::Unassigned,
                attempts: BTreeMap::new(),
                next_attempt: 1,
                winner: None,
                needed: BTreeSet::new(),
                committed: None,
            })
            .collect::<Vec<_>>();
        let report = JobReport {
            job_id: job,
            segments: segs.len() as u64,
            output: Vec::new(),
            failures: Vec::new(),
            attempts: 0,
            retries: 0,
            speculated: 0,
            excluded: Vec::new(),
            started_micros: now.as_micros(),
            finished_micros: 0,
            instants: Vec::new(),
        };
        Self {
            next_chan: channels.start,
            channels,
            spec,
            job,
            session,
            master,
            psk,
            nodes,
            by_addr,
            spes,
            busy: BTreeMap::new(),
            metas: metas.into_iter().map(|m| (m.path.clone(), m)).collect(),
            segs,
            handlers: BTreeMap::new(),
            stored: BTreeSet::new(),
            flushing: BTreeSet::new(),
            flush_retry: BTreeMap::new(),
            finalized: BTreeMap::new(),
            finalize_sent: BTreeSet::new(),
            phase: Phase::Running,
            durations: Vec::new(),
            report,
            outcome: None,
        }
    }

    pub fn take_outcome(&mut self) -> Option<Result<JobReport, JobError>> {
        self.outcome.take()
    }

    fn bucket_count(&self) -> Option<u32> {
        match self.spec.output {
            OutputMode::Local => None,
            OutputMode::Buckets(b) => Some(b),
        }
    }

    fn live_nodes(&self) -> Vec<SlaveId> {
        self.nodes.iter().filter(|(_, n)| !n.excluded).map(|(id, _)| *id).collect()
    }

    fn alive(&self, id: SlaveId) -> bool {
        self.nodes.get(&id).is_some_and(|n| !n.excluded)
    }

    fn addr(&self, id: SlaveId) -> SocketAddr {
        self.nodes[&id].status.address
    }

    fn chan(&mut self) -> Result<u32, JobError> {
        if self.next_chan >= self.channels.end {
            return Err(JobError::Channels);
        }
        self.next_chan += 1;
        Ok(self.next_chan - 1)
    }

    fn fail_job(&mut self, io: &mut JobIo<'_, '_>, e: JobError) {
        if self.phase == Phase::Finished {
            return;
        }
        self.end(io);
        self.outcome = Some(Err(e));
    }

    fn end(&mut self, io: &mut JobIo<'_, '_>) {
        self.phase = Phase::Finished;
        self.report.finished_micros = io.ctx.now().as_micros();
        for id in self.live_nodes() {
            let a = self.addr(id);
            io.send(a, Msg::Cleanup { job: self.job });
        }
        let psk = self.psk.clone();
        let m = Msg::JobEnd {
            session: self.session,
            job: self.job,
        };
        io.outbox.send(io.ctx, self.master, &m, 0, Some(&psk));
    }

    /// Places buckets and starts scheduling.
    pub fn start(&mut self, io: &mut JobIo<'_, '_>) {
        if self.spes.is_empty() {
            return self.fail_job(io, JobError::NoSpe);
        }
        if let Some(b) = self.bucket_count() {
            let live = self.live_nodes();
            for bucket in 0..b {
                self.handlers.insert(bucket, live[bucket as usize % live.len()]);
            }
            self.host_buckets(io, &(0..b).collect::<Vec<_>>());
        }
        self.dispatch(io);
    }

    fn host_buckets(&mut self, io: &mut JobIo<'_, '_>, buckets: &[u32]) {
        let mut per: BTreeMap<SlaveId, Vec<u32>> = BTreeMap::new();
        for b in buckets {
            per.entry(self.handlers[b]).or_default().push(*b);
        }
        for (node, list) in per {
            let a = self.addr(node);
            io.send(
                a,
                Msg::HostBuckets {
                    job: self.job,
                    buckets: list,
                    segments: self.segs.len() as u64,
                },
            );
        }
    }

    fn idle_spes(&self) -> Vec<Spe> {
        self.spes
            .iter()
            .filter(|s| self.alive(s.node) && !self.busy.contains_key(&s.id))
            .copied()
            .collect()
    }

    fn replicas(&self, seg: &Segment) -> BTreeSet<SlaveId> {
        self.metas
            .get(&seg.file)
            .map(|m| m.replicas.iter().filter(|r| self.alive(**r)).copied().collect())
            .unwrap_or_default()
    }

    fn sources(&self, seg: &Segment, node: SlaveId) -> Vec<Source> {
        let here = self.nodes[&node].status.location.as_ref();
        let mut reps: Vec<SlaveId> = self.replicas(seg).into_iter().collect();
        reps.sort_by_key(|r| (location_distance(here, self.nodes[r].status.location.as_ref()), *r));
        reps.iter()
            .map(|r| Source {
                msg: self.nodes[r].status.address,
                data: self.nodes[r].status.data_address,
            })
            .collect()
    }

    fn dispatch(&mut self, io: &mut JobIo<'_, '_>) {
        if self.phase == Phase::Finalizing {
            return self.check_complete(io);
        }
        if self.phase != Phase::Running {
            return;
        }
        for i in 0..self.segs.len() {
            if self.segs[i].status == Status::Unassigned && self.replicas(&self.segs[i].seg).is_empty() {
                let file = self.segs[i].seg.file.clone();
                self.fail_segment(io, i, SegmentFailure::Fetch(format!("{file}: no live replica")));
            }
        }
        let idle = self.idle_spes();
        let pending: Vec<PendingSegment> = self
            .segs
            .iter()
            .filter(|s| s.status == Status::Unassigned)
            .map(|s| PendingSegment {
                segment_id: s.seg.segment_id,
                file: s.seg.file.clone(),
                replicas: self.replicas(&s.seg),
            })
            .collect();
        if !pending.is_empty() && !idle.is_empty() {
            let mut active: BTreeMap<String, usize> = BTreeMap::new();
            for s in self.segs.iter().filter(|s| s.status == Status::Running) {
                *active.entry(s.seg.file.clone()).or_default() += 1;
            }
            let picks = schedule(&pending, &idle, &mut active);
            let node_of = |spe: SpeId| self.spes[spe as usize].node;
            let local_feasible = pending
                .iter()
                .any(|p| idle.iter().any(|s| p.replicas.contains(&s.node)));
            let local_made = picks.iter().any(|(seg, spe)| {
                pending
                    .iter()
                    .any(|p| p.segment_id == *seg && p.replicas.contains(&node_of(*spe)))
            });
            self.report.instants.push(AssignmentInstant {
                at_micros: io.ctx.now().as_micros(),
                local_feasible,
                local_made,
                assigned: picks.len() as u32,
            });
            for (seg, spe) in picks {
                if let Err(e) = self.launch(io, seg as usize, spe) {
                    return self.fail_job(io, e);
                }
            }
        }
        self.maybe_speculate(io);
        self.check_complete(io);
    }

    fn maybe_speculate(&mut self, io: &mut JobIo<'_, '_>) {
        if self.spec.speculation == Speculation::Off || self.segs.iter().any(|s| s.status == Status::Unassigned) {
            return;
        }
        let idle = self.idle_spes();
        if idle.is_empty() {
            return;
        }
        let min_remaining = match self.spec.speculation {
            Speculation::Estimated => {
                if self.durations.is_empty() {
                    return;
                }
                Some(self.durations.iter().sum::<Duration>() / self.durations.len() as u32)
            }
            _ => None,
        };
        let running: Vec<RunningSegment> = self
            .segs
            .iter()
            .filter(|s| s.status == Status::Running && !s.attempts.is_empty())
            .map(|s| RunningSegment {
                segment_id: s.seg.segment_id,
                replicas: self.replicas(&s.seg),
                started: s.attempts.values().map(|a| a.started).min().expect("nonempty"),
                nodes: s.attempts.values().map(|a| a.node).collect(),
                progress: s.attempts.values().map(|a| a.progress).fold(0.0, f64::max),
            })
            .collect();
        let policy = SpeculationPolicy {
            max_copies: 3,
            min_remaining,
        };
        let picks = speculate(&running, &idle, io.ctx.now(), &policy);
        for (seg, spe) in picks {
            self.report.speculated += 1;
            if let Err(e) = self.launch(io, seg as usize, spe) {
                return self.fail_job(io, e);
            }
        }
    }

    fn launch(&mut self, io: &mut JobIo<'_, '_>, idx: usize, spe: SpeId) -> Result<(), JobError> {
        let node = self.spes[spe as usize].node;
        let fetch_channel = self.chan()?;
        let sources = self.sources(&self.segs[idx].seg, node);
        let s = &mut self.segs[idx];
        let attempt = s.next_attempt;
        s.next_attempt += 1;
        s.status = Status::Running;
        s.attempts.insert(
            attempt,
            AttemptInfo {
                spe,
                node,
                started: io.ctx.now(),
                progress: 0.0,
            },
        );
        let req = RunSegment {
            job: self.job,
            segment: s.seg.clone(),
            attempt,
            udf: self.spec.udf.clone(),
            output: self.spec.output,
            output_prefix: self.spec.output_prefix.clone(),
            sources,
            fetch_channel,
        };
        self.busy.insert(spe, (s.seg.segment_id, attempt));
        self.report.attempts += 1;
        let a = self.addr(node);
        io.send(a, Msg::RunSegment(req));
        Ok(())
    }

    fn release(&mut self, idx: usize, attempt: u32) -> Option<AttemptInfo> {
        let info = self.segs[idx].attempts.remove(&attempt)?;
        if self.busy.get(&info.spe) == Some(&(self.segs[idx].seg.segment_id, attempt)) {
            self.busy.remove(&info.spe);
        }
        Some(info)
    }

    fn discard_others(&mut self, io: &mut JobIo<'_, '_>, idx: usize, keep: Option<u32>) {
        let others: Vec<u32> = self.segs[idx].attempts.keys().filter(|a| Some(**a) != keep).copied().collect();
        for a in others {
            if let Some(info) = self.release(idx, a) {
                if self.alive(info.node) {
                    let addr = self.addr(info.node);
                    io.send(
                        addr,
                        Msg::Discard {
                            job: self.job,
                            segment_id: self.segs[idx].seg.segment_id,
                            attempt: a,
                        },
                    );
                }
            }
        }
    }

    fn fail_segment(&mut self, io: &mut JobIo<'_, '_>, idx: usize, f: SegmentFailure) {
        self.discard_others(io, idx, None);
        self.segs[idx].status = Status::Failed;
        self.report.failures.push(f);
    }

    /// Puts a segment back in the queue after losing its attempt or result.
    fn requeue(&mut self, io: &mut JobIo<'_, '_>, idx: usize) {
        let s = &mut self.segs[idx];
        if matches!(s.status, Status::Failed) {
            return;
        }
        if let Some((att, node)) = s.winner.take() {
            if self.nodes.get(&node).is_some_and(|n| !n.excluded) {
                let addr = self.addr(node);
                io.send(
                    addr,
                    Msg::Discard {
                        job: self.job,
                        segment_id: self.segs[idx].seg.segment_id,
                        attempt: att,
                    },
                );
            }
        }
        let s = &mut self.segs[idx];
        s.committed = None;
        s.needed.clear();
        if s.next_attempt > self.spec.max_attempts {
            let f = SegmentFailure::Fetch(format!("segment {} exhausted its attempts", s.seg.segment_id));
            self.fail_segment(io, idx, f);
            return;
        }
        s.status = if s.attempts.is_empty() {
            Status::Unassigned
        } else {
            Status::Running
        };
        self.report.retries += 1;
        let sid = s.seg.segment_id;
        self.flushing.retain(|(_, seg)| *seg != sid);
        self.flush_retry.retain(|(_, seg), _| *seg != sid);
    }

    fn node_of(&self, from: SocketAddr) -> Option<SlaveId> {
        self.by_addr.get(&from).copied().filter(|id| self.alive(*id))
    }

    pub fn on_message(&mut self, io: &mut JobIo<'_, '_>, from: SocketAddr, msg: Msg) {
        let Some(node) = self.node_of(from) else { return };
        log::trace!("job {}: {:#06x} from {node}", self.job, msg.code());
        let now = io.ctx.now();
        self.nodes.get_mut(&node).expect("alive").last_heard = now;
        if self.phase == Phase::Finished {
            return;
        }
        match msg {
            Msg::Keepalive { .. } => {}
            Msg::Progress {
                segment_id,
                attempt,
                records_done,
                records_total,
                ..
            } => {
                if let Some(a) = self.segs.get_mut(segment_id as usize).and_then(|s| s.attempts.get_mut(&attempt)) {
                    a.progress = records_done as f64 / records_total.max(1) as f64;
                }
            }
            Msg::SegmentDone {
                segment_id,
                attempt,
                result,
                ..
            } => self.on_done(io, node, segment_id as usize, attempt, result),
            Msg::Committed {
                segment_id,
                attempt,
                result,
                ..
            } => {
                let idx = segment_id as usize;
                if self.segs.get(idx).and_then(|s| s.winner) != Some((attempt, node)) {
                    return;
                }
                match result {
                    Ok(of) => self.segs[idx].committed = Some(of),
                    Err(e) => {
                        log::warn!("job {}: commit of segment {segment_id} failed: {e}", self.job);
                        self.requeue(io, idx);
                    }
                }
            }
            Msg::FlushResult {
                segment_id,
                attempt,
                bucket,
                handler,
                stored,
                ..
            } => {
                let idx = segment_id as usize;
                if self.segs.get(idx).and_then(|s| s.winner) != Some((attempt, node)) {
                    return;
                }
                let current = self.handlers.get(&bucket).map(|h| self.addr(*h));
                if current != Some(handler) {
                    return;
                }
                if stored {
                    self.mark_stored(bucket, segment_id);
                } else if self.flushing.remove(&(bucket, segment_id)) {
                    let e = self.flush_retry.entry((bucket, segment_id)).or_insert((now, 0));
                    e.0 = now + FLUSH_RETRY;
                    e.1 += 1;
                    if e.1 > FLUSH_FAILURES {
                        self.requeue(io, idx);
                    }
                }
            }
            Msg::BucketStored { bucket, segment_id, .. } => {
                if self.handlers.get(&bucket) == Some(&node) {
                    self.mark_stored(bucket, segment_id);
                }
            }
            Msg::BucketFailed { bucket, reason, .. } => {
                if self.handlers.get(&bucket) == Some(&node) {
                    self.fail_job(io, JobError::Bucket { bucket, reason });
                }
            }
            Msg::Finalized { result, .. } => {
                if self.phase != Phase::Finalizing || !self.finalize_sent.contains(&node) {
                    return;
                }
                match result {
                    Ok(files) => {
                        self.finalized.insert(node, files);
                    }
                    Err(e) => return self.fail_job(io, JobError::Finalize(e)),
                }
            }
            _ => return,
        }
        self.dispatch(io);
    }

    fn mark_stored(&mut self, bucket: u32, seg: u64) {
        self.stored.insert((bucket, seg));
        self.flushing.remove(&(bucket, seg));
        self.flush_retry.remove(&(bucket, seg));
    }

    fn on_done(
        &mut self,
        io: &mut JobIo<'_, '_>,
        node: SlaveId,
        idx: usize,
        attempt: u32,
        result: Result<SegmentSummary, SegmentFailure>,
    ) {
        if idx >= self.segs.len() {
            return;
        }
        let Some(info) = self.release(idx, attempt) else {
            return;
        };
        let now = io.ctx.now();
        let sid = self.segs[idx].seg.segment_id;
        if matches!(self.segs[idx].status, Status::Done | Status::Failed) {
            io.send(
                self.addr(node),
                Msg::Discard {
                    job: self.job,
                    segment_id: sid,
                    attempt,
                },
            );
            return;
        }
        match result {
            Ok(summary) => {
                self.durations.push(now.saturating_since(info.started));
                self.discard_others(io, idx, Some(attempt));
                let s = &mut self.segs[idx];
                s.status = Status::Done;
                s.winner = Some((attempt, node));
                match self.spec.output {
                    OutputMode::Local => {
                        let path = format!("{}/{}.out.{sid:06}", self.spec.output_prefix.trim_end_matches('/'), self.job);
                        io.send(
                            self.addr(node),
                            Msg::Commit {
                                job: self.job,
                                segment_id: sid,
                                attempt,
                                path,
                            },
                        );
                    }
                    OutputMode::Buckets(_) => {
                        s.needed = summary.buckets.keys().copied().collect();
                        self.flush_missing(io, idx);
                    }
                }
            }
            Err(f @ (SegmentFailure::Udf(_) | SegmentFailure::Resolve(_))) => self.fail_segment(io, idx, f),
            Err(f) => {
                log::info!("job {}: segment {sid} attempt {attempt} on {node}: {f:?}", self.job);
                if self.segs[idx].attempts.is_empty() {
                    self.requeue(io, idx);
                }
            }
        }
    }

    /// Sends the winner of segment `idx` a flush for every unstored bucket.
    fn flush_missing(&mut self, io: &mut JobIo<'_, '_>, idx: usize) {
        let Some((attempt, node)) = self.segs[idx].winner else { return };
        if !self.alive(node) {
            return;
        }
        let sid = self.segs[idx].seg.segment_id;
        let now = io.ctx.now();
        let want: Vec<u32> = self.segs[idx]
            .needed
            .iter()
            .filter(|b| {
                !self.stored.contains(&(**b, sid))
                    && !self.flushing.contains(&(**b, sid))
                    && self.flush_retry.get(&(**b, sid)).is_none_or(|(due, _)| *due <= now)
            })
            .copied()
            .collect();
        if want.is_empty() {
            return;
        }
        let mut targets = Vec::new();
        for b in want {
            let channel = match self.chan() {
                Ok(c) => c,
                Err(e) => return self.fail_job(io, e),
            };
            let h = &self.nodes[&self.handlers[&b]].status;
            targets.push(BucketTarget {
                bucket: b,
                handler: h.address,
                handler_data: h.data_address,
                channel,
            });
            self.flushing.insert((b, sid));
        }
        io.send(
            self.addr(node),
            Msg::Flush {
                job: self.job,
                segment_id: sid,
                attempt,
                targets,
            },
        );
    }

    /// Periodic check for silent nodes and pending flush retries.
    pub fn tick(&mut self, io: &mut JobIo<'_, '_>) {
        if self.phase == Phase::Finished {
            return;
        }
        let now = io.ctx.now();
        let silent: Vec<SlaveId> = self
            .nodes
            .iter()
            .filter(|(_, n)| !n.excluded && now.saturating_since(n.last_heard) > self.spec.timeout)
            .map(|(id, _)| *id)
            .collect();
        for id in silent {
            self.exclude(io, id);
            if self.phase == Phase::Finished {
                return;
            }
        }
        if self.phase == Phase::Running {
            for idx in 0..self.segs.len() {
                if self.segs[idx].status == Status::Done && !self.segs[idx].needed.is_empty() {
                    self.flush_missing(io, idx);
                }
            }
        }
        self.dispatch(io);
    }

    fn exclude(&mut self, io: &mut JobIo<'_, '_>, dead: SlaveId) {
        log::info!("job {}: dropping silent {dead}", self.job);
        self.nodes.get_mut(&dead).expect("known").excluded = true;
        self.report.excluded.push(dead);
        let live = self.live_nodes();
        if live.is_empty() {
            return self.fail_job(io, JobError::NoSpe);
        }
        for idx in 0..self.segs.len() {
            let lost: Vec<u32> = self.segs[idx]
                .attempts
                .iter()
                .filter(|(_, a)| a.node == dead)
                .map(|(k, _)| *k)
                .collect();
            for a in lost {
                self.release(idx, a);
            }
            if self.segs[idx].status == Status::Running && self.segs[idx].attempts.is_empty() {
                self.requeue(io, idx);
            }
        }
        let moved: Vec<u32> = self.handlers.iter().filter(|(_, h)| **h == dead).map(|(b, _)| *b).collect();
        if !moved.is_empty() {
            for b in &moved {
                self.handlers.insert(*b, live[*b as usize % live.len()]);
                self.stored.retain(|(x, _)| x != b);
                self.flushing.retain(|(x, _)| x != b);
                self.flush_retry.retain(|(x, _), _| x != b);
            }
            let targets: BTreeSet<SlaveId> = moved.iter().map(|b| self.handlers[b]).collect();
            for t in targets {
                self.finalize_sent.remove(&t);
                self.finalized.remove(&t);
            }
            self.host_buckets(io, &moved);
            if self.phase == Phase::Finalizing {
                self.phase = Phase::Running;
            }
        }
        self.finalize_sent.remove(&dead);
        self.finalized.remove(&dead);
        for idx in 0..self.segs.len() {
            let s = &self.segs[idx];
            if s.status != Status::Done {
                continue;
            }
            let Some((_, w)) = s.winner else { continue };
            if w != dead {
                continue;
            }
            let sid = s.seg.segment_id;
            let fully_stored = self.bucket_count().is_some() && s.needed.iter().all(|b| self.stored.contains(&(*b, sid)));
            if !fully_stored {
                self.requeue(io, idx);
            }
        }
        self.dispatch(io);
    }

    fn check_complete(&mut self, io: &mut JobIo<'_, '_>) {
        if self.phase == Phase::Finished {
            return;
        }
        let settled = self.segs.iter().all(|s| matches!(s.status, Status::Done | Status::Failed));
        if !settled {
            return;
        }
        match self.spec.output {
            OutputMode::Local => {
                if self
                    .segs
                    .iter()
                    .all(|s| s.status == Status::Failed || s.committed.is_some())
                {
                    self.report.output = self.segs.iter().filter_map(|s| s.committed.clone()).collect();
                    self.finish(io);
                }
            }
            OutputMode::Buckets(b) => {
                let all_stored = self.segs.iter().filter(|s| s.status == Status::Done).all(|s| {
                    s.needed
                        .iter()
                        .all(|x| self.stored.contains(&(*x, s.seg.segment_id)))
                });
                if !all_stored {
                    return;
                }
                self.phase = Phase::Finalizing;
                let hosts: BTreeSet<SlaveId> = self.handlers.values().copied().collect();
                for h in &hosts {
                    if self.finalize_sent.insert(*h) {
                        let addr = self.addr(*h);
                        io.send(
                            addr,
                            Msg::Finalize {
                                job: self.job,
                                output_prefix: self.spec.output_prefix.clone(),
                            },
                        );
                    }
                }
                if !hosts.iter().all(|h| self.finalized.contains_key(h)) {
                    return;
                }
                let mut out = Vec::new();
                for bucket in 0..b {
                    let h = self.handlers[&bucket];
                    match self.finalized[&h].iter().find(|(x, _)| *x == bucket) {
                        Some((_, f)) => out.push(f.clone()),
                        None => return self.fail_job(io, JobError::Finalize(format!("bucket {bucket} missing"))),
                    }
                }
                self.report.output = out;
                self.finish(io);
            }
        }
    }

    fn finish(&mut self, io: &mut JobIo<'_, '_>) {
        self.end(io);
        self.outcome = Some(Ok(self.report.clone()));
    }
}

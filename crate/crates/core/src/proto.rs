//! Control-plane message vocabulary.
//!
//! Every message is one [`Msg`] variant encoded with bincode and sent with the
//! variant's 16-bit code as `msg_type`. Codes are grouped by link:
//!
//! | range    | link                    | sealed |
//! |----------|-------------------------|--------|
//! | `0x01xx` | master ↔ security       | yes    |
//! | `0x02xx` | client ↔ master         | yes    |
//! | `0x03xx` | master ↔ slave          | no     |
//! | `0x04xx` | Sphere client ↔ SPE, SPE ↔ SPE | no |
//!
//! Sealed messages carry a trailing HMAC-SHA256 tag over the code, session id
//! and body, keyed by the pre-shared key of the link.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::ops::Range;
use std::time::Duration;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::model::{FileMeta, Location, Segment, SegmentExtent, SlaveId, SlaveStatus};
use crate::runtime::{Ctx, Delivery};
use crate::transport::{ChannelId, Message, MsgToken};

pub const TAG_LEN: usize = 32;

pub mod code {
    pub const VERIFY_USER: u16 = 0x0101;
    pub const VERIFY_SLAVE: u16 = 0x0102;
    pub const CHECK_ACCESS: u16 = 0x0103;
    pub const SECURITY_REPLY: u16 = 0x01FF;

    pub const LOGIN: u16 = 0x0201;
    pub const LS: u16 = 0x0202;
    pub const STAT: u16 = 0x0203;
    pub const OPEN_READ: u16 = 0x0204;
    pub const OPEN_WRITE: u16 = 0x0205;
    pub const CLOSE: u16 = 0x0206;
    pub const RM: u16 = 0x0207;
    pub const JOB_REQUEST: u16 = 0x0208;
    pub const JOB_END: u16 = 0x0209;
    pub const LOGOUT: u16 = 0x020A;
    pub const MASTER_REPLY: u16 = 0x02FF;

    pub const REGISTER: u16 = 0x0301;
    pub const REGISTER_REPLY: u16 = 0x0302;
    pub const HEARTBEAT: u16 = 0x0303;
    pub const HEARTBEAT_REPLY: u16 = 0x0304;
    pub const SERVE_READ: u16 = 0x0305;
    pub const SERVE_WRITE: u16 = 0x0306;
    pub const TRANSFER_DONE: u16 = 0x0307;
    pub const COPY_OUT: u16 = 0x0308;
    pub const COPY_IN: u16 = 0x0309;
    pub const REMOVE: u16 = 0x030A;
    pub const JOB_GRANT: u16 = 0x030B;
    pub const JOB_REVOKE: u16 = 0x030C;
    pub const FILE_ADDED: u16 = 0x030D;
    pub const FILE_ACK: u16 = 0x030E;

    pub const RUN_SEGMENT: u16 = 0x0401;
    pub const PROGRESS: u16 = 0x0402;
    pub const SEGMENT_DONE: u16 = 0x0403;
    pub const COMMIT: u16 = 0x0404;
    pub const DISCARD: u16 = 0x0405;
    pub const COMMITTED: u16 = 0x0406;
    pub const FLUSH: u16 = 0x0407;
    pub const FLUSH_RESULT: u16 = 0x0408;
    pub const BUCKET_OFFER: u16 = 0x0409;
    pub const BUCKET_VERDICT: u16 = 0x040A;
    pub const BUCKET_STORED: u16 = 0x040B;
    pub const HOST_BUCKETS: u16 = 0x040C;
    pub const FINALIZE: u16 = 0x040D;
    pub const FINALIZED: u16 = 0x040E;
    pub const FETCH: u16 = 0x040F;
    pub const FETCH_FAILED: u16 = 0x0410;
    pub const KEEPALIVE: u16 = 0x0411;
    pub const CLEANUP: u16 = 0x0412;
    pub const BUCKET_FAILED: u16 = 0x0413;
}

/// File access rights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mode(u8);

impl Mode {
    pub const READ: Mode = Mode(1);
    pub const WRITE: Mode = Mode(2);
    pub const EXEC: Mode = Mode(4);
    pub const NONE: Mode = Mode(0);

    pub fn contains(self, other: Mode) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn union(self, other: Mode) -> Mode {
        Mode(self.0 | other.0)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn parse(s: &str) -> Option<Mode> {
        let mut m = Mode::NONE;
        for c in s.chars() {
            m = m.union(match c.to_ascii_uppercase() {
                'R' => Mode::READ,
                'W' => Mode::WRITE,
                'X' => Mode::EXEC,
                _ => return None,
            });
        }
        Some(m)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (flag, c) in [(Mode::READ, 'R'), (Mode::WRITE, 'W'), (Mode::EXEC, 'X')] {
            if self.contains(flag) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

/// One privilege rule: a directory prefix and the modes it grants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Privilege {
    pub prefix: String,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: u32,
    pub user: String,
    pub client: SocketAddr,
    pub privileges: Vec<Privilege>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
pub enum Rejection {
    #[error("login rejected")]
    BadCredentials,
    #[error("client address not allowed")]
    IpNotAllowed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
pub enum AccessDenied {
    #[error("session invalid or expired")]
    SessionInvalid,
    #[error("no privilege grants {mode} on {path}")]
    NoPrivilege { path: String, mode: Mode },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecurityReply {
    User(Result<SessionInfo, Rejection>),
    Slave(bool),
    /// On allow, the index of the privilege rule that granted access.
    Access(Result<usize, AccessDenied>),
}

/// Errors the master reports to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
pub enum FsError {
    #[error("login failed: {0}")]
    Login(Rejection),
    #[error("access denied: {0}")]
    NoAccess(AccessDenied),
    #[error("{0}: not found")]
    NotFound(String),
    #[error("{0}: no live replica")]
    NoLiveReplica(String),
    #[error("no slave has space for {0} bytes")]
    NoSpace(u64),
    #[error("{0}: already being written")]
    Busy(String),
    #[error("{0}: already exists")]
    Exists(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("transfer failed: {0}")]
    Transfer(String),
    #[error("security server unavailable")]
    SecurityUnavailable,
}

/// Where and how to move a file's bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenGrant {
    pub channel: ChannelId,
    pub slave: SlaveId,
    pub slave_data: SocketAddr,
    pub meta: Option<FileMeta>,
}

/// What the master hands a client starting a Sphere job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobGrant {
    pub job_id: u32,
    pub channels: Range<u32>,
    pub slaves: Vec<SlaveStatus>,
    pub inputs: Vec<FileMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MasterReply {
    Login(Result<u32, FsError>),
    Ls(Result<Vec<FileMeta>, FsError>),
    Stat(Result<FileMeta, FsError>),
    Open(Result<OpenGrant, FsError>),
    Closed(Result<Option<FileMeta>, FsError>),
    Removed(Result<(), FsError>),
    Job(Result<JobGrant, FsError>),
}

/// One file as found on a slave's disk.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScanEntry {
    pub path: String,
    pub size: u64,
    pub record_count: Option<u64>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferKind {
    Read,
    Write,
    CopyOut,
    CopyIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutputMode {
    Local,
    Buckets(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UdfFailure {
    pub segment_id: u64,
    /// Ordinal of the failing record within the segment.
    pub record: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentFailure {
    Udf(UdfFailure),
    Fetch(String),
    Resolve(String),
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub records_in: u64,
    pub records_out: u64,
    pub bytes_out: u64,
    /// Non-empty buckets and their sizes in bytes.
    pub buckets: BTreeMap<u32, u64>,
}

/// Where a bucket lives for the rest of the job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketTarget {
    pub bucket: u32,
    pub handler: SocketAddr,
    pub handler_data: SocketAddr,
    pub channel: ChannelId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Duplicate,
    Busy,
    NotHandler,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub size: u64,
    pub records: u64,
}

/// Messaging and data addresses of a peer slave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub msg: SocketAddr,
    pub data: SocketAddr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSegment {
    pub job: u32,
    pub segment: Segment,
    pub attempt: u32,
    pub udf: String,
    pub output: OutputMode,
    pub output_prefix: String,
    /// Replica holders to read from when the file is not local, nearest first.
    pub sources: Vec<Source>,
    pub fetch_channel: ChannelId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Msg {
    VerifyUser { req: u64, user: String, password: String, client: SocketAddr },
    VerifySlave { req: u64, addr: SocketAddr },
    CheckAccess { req: u64, session: u32, path: String, mode: Mode },
    SecurityReply { req: u64, reply: SecurityReply },

    Login { req: u64, user: String, password: String },
    Logout { session: u32 },
    Ls { req: u64, session: u32, prefix: String },
    Stat { req: u64, session: u32, path: String },
    OpenRead { req: u64, session: u32, path: String, data: SocketAddr, index_only: bool },
    OpenWrite { req: u64, session: u32, path: String, size: u64, data: SocketAddr },
    Close { req: u64, session: u32, channel: ChannelId },
    Rm { req: u64, session: u32, path: String },
    JobRequest { req: u64, session: u32, inputs: Vec<String>, output_prefix: String, channels: u32 },
    JobEnd { session: u32, job: u32 },
    MasterReply { req: u64, reply: MasterReply },

    Register { status: SlaveStatus, scan: Vec<ScanEntry> },
    RegisterReply { result: Result<SlaveId, String> },
    Heartbeat { status: SlaveStatus },
    HeartbeatReply { known: bool },
    ServeRead { channel: ChannelId, path: String, index_only: bool, peer: SocketAddr },
    ServeWrite { channel: ChannelId, path: String, peer: SocketAddr },
    TransferDone { channel: ChannelId, kind: TransferKind, path: String, result: Result<ScanEntry, String> },
    CopyOut { channel: ChannelId, path: String, target: SocketAddr },
    CopyIn { channel: ChannelId, path: String, source: SocketAddr },
    Remove { path: String },
    JobGrant { job: u32, client: SocketAddr, channels: Range<u32>, peers: Vec<SocketAddr> },
    JobRevoke { job: u32 },
    FileAdded { entry: ScanEntry },
    FileAck { path: String },

    RunSegment(RunSegment),
    Progress { job: u32, segment_id: u64, attempt: u32, records_done: u64, records_total: u64 },
    SegmentDone { job: u32, segment_id: u64, attempt: u32, result: Result<SegmentSummary, SegmentFailure> },
    Commit { job: u32, segment_id: u64, attempt: u32, path: String },
    Discard { job: u32, segment_id: u64, attempt: u32 },
    Committed { job: u32, segment_id: u64, attempt: u32, result: Result<OutputFile, String> },
    Flush { job: u32, segment_id: u64, attempt: u32, targets: Vec<BucketTarget> },
    FlushResult { job: u32, segment_id: u64, attempt: u32, bucket: u32, handler: SocketAddr, stored: bool },
    BucketOffer { job: u32, bucket: u32, segment_id: u64, attempt: u32, channel: ChannelId, bytes: u64, data: SocketAddr },
    BucketVerdict { job: u32, bucket: u32, segment_id: u64, attempt: u32, verdict: Verdict },
    BucketStored { job: u32, bucket: u32, segment_id: u64, attempt: u32 },
    HostBuckets { job: u32, buckets: Vec<u32>, segments: u64 },
    Finalize { job: u32, output_prefix: String },
    Finalized { job: u32, result: Result<Vec<(u32, OutputFile)>, String> },
    Fetch { job: u32, channel: ChannelId, path: String, extent: SegmentExtent, data: SocketAddr },
    FetchFailed { job: u32, channel: ChannelId, reason: String },
    Keepalive { job: u32, location: Option<Location> },
    Cleanup { job: u32 },
    BucketFailed { job: u32, bucket: u32, reason: String },
}

impl Msg {
    pub fn code(&self) -> u16 {
        use code::*;
        match self {
            Msg::VerifyUser { .. } => VERIFY_USER,
            Msg::VerifySlave { .. } => VERIFY_SLAVE,
            Msg::CheckAccess { .. } => CHECK_ACCESS,
            Msg::SecurityReply { .. } => SECURITY_REPLY,
            Msg::Login { .. } => LOGIN,
            Msg::Logout { .. } => LOGOUT,
            Msg::Ls { .. } => LS,
            Msg::Stat { .. } => STAT,
            Msg::OpenRead { .. } => OPEN_READ,
            Msg::OpenWrite { .. } => OPEN_WRITE,
            Msg::Close { .. } => CLOSE,
            Msg::Rm { .. } => RM,
            Msg::JobRequest { .. } => JOB_REQUEST,
            Msg::JobEnd { .. } => JOB_END,
            Msg::MasterReply { .. } => MASTER_REPLY,
            Msg::Register { .. } => REGISTER,
            Msg::RegisterReply { .. } => REGISTER_REPLY,
            Msg::Heartbeat { .. } => HEARTBEAT,
            Msg::HeartbeatReply { .. } => HEARTBEAT_REPLY,
            Msg::ServeRead { .. } => SERVE_READ,
            Msg::ServeWrite { .. } => SERVE_WRITE,
            Msg::TransferDone { .. } => TRANSFER_DONE,
            Msg::CopyOut { .. } => COPY_OUT,
            Msg::CopyIn { .. } => COPY_IN,
            Msg::Remove { .. } => REMOVE,
            Msg::JobGrant { .. } => JOB_GRANT,
            Msg::JobRevoke { .. } => JOB_REVOKE,
            Msg::FileAdded { .. } => FILE_ADDED,
            Msg::FileAck { .. } => FILE_ACK,
            Msg::RunSegment(_) => RUN_SEGMENT,
            Msg::Progress { .. } => PROGRESS,
            Msg::SegmentDone { .. } => SEGMENT_DONE,
            Msg::Commit { .. } => COMMIT,
            Msg::Discard { .. } => DISCARD,
            Msg::Committed { .. } => COMMITTED,
            Msg::Flush { .. } => FLUSH,
            Msg::FlushResult { .. } => FLUSH_RESULT,
            Msg::BucketOffer { .. } => BUCKET_OFFER,
            Msg::BucketVerdict { .. } => BUCKET_VERDICT,
            Msg::BucketStored { .. } => BUCKET_STORED,
            Msg::HostBuckets { .. } => HOST_BUCKETS,
            Msg::Finalize { .. } => FINALIZE,
            Msg::Finalized { .. } => FINALIZED,
            Msg::Fetch { .. } => FETCH,
            Msg::FetchFailed { .. } => FETCH_FAILED,
            Msg::Keepalive { .. } => KEEPALIVE,
            Msg::Cleanup { .. } => CLEANUP,
            Msg::BucketFailed { .. } => BUCKET_FAILED,
        }
    }
}

/// True for codes whose link is authenticated with a pre-shared key.
pub fn is_sealed(code: u16) -> bool {
    matches!(code >> 8, 0x01 | 0x02)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtoError {
    #[error("undecodable payload for type {0:#06x}")]
    Decode(u16),
    #[error("message type {got:#06x} does not match payload {expected:#06x}")]
    CodeMismatch { got: u16, expected: u16 },
    #[error("authentication tag missing or wrong")]
    BadTag,
    #[error("no key for sealed message {0:#06x}")]
    NoKey(u16),
}

type HmacSha256 = Hmac<Sha256>;

fn tag(key: &[u8], code: u16, session: u32, body: &[u8]) -> [u8; TAG_LEN] {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(&code.to_be_bytes());
    mac.update(&session.to_be_bytes());
    mac.update(body);
    mac.finalize().into_bytes().into()
}

/// Encodes `msg`, appending a tag when its link is sealed.
pub fn encode(msg: &Msg, session: u32, key: Option<&[u8]>) -> Result<Vec<u8>, ProtoError> {
    let code = msg.code();
    let mut body = bincode::serialize(msg).expect("messages always serialize");
    if is_sealed(code) {
        let key = key.ok_or(ProtoError::NoKey(code))?;
        body.extend_from_slice(&tag(key, code, session, &body));
    }
    Ok(body)
}

/// Decodes a received message, checking its tag and its type code.
pub fn decode(m: &Message, key: Option<&[u8]>) -> Result<Msg, ProtoError> {
    let mut body = &m.payload[..];
    if is_sealed(m.msg_type) {
        let key = key.ok_or(ProtoError::NoKey(m.msg_type))?;
        if body.len() < TAG_LEN {
            return Err(ProtoError::BadTag);
        }
        let (b, t) = body.split_at(body.len() - TAG_LEN);
        let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(&m.msg_type.to_be_bytes());
        mac.update(&m.session_id.to_be_bytes());
        mac.update(b);
        mac.verify_slice(t).map_err(|_| ProtoError::BadTag)?;
        body = b;
    }
    let msg: Msg = bincode::deserialize(body).map_err(|_| ProtoError::Decode(m.msg_type))?;
    if msg.code() != m.msg_type {
        return Err(ProtoError::CodeMismatch {
            got: m.msg_type,
            expected: msg.code(),
        });
    }
    Ok(msg)
}

pub fn parse_psk(hex_key: &str) -> Result<Vec<u8>, String> {
    let key = hex::decode(hex_key.trim()).map_err(|e| format!("bad key: {e}"))?;
    if key.is_empty() {
        return Err("empty key".into());
    }
    Ok(key)
}

struct Pending {
    to: SocketAddr,
    code: u16,
    session: u32,
    payload: Vec<u8>,
    resends: u32,
}

/// Sends messages and resends them when the transport reports a flow failure.
///
/// Resends stop after `max_resends` failures or once the peer is forgotten.
/// Receivers must tolerate duplicates: a message whose acknowledgement was
/// lost is delivered again by the resend.
pub struct Outbox {
    pending: BTreeMap<MsgToken, Pending>,
    max_resends: u32,
    given_up: u64,
}

impl Default for Outbox {
    fn default() -> Self {
        Self::new(8)
    }
}

impl Outbox {
    pub fn new(max_resends: u32) -> Self {
        Self {
            pending: BTreeMap::new(),
            max_resends,
            given_up: 0,
        }
    }

    pub fn send(&mut self, ctx: &mut Ctx<'_>, to: SocketAddr, msg: &Msg, session: u32, key: Option<&[u8]>) {
        let payload = match encode(msg, session, key) {
            Ok(p) => p,
            Err(e) => {
                log::error!("cannot encode {:#06x}: {e}", msg.code());
                return;
            }
        };
        self.send_raw(ctx, to, msg.code(), session, payload, 0);
    }

    fn send_raw(&mut self, ctx: &mut Ctx<'_>, to: SocketAddr, code: u16, session: u32, payload: Vec<u8>, resends: u32) {
        match ctx.send(to, code, session, payload.clone()) {
            Ok(token) => {
                self.pending.insert(
                    token,
                    Pending {
                        to,
                        code,
                        session,
                        payload,
                        resends,
                    },
                );
            }
            Err(e) => log::error!("send {code:#06x} to {to} rejected: {e}"),
        }
    }

    /// Feeds a delivery report. Returns the peer when a message was abandoned.
    pub fn on_delivery(&mut self, ctx: &mut Ctx<'_>, d: &Delivery) -> Option<SocketAddr> {
        match d {
            Delivery::Delivered { token, .. } => {
                self.pending.remove(token);
                None
            }
            Delivery::Failed { token, .. } => {
                let p = self.pending.remove(token)?;
                if p.resends >= self.max_resends {
                    self.given_up += 1;
                    return Some(p.to);
                }
                self.send_raw(ctx, p.to, p.code, p.session, p.payload, p.resends + 1);
                None
            }
        }
    }

    /// Drops everything queued for `peer` and stops resending to it.
    pub fn forget(&mut self, ctx: &mut Ctx<'_>, peer: SocketAddr) {
        self.pending.retain(|_, p| p.to != peer);
        ctx.forget_peer(peer);
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    pub fn given_up(&self) -> u64 {
        self.given_up
    }
}

/// Interval between periodic liveness and progress messages.
pub const PROGRESS_INTERVAL: Duration = Duration::from_secs(1);

//! Bulk byte-stream channels on the data port.
//!
//! A channel is identified by a coordinator-issued 32-bit id. Both ends call
//! [`DataEndpoint::open`] with the id and each other's data address; each end
//! then sends HELLO until it hears from the other, so neither side needs a
//! pre-bound listener. Once open, either side may stream bytes: data is cut
//! into chunks of at most [`MAX_CHUNK`] bytes, each with a sequence number, and
//! the receiver answers with selective acks. A FIN carrying the total length
//! closes the sending half.
//!
//! Failures surface as [`ChannelError`] on both sides. A sender that cannot get
//! a chunk acknowledged reports how many bytes the peer confirmed; a receiver
//! that stops hearing from its peer reports how many bytes it delivered. Both
//! counts describe a prefix of the stream.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;

use crate::time::Time;

use super::wire::{chan, Frame, MAX_CHUNK};

pub type ChannelId = u32;

#[derive(Debug, Clone)]
pub struct ChannelConfig {
    pub hello_interval: Duration,
    /// How long a pending rendezvous waits for the peer.
    pub handshake_timeout: Duration,
    /// Chunks in flight per channel.
    pub window: usize,
    pub rto: Duration,
    /// Retransmissions of one chunk before the channel is declared broken.
    pub max_retries: u32,
    /// A receiving half with nothing to send gives up after this much silence.
    pub idle_timeout: Duration,
    /// Closed channels keep answering FINs for this long.
    pub linger: Duration,
    /// Optional cap on payload bytes per second per channel.
    pub rate_cap: Option<u64>,
    pub chunk_size: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            hello_interval: Duration::from_millis(100),
            handshake_timeout: Duration::from_secs(3),
            window: 64,
            rto: Duration::from_millis(500),
            max_retries: 8,
            idle_timeout: Duration::from_secs(6),
            linger: Duration::from_secs(10),
            rate_cap: None,
            chunk_size: MAX_CHUNK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("rendezvous with peer failed")]
    RendezvousFailed,
    #[error("channel broken after {bytes} bytes")]
    Truncated { bytes: u64 },
    #[error("peer aborted the channel after {bytes} bytes")]
    Aborted { bytes: u64 },
    #[error("channel {0} is not open")]
    NotOpen(ChannelId),
    #[error("channel {0} already exists")]
    Duplicate(ChannelId),
    #[error("channel {0} already finished sending")]
    Finished(ChannelId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelState {
    PendingRendezvous,
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelEvent {
    Opened { id: ChannelId },
    Data { id: ChannelId, bytes: Vec<u8> },
    /// The peer finished sending; `total` bytes were delivered.
    Finished { id: ChannelId, total: u64 },
    /// Every byte sent on this side, and the FIN, were acknowledged.
    SendComplete { id: ChannelId, total: u64 },
    Failed { id: ChannelId, error: ChannelError },
}

impl ChannelEvent {
    pub fn id(&self) -> ChannelId {
        match self {
            ChannelEvent::Opened { id }
            | ChannelEvent::Data { id, .. }
            | ChannelEvent::Finished { id, .. }
            | ChannelEvent::SendComplete { id, .. }
            | ChannelEvent::Failed { id, .. } => *id,
        }
    }
}

#[derive(Debug)]
struct SentChunk {
    data: Vec<u8>,
    deadline: Time,
    retries: u32,
}

/// FIFO of byte buffers that can be consumed in arbitrary-sized pieces.
#[derive(Debug, Default)]
struct ByteQueue {
    bufs: VecDeque<Vec<u8>>,
    head_offset: usize,
    len: usize,
}

impl ByteQueue {
    fn push(&mut self, data: &[u8]) {
        if !data.is_empty() {
            self.bufs.push_back(data.to_vec());
            self.len += data.len();
        }
    }

    fn take(&mut self, n: usize) -> Vec<u8> {
        let n = n.min(self.len);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let head = self.bufs.front().expect("len accounts for buffered bytes");
            let avail = &head[self.head_offset..];
            let k = avail.len().min(n - out.len());
            out.extend_from_slice(&avail[..k]);
            self.head_offset += k;
            if self.head_offset == head.len() {
                self.bufs.pop_front();
                self.head_offset = 0;
            }
        }
        self.len -= n;
        out
    }

    fn len(&self) -> usize {
        self.len
    }

    fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Default)]
struct SendHalf {
    /// Bytes not yet cut into chunks.
    pending: ByteQueue,
    next_chunk: u32,
    in_flight: BTreeMap<u32, SentChunk>,
    acked_bytes: u64,
    total_bytes: u64,
    finishing: bool,
    fin_deadline: Option<Time>,
    fin_retries: u32,
    complete: bool,
    /// Rate-cap token bucket.
    tokens: f64,
    tokens_at: Time,
}

impl SendHalf {
    /// Bytes the peer has confirmed as a contiguous prefix.
    fn acked_prefix(&self, chunk_size: usize) -> u64 {
        let first_unacked = self.in_flight.keys().next().copied().unwrap_or(self.next_chunk);
        let cut = self.total_bytes - self.pending.len() as u64;
        (first_unacked as u64 * chunk_size as u64).min(cut)
    }

    fn idle(&self) -> bool {
        self.pending.is_empty() && self.in_flight.is_empty() && (!self.finishing || self.complete)
    }
}

#[derive(Debug, Default)]
struct RecvHalf {
    next_expected: u32,
    out_of_order: BTreeMap<u32, Vec<u8>>,
    delivered: u64,
    fin_total_chunks: Option<u32>,
    fin_total_bytes: u64,
    finished: bool,
}

#[derive(Debug)]
struct Channel {
    peer: SocketAddr,
    state: ChannelState,
    opened_at: Time,
    next_hello: Time,
    last_heard: Time,
    send: SendHalf,
    recv: RecvHalf,
    closed_at: Option<Time>,
    failed: bool,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ChannelStats {
    pub chunks_sent: u64,
    pub chunks_retransmitted: u64,
    pub bytes_delivered: u64,
}

#[derive(Debug)]
pub struct DataEndpoint {
    config: ChannelConfig,
    channels: BTreeMap<ChannelId, Channel>,
    outbox: VecDeque<(SocketAddr, Vec<u8>)>,
    events: VecDeque<ChannelEvent>,
    stats: ChannelStats,
}

impl DataEndpoint {
    pub fn new(config: ChannelConfig) -> Self {
        Self {
            config,
            channels: BTreeMap::new(),
            outbox: VecDeque::new(),
            events: VecDeque::new(),
            stats: ChannelStats::default(),
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn state(&self, id: ChannelId) -> Option<ChannelState> {
        self.channels.get(&id).map(|c| c.state)
    }

    /// Channels not yet closed by the application.
    pub fn live_channels(&self) -> usize {
        self.channels.values().filter(|c| c.closed_at.is_none()).count()
    }

    /// Joins a rendezvous. The peer must call `open` with the same id.
    pub fn open(&mut self, now: Time, id: ChannelId, peer: SocketAddr) -> Result<(), ChannelError> {
        if let Some(existing) = self.channels.get(&id) {
            if existing.closed_at.is_none() {
                return Err(ChannelError::Duplicate(id));
            }
        }
        self.channels.insert(
            id,
            Channel {
                peer,
                state: ChannelState::PendingRendezvous,
                opened_at: now,
                next_hello: now + self.config.hello_interval,
                last_heard: now,
                send: SendHalf {
                    tokens_at: now,
                    ..Default::default()
                },
                recv: RecvHalf::default(),
                closed_at: None,
                failed: false,
            },
        );
        self.emit(peer, chan::HELLO, id, 0, Vec::new());
        Ok(())
    }

    /// Queues bytes for sending. Bytes may be queued before the rendezvous completes.
    pub fn send(&mut self, now: Time, id: ChannelId, data: &[u8]) -> Result<usize, ChannelError> {
        let ch = self.live_mut(id)?;
        if ch.send.finishing {
            return Err(ChannelError::Finished(id));
        }
        ch.send.pending.push(data);
        ch.send.total_bytes += data.len() as u64;
        self.pump(now, id);
        Ok(data.len())
    }

    /// Marks the end of this side's stream.
    pub fn finish(&mut self, now: Time, id: ChannelId) -> Result<(), ChannelError> {
        let ch = self.live_mut(id)?;
        ch.send.finishing = true;
        self.pump(now, id);
        Ok(())
    }

    /// Bytes queued but not yet acknowledged by the peer.
    pub fn unacked(&self, id: ChannelId) -> u64 {
        self.channels
            .get(&id)
            .map(|c| c.send.total_bytes - c.send.acked_bytes)
            .unwrap_or(0)
    }

    /// Releases the channel. It lingers briefly to answer retransmitted FINs.
    pub fn close(&mut self, now: Time, id: ChannelId) {
        if let Some(ch) = self.channels.get_mut(&id) {
            if ch.closed_at.is_none() {
                ch.closed_at = Some(now);
                ch.state = ChannelState::Closed;
            }
        }
    }

    /// Tears the channel down and tells the peer.
    pub fn abort(&mut self, now: Time, id: ChannelId) {
        if let Some(ch) = self.channels.get(&id) {
            if ch.closed_at.is_none() {
                let peer = ch.peer;
                let bytes = ch.send.acked_bytes.max(ch.recv.delivered);
                self.emit(peer, chan::ABORT, id, 0, bytes.to_be_bytes().to_vec());
            }
        }
        self.close(now, id);
    }

    fn live_mut(&mut self, id: ChannelId) -> Result<&mut Channel, ChannelError> {
        match self.channels.get_mut(&id) {
            Some(ch) if ch.closed_at.is_none() && !ch.failed => Ok(ch),
            _ => Err(ChannelError::NotOpen(id)),
        }
    }

    fn emit(&mut self, to: SocketAddr, msg_type: u16, id: ChannelId, seq: u32, payload: Vec<u8>) {
        self.outbox
            .push_back((to, Frame::new(msg_type, id, seq, payload).encode()));
    }

    fn fail(&mut self, id: ChannelId, error: ChannelError) {
        if let Some(ch) = self.channels.get_mut(&id) {
            if ch.failed || ch.closed_at.is_some() {
                return;
            }
            ch.failed = true;
            self.events.push_back(ChannelEvent::Failed { id, error });
        }
    }

    fn mark_open(&mut self, id: ChannelId) {
        if let Some(ch) = self.channels.get_mut(&id) {
            if ch.state == ChannelState::PendingRendezvous {
                ch.state = ChannelState::Open;
                self.events.push_back(ChannelEvent::Opened { id });
            }
        }
    }

    fn pump(&mut self, now: Time, id: ChannelId) {
        let chunk_size = self.config.chunk_size;
        let window = self.config.window;
        let rto = self.config.rto;
        let rate_cap = self.config.rate_cap;
        let Some(ch) = self.channels.get_mut(&id) else {
            return;
        };
        if ch.state != ChannelState::Open || ch.failed {
            return;
        }
        let peer = ch.peer;
        let mut out = Vec::new();
        while ch.send.in_flight.len() < window && !ch.send.pending.is_empty() {
            let n = chunk_size.min(ch.send.pending.len());
            if let Some(cap) = rate_cap {
                let elapsed = (now - ch.send.tokens_at).as_secs_f64();
                ch.send.tokens = (ch.send.tokens + elapsed * cap as f64).min((cap as f64).max(n as f64));
                ch.send.tokens_at = now;
                if ch.send.tokens < n as f64 {
                    break;
                }
                ch.send.tokens -= n as f64;
            }
            let data = ch.send.pending.take(n);
            let seq = ch.send.next_chunk;
            ch.send.next_chunk += 1;
            out.push(Frame::new(chan::DATA, id, seq, data.clone()).encode());
            ch.send.in_flight.insert(
                seq,
                SentChunk {
                    data,
                    deadline: now + rto,
                    retries: 0,
                },
            );
        }
        if ch.send.finishing
            && ch.send.pending.is_empty()
            && ch.send.in_flight.is_empty()
            && !ch.send.complete
            && ch.send.fin_deadline.is_none()
        {
            out.push(
                Frame::new(
                    chan::FIN,
                    id,
                    ch.send.next_chunk,
                    ch.send.total_bytes.to_be_bytes().to_vec(),
                )
                .encode(),
            );
            ch.send.fin_deadline = Some(now + rto);
        }
        self.stats.chunks_sent += out.len() as u64;
        self.outbox.extend(out.into_iter().map(|b| (peer, b)));
    }

    pub fn on_datagram(&mut self, now: Time, from: SocketAddr, bytes: &[u8]) {
        let Ok(frame) = Frame::decode(bytes) else {
            return;
        };
        let id = frame.session_id;
        let Some(ch) = self.channels.get_mut(&id) else {
            // Peer has not joined yet, or the channel is long gone.
            return;
        };
        if ch.peer != from {
            log::debug!("channel {id}: packet from {from}, expected {}", ch.peer);
            return;
        }
        ch.last_heard = now;
        if ch.closed_at.is_some() {
            // Lingering: only keep the peer's FIN handshake happy.
            if frame.msg_type == chan::FIN && ch.recv.finished {
                self.emit(from, chan::FIN_ACK, id, frame.seq, Vec::new());
            } else if frame.msg_type == chan::HELLO {
                self.emit(from, chan::HELLO_ACK, id, 0, Vec::new());
            }
            return;
        }
        if ch.failed {
            return;
        }
        match frame.msg_type {
            chan::HELLO => {
                self.emit(from, chan::HELLO_ACK, id, 0, Vec::new());
                self.mark_open(id);
                self.pump(now, id);
            }
            chan::HELLO_ACK => {
                self.mark_open(id);
                self.pump(now, id);
            }
            chan::DATA => {
                self.mark_open(id);
                self.on_chunk(id, frame.seq, frame.payload);
                self.pump(now, id);
            }
            chan::SACK => {
                let bitmap = frame
                    .payload
                    .get(..8)
                    .map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
                    .unwrap_or(0);
                self.on_sack(now, id, frame.seq, bitmap);
            }
            chan::FIN => {
                self.mark_open(id);
                let total = frame
                    .payload
                    .get(..8)
                    .map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
                    .unwrap_or(0);
                let ch = self.channels.get_mut(&id).expect("checked above");
                ch.recv.fin_total_chunks = Some(frame.seq);
                ch.recv.fin_total_bytes = total;
                self.check_recv_complete(id);
                let ch = self.channels.get(&id).expect("checked above");
                if ch.recv.finished {
                    self.emit(from, chan::FIN_ACK, id, frame.seq, Vec::new());
                } else {
                    self.send_sack(id);
                }
            }
            chan::FIN_ACK => {
                let ch = self.channels.get_mut(&id).expect("checked above");
                if ch.send.finishing && ch.send.in_flight.is_empty() && !ch.send.complete {
                    ch.send.complete = true;
                    ch.send.fin_deadline = None;
                    let total = ch.send.total_bytes;
                    self.events.push_back(ChannelEvent::SendComplete { id, total });
                }
            }
            chan::ABORT => {
                let bytes = self.channels.get(&id).map(|c| c.recv.delivered.max(c.send.acked_bytes)).unwrap_or(0);
                self.fail(id, ChannelError::Aborted { bytes });
            }
            _ => {}
        }
    }

    fn on_chunk(&mut self, id: ChannelId, seq: u32, data: Vec<u8>) {
        let window = self.config.window as u32;
        let ch = self.channels.get_mut(&id).expect("caller checked");
        if seq >= ch.recv.next_expected && seq < ch.recv.next_expected + 4 * window {
            ch.recv.out_of_order.entry(seq).or_insert(data);
        }
        while let Some(d) = ch.recv.out_of_order.remove(&ch.recv.next_expected) {
            ch.recv.next_expected += 1;
            ch.recv.delivered += d.len() as u64;
            self.stats.bytes_delivered += d.len() as u64;
            if !d.is_empty() {
                self.events.push_back(ChannelEvent::Data { id, bytes: d });
            }
        }
        self.send_sack(id);
        self.check_recv_complete(id);
    }

    fn send_sack(&mut self, id: ChannelId) {
        let ch = self.channels.get(&id).expect("caller checked");
        let base = ch.recv.next_expected;
        let mut bitmap = 0u64;
        for seq in ch.recv.out_of_order.range(base + 1..base + 65).map(|(s, _)| *s) {
            bitmap |= 1 << (seq - base - 1);
        }
        let peer = ch.peer;
        self.emit(peer, chan::SACK, id, base, bitmap.to_be_bytes().to_vec());
    }

    fn check_recv_complete(&mut self, id: ChannelId) {
        let ch = self.channels.get_mut(&id).expect("caller checked");
        if ch.recv.finished {
            return;
        }
        if let Some(total_chunks) = ch.recv.fin_total_chunks {
            if ch.recv.next_expected >= total_chunks {
                ch.recv.finished = true;
                let total = ch.recv.delivered;
                debug_assert_eq!(total, ch.recv.fin_total_bytes);
                self.events.push_back(ChannelEvent::Finished { id, total });
            }
        }
    }

    fn on_sack(&mut self, now: Time, id: ChannelId, base: u32, bitmap: u64) {
        let ch = self.channels.get_mut(&id).expect("caller checked");
        let mut acked: BTreeSet<u32> = ch.send.in_flight.range(..base).map(|(s, _)| *s).collect();
        for i in 0..64u32 {
            if bitmap & (1 << i) != 0 {
                acked.insert(base + 1 + i);
            }
        }
        for seq in acked {
            if let Some(c) = ch.send.in_flight.remove(&seq) {
                ch.send.acked_bytes += c.data.len() as u64;
            }
        }
        self.pump(now, id);
    }

    pub fn on_tick(&mut self, now: Time) {
        let cfg = self.config.clone();
        let ids: Vec<ChannelId> = self.channels.keys().copied().collect();
        for id in ids {
            let ch = self.channels.get_mut(&id).expect("listed");
            if let Some(closed) = ch.closed_at {
                if now - closed >= cfg.linger {
                    self.channels.remove(&id);
                }
                continue;
            }
            if ch.failed {
                continue;
            }
            let peer = ch.peer;
            match ch.state {
                ChannelState::PendingRendezvous => {
                    if now - ch.opened_at >= cfg.handshake_timeout {
                        self.fail(id, ChannelError::RendezvousFailed);
                    } else if now >= ch.next_hello {
                        ch.next_hello = now + cfg.hello_interval;
                        self.emit(peer, chan::HELLO, id, 0, Vec::new());
                    }
                }
                ChannelState::Open => {
                    let mut broken = false;
                    let mut resend = Vec::new();
                    for (seq, chunk) in ch.send.in_flight.iter_mut() {
                        if chunk.deadline <= now {
                            chunk.retries += 1;
                            if chunk.retries > cfg.max_retries {
                                broken = true;
                                break;
                            }
                            chunk.deadline = now + cfg.rto * (1 << chunk.retries.min(4));
                            resend.push(Frame::new(chan::DATA, id, *seq, chunk.data.clone()).encode());
                        }
                    }
                    if let Some(deadline) = ch.send.fin_deadline {
                        if !broken && deadline <= now {
                            ch.send.fin_retries += 1;
                            if ch.send.fin_retries > cfg.max_retries {
                                broken = true;
                            } else {
                                ch.send.fin_deadline =
                                    Some(now + cfg.rto * (1 << ch.send.fin_retries.min(4)));
                                resend.push(
                                    Frame::new(
                                        chan::FIN,
                                        id,
                                        ch.send.next_chunk,
                                        ch.send.total_bytes.to_be_bytes().to_vec(),
                                    )
                                    .encode(),
                                );
                            }
                        }
                    }
                    let receiving_idle = ch.send.idle() && !ch.recv.finished;
                    let silent = now - ch.last_heard >= cfg.idle_timeout;
                    self.stats.chunks_retransmitted += resend.len() as u64;
                    self.outbox.extend(resend.into_iter().map(|b| (peer, b)));
                    if broken {
                        let bytes = ch.send.acked_prefix(cfg.chunk_size);
                        self.emit(peer, chan::ABORT, id, 0, bytes.to_be_bytes().to_vec());
                        self.fail(id, ChannelError::Truncated { bytes });
                    } else if receiving_idle && silent {
                        let bytes = ch.recv.delivered;
                        self.fail(id, ChannelError::Truncated { bytes });
                    } else {
                        self.pump(now, id);
                    }
                }
                ChannelState::Closed => {}
            }
        }
    }

    pub fn next_deadline(&self) -> Option<Time> {
        let cfg = &self.config;
        self.channels
            .values()
            .filter_map(|ch| {
                if let Some(closed) = ch.closed_at {
                    return Some(closed + cfg.linger);
                }
                if ch.failed {
                    return None;
                }
                match ch.state {
                    ChannelState::PendingRendezvous => {
                        Some(ch.next_hello.min(ch.opened_at + cfg.handshake_timeout))
                    }
                    ChannelState::Open => {
                        let mut d = ch.send.in_flight.values().map(|c| c.deadline).min();
                        if let Some(f) = ch.send.fin_deadline {
                            d = Some(d.map_or(f, |x| x.min(f)));
                        }
                        if ch.send.idle() && !ch.recv.finished {
                            let idle = ch.last_heard + cfg.idle_timeout;
                            d = Some(d.map_or(idle, |x| x.min(idle)));
                        }
                        if let Some(cap) = cfg.rate_cap {
                            if !ch.send.pending.is_empty() && ch.send.in_flight.len() < cfg.window {
                                let need = cfg.chunk_size.min(ch.send.pending.len()) as f64 - ch.send.tokens;
                                let wait = Duration::from_secs_f64((need / cap as f64).max(0.0));
                                let at = ch.send.tokens_at + wait + Duration::from_micros(1);
                                d = Some(d.map_or(at, |x| x.min(at)));
                            }
                        }
                        d
                    }
                    ChannelState::Closed => None,
                }
            })
            .min()
    }

    pub fn poll_transmit(&mut self) -> Option<(SocketAddr, Vec<u8>)> {
        self.outbox.pop_front()
    }

    pub fn poll_event(&mut self) -> Option<ChannelEvent> {
        self.events.pop_front()
    }
}

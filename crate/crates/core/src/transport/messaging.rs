//! Reliable, ordered, exactly-once messages over a lossy datagram port.
//!
//! Each (sender, receiver) pair is an independent flow. The sender keeps up to
//! `window` unacknowledged messages in flight, each with its own retransmit
//! timer that starts at `initial_rto` and doubles on every expiry. When a
//! message's timer expires `max_expiries` times the whole flow fails: every
//! queued and in-flight message to that peer is reported as failed and the
//! next send opens a fresh flow.
//!
//! A flow starts with a SYN carrying the sender's incarnation. The receiver
//! delivers messages strictly in sequence order, buffers out-of-order arrivals,
//! drops duplicates, and answers every data message with a cumulative ACK.
//! Sequence numbers never repeat within an incarnation, so stale packets from
//! an abandoned flow are recognised as duplicates.

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::time::Duration;

use crate::time::Time;

use super::wire::{control, encode_into, Frame, MAX_PAYLOAD};
use super::TransportError;

#[derive(Debug, Clone)]
pub struct MessagingConfig {
    pub window: usize,
    pub initial_rto: Duration,
    /// Consecutive timer expiries of one message, with no acknowledgement
    /// from the peer in between, after which the message and its flow fail.
    pub max_expiries: u32,
    /// Out-of-order messages buffered per peer before further ones are dropped.
    pub receive_buffer: usize,
}

impl Default for MessagingConfig {
    fn default() -> Self {
        Self {
            window: 64,
            initial_rto: Duration::from_millis(100),
            max_expiries: 5,
            receive_buffer: 256,
        }
    }
}

impl MessagingConfig {
    /// Time from first transmission until a message to a silent peer fails.
    pub fn failure_timeout(&self) -> Duration {
        self.initial_rto * ((1u32 << self.max_expiries) - 1)
    }
}

/// An application message as delivered to the receiver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub msg_type: u16,
    pub session_id: u32,
    pub seq: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MsgToken(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MsgEvent {
    Received { from: SocketAddr, msg: Message },
    Delivered { to: SocketAddr, token: MsgToken },
    Failed { to: SocketAddr, token: MsgToken, msg_type: u16 },
}

#[derive(Debug)]
struct Outgoing {
    msg_type: u16,
    session_id: u32,
    payload: Vec<u8>,
    token: Option<MsgToken>,
}

#[derive(Debug)]
struct InFlight {
    out: Outgoing,
    rto: Duration,
    deadline: Time,
    expiries: u32,
}

#[derive(Debug, Default)]
struct SendFlow {
    started: bool,
    /// Absolute sequence of the next message to assign.
    next: u64,
    in_flight: BTreeMap<u64, InFlight>,
    queued: VecDeque<Outgoing>,
}

#[derive(Debug)]
struct RecvFlow {
    incarnation: u64,
    /// Absolute sequence expected next.
    expected: u64,
    buffered: BTreeMap<u64, Message>,
}

#[derive(Debug, Default)]
struct Peer {
    send: SendFlow,
    recv: Option<RecvFlow>,
    /// Messages that arrived before any SYN, keyed by raw sequence.
    orphans: BTreeMap<u32, Message>,
}

/// Reconstructs an absolute sequence number from its low 32 bits, choosing the
/// value closest to `reference`.
fn unwrap_seq(reference: u64, seq: u32) -> u64 {
    let delta = seq.wrapping_sub(reference as u32) as i32 as i64;
    (reference as i64 + delta).max(0) as u64
}

#[derive(Debug)]
pub struct MessageEndpoint {
    config: MessagingConfig,
    incarnation: u64,
    peers: BTreeMap<SocketAddr, Peer>,
    outbox: VecDeque<(SocketAddr, Vec<u8>)>,
    events: VecDeque<MsgEvent>,
    next_token: u64,
    stats: MessagingStats,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MessagingStats {
    pub sent: u64,
    pub retransmits: u64,
    pub delivered: u64,
    pub duplicates_dropped: u64,
    pub flows_failed: u64,
}

impl MessageEndpoint {
    /// `incarnation` must differ between restarts of the same address; its low
    /// 32 bits also seed the sequence space.
    pub fn new(config: MessagingConfig, incarnation: u64) -> Self {
        Self {
            config,
            incarnation,
            peers: BTreeMap::new(),
            outbox: VecDeque::new(),
            events: VecDeque::new(),
            next_token: 1,
            stats: MessagingStats::default(),
        }
    }

    pub fn config(&self) -> &MessagingConfig {
        &self.config
    }

    pub fn stats(&self) -> MessagingStats {
        self.stats
    }

    pub fn send(
        &mut self,
        now: Time,
        to: SocketAddr,
        msg_type: u16,
        session_id: u32,
        payload: Vec<u8>,
    ) -> Result<MsgToken, TransportError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(payload.len()));
        }
        if !(control::FIRST_APP..super::wire::DATA_TYPE_BASE).contains(&msg_type) {
            return Err(TransportError::ReservedType(msg_type));
        }
        let token = MsgToken(self.next_token);
        self.next_token += 1;
        let incarnation = self.incarnation;
        let peer = self.peers.entry(to).or_default();
        if !peer.send.started {
            peer.send.started = true;
            if peer.send.next == 0 {
                peer.send.next = (incarnation as u32) as u64 + 1;
            }
            peer.send.queued.push_front(Outgoing {
                msg_type: control::SYN,
                session_id: 0,
                payload: incarnation.to_be_bytes().to_vec(),
                token: None,
            });
        }
        peer.send.queued.push_back(Outgoing {
            msg_type,
            session_id,
            payload,
            token: Some(token),
        });
        self.pump(now, to);
        Ok(token)
    }

    fn pump(&mut self, now: Time, to: SocketAddr) {
        let window = self.config.window;
        let rto = self.config.initial_rto;
        let Some(peer) = self.peers.get_mut(&to) else {
            return;
        };
        while peer.send.in_flight.len() < window {
            let Some(out) = peer.send.queued.pop_front() else {
                break;
            };
            let seq = peer.send.next;
            peer.send.next += 1;
            let mut bytes = Vec::new();
            encode_into(&mut bytes, out.msg_type, out.session_id, seq as u32, &out.payload);
            self.outbox.push_back((to, bytes));
            self.stats.sent += 1;
            peer.send.in_flight.insert(
                seq,
                InFlight {
                    out,
                    rto,
                    deadline: now + rto,
                    expiries: 0,
                },
            );
        }
    }

    pub fn on_datagram(&mut self, now: Time, from: SocketAddr, bytes: &[u8]) {
        let Ok(frame) = Frame::decode(bytes) else {
            log::debug!("dropping malformed datagram from {from}");
            return;
        };
        match frame.msg_type {
            control::ACK => self.on_ack(now, from, frame.seq),
            t if t >= super::wire::DATA_TYPE_BASE => {
                log::debug!("data-channel packet on messaging port from {from}")
            }
            _ => self.on_data(from, frame),
        }
    }

    fn on_ack(&mut self, now: Time, from: SocketAddr, seq: u32) {
        let Some(peer) = self.peers.get_mut(&from) else {
            return;
        };
        let acked = unwrap_seq(peer.send.next, seq);
        for inflight in peer.send.in_flight.values_mut() {
            inflight.expiries = 0;
        }
        let done: Vec<u64> = peer
            .send
            .in_flight
            .range(..=acked)
            .map(|(s, _)| *s)
            .collect();
        for s in done {
            let inflight = peer.send.in_flight.remove(&s).expect("present");
            if let Some(token) = inflight.out.token {
                self.events.push_back(MsgEvent::Delivered { to: from, token });
            }
        }
        self.pump(now, from);
    }

    fn on_data(&mut self, from: SocketAddr, frame: Frame) {
        let receive_buffer = self.config.receive_buffer;
        let peer = self.peers.entry(from).or_default();
        let msg = Message {
            msg_type: frame.msg_type,
            session_id: frame.session_id,
            seq: frame.seq,
            payload: frame.payload,
        };

        if msg.msg_type == control::SYN {
            let Ok(raw) = <[u8; 8]>::try_from(msg.payload.as_slice()) else {
                return;
            };
            let incarnation = u64::from_be_bytes(raw);
            match &mut peer.recv {
                Some(flow) if flow.incarnation == incarnation => {
                    let abs = unwrap_seq(flow.expected, msg.seq);
                    if abs >= flow.expected {
                        // New flow from the same sender: skip whatever the old one left behind.
                        flow.expected = abs + 1;
                        flow.buffered = flow.buffered.split_off(&(abs + 1));
                    } else {
                        self.stats.duplicates_dropped += 1;
                    }
                }
                _ => {
                    let base = msg.seq as u64;
                    let mut flow = RecvFlow {
                        incarnation,
                        expected: base + 1,
                        buffered: BTreeMap::new(),
                    };
                    for (raw_seq, m) in std::mem::take(&mut peer.orphans) {
                        let abs = unwrap_seq(flow.expected, raw_seq);
                        if abs >= flow.expected {
                            flow.buffered.insert(abs, m);
                        }
                    }
                    peer.recv = Some(flow);
                }
            }
        } else {
            match &mut peer.recv {
                None => {
                    if peer.orphans.len() < receive_buffer {
                        peer.orphans.insert(msg.seq, msg);
                    }
                    return;
                }
                Some(flow) => {
                    let abs = unwrap_seq(flow.expected, msg.seq);
                    if abs < flow.expected || flow.buffered.contains_key(&abs) {
                        self.stats.duplicates_dropped += 1;
                    } else if abs - flow.expected < receive_buffer as u64 {
                        flow.buffered.insert(abs, msg);
                    } else {
                        // Beyond the buffer: no ack, the sender will retransmit.
                        return;
                    }
                }
            }
        }

        let flow = peer.recv.as_mut().expect("flow established above");
        while let Some(m) = flow.buffered.remove(&flow.expected) {
            flow.expected += 1;
            self.stats.delivered += 1;
            self.events.push_back(MsgEvent::Received { from, msg: m });
        }
        let ack_seq = (flow.expected - 1) as u32;
        self.outbox
            .push_back((from, Frame::new(control::ACK, 0, ack_seq, Vec::new()).encode()));
    }

    pub fn on_tick(&mut self, now: Time) {
        let max_expiries = self.config.max_expiries;
        let mut failed_peers = Vec::new();
        let mut retransmit = Vec::new();
        for (addr, peer) in self.peers.iter_mut() {
            for (seq, inflight) in peer.send.in_flight.iter_mut() {
                if inflight.deadline > now {
                    continue;
                }
                inflight.expiries += 1;
                if inflight.expiries >= max_expiries {
                    failed_peers.push(*addr);
                    break;
                }
                inflight.rto *= 2;
                inflight.deadline = now + inflight.rto;
                let mut bytes = Vec::new();
                encode_into(
                    &mut bytes,
                    inflight.out.msg_type,
                    inflight.out.session_id,
                    *seq as u32,
                    &inflight.out.payload,
                );
                retransmit.push((*addr, bytes));
            }
        }
        self.stats.retransmits += retransmit.len() as u64;
        self.outbox.extend(retransmit);
        for addr in failed_peers {
            self.fail_flow(addr);
        }
    }

    fn fail_flow(&mut self, addr: SocketAddr) {
        let Some(peer) = self.peers.get_mut(&addr) else {
            return;
        };
        self.stats.flows_failed += 1;
        let in_flight = std::mem::take(&mut peer.send.in_flight);
        let queued = std::mem::take(&mut peer.send.queued);
        peer.send.started = false;
        for out in in_flight.into_values().map(|i| i.out).chain(queued) {
            if let Some(token) = out.token {
                self.events.push_back(MsgEvent::Failed {
                    to: addr,
                    token,
                    msg_type: out.msg_type,
                });
            }
        }
    }

    /// Abandons all traffic to `addr`, reporting queued messages as failed.
    pub fn reset_peer(&mut self, addr: SocketAddr) {
        self.fail_flow(addr);
    }

    pub fn next_deadline(&self) -> Option<Time> {
        self.peers
            .values()
            .flat_map(|p| p.send.in_flight.values().map(|i| i.deadline))
            .min()
    }

    pub fn poll_transmit(&mut self) -> Option<(SocketAddr, Vec<u8>)> {
        self.outbox.pop_front()
    }

    pub fn poll_event(&mut self) -> Option<MsgEvent> {
        self.events.pop_front()
    }

    /// Messages queued or in flight to `addr`.
    pub fn pending_to(&self, addr: &SocketAddr) -> usize {
        self.peers
            .get(addr)
            .map(|p| p.send.in_flight.len() + p.send.queued.len())
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(port: u16) -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], port))
    }

    /// Moves every pending datagram between two endpoints until both are quiet,
    /// passing each through `filter` (which may drop or duplicate).
    fn shuttle(
        now: Time,
        x: &mut MessageEndpoint,
        xa: SocketAddr,
        y: &mut MessageEndpoint,
        ya: SocketAddr,
        mut filter: impl FnMut(&[u8]) -> usize,
    ) {
        loop {
            let mut moved = false;
            while let Some((to, bytes)) = x.poll_transmit() {
                assert_eq!(to, ya);
                for _ in 0..filter(&bytes) {
                    y.on_datagram(now, xa, &bytes);
                }
                moved = true;
            }
            while let Some((to, bytes)) = y.poll_transmit() {
                assert_eq!(to, xa);
                for _ in 0..filter(&bytes) {
                    x.on_datagram(now, ya, &bytes);
                }
                moved = true;
            }
            if !moved {
                break;
            }
        }
    }

    fn received(ep: &mut MessageEndpoint) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        while let Some(ev) = ep.poll_event() {
            if let MsgEvent::Received { msg, .. } = ev {
                out.push(msg.payload);
            }
        }
        out
    }

    #[test]
    fn lossless_in_order() {
        let (mut x, mut y) = (
            MessageEndpoint::new(MessagingConfig::default(), 7),
            MessageEndpoint::new(MessagingConfig::default(), 9),
        );
        for i in 1..=10u8 {
            x.send(Time::ZERO, a(2), 0x20, 0, vec![i]).unwrap();
        }
        shuttle(Time::ZERO, &mut x, a(1), &mut y, a(2), |_| 1);
        let got = received(&mut y);
        assert_eq!(got, (1..=10u8).map(|i| vec![i]).collect::<Vec<_>>());
        let delivered = std::iter::from_fn(|| x.poll_event())
            .filter(|e| matches!(e, MsgEvent::Delivered { .. }))
            .count();
        assert_eq!(delivered, 10);
        assert_eq!(x.next_deadline(), None);
    }

    #[test]
    fn absent_peer_fails_after_backoff_schedule() {
        let cfg = MessagingConfig::default();
        assert_eq!(cfg.failure_timeout(), Duration::from_millis(3100));
        let mut x = MessageEndpoint::new(cfg, 1);
        let token = x.send(Time::ZERO, a(2), 0x20, 0, vec![1]).unwrap();
        let mut now = Time::ZERO;
        let mut transmissions = 0;
        let failed_at = loop {
            while x.poll_transmit().is_some() {
                transmissions += 1;
            }
            if let Some(MsgEvent::Failed { token: t, .. }) = x.poll_event() {
                assert_eq!(t, token);
                break now;
            }
            now = x.next_deadline().expect("pending timer");
            x.on_tick(now);
        };
        assert_eq!(failed_at, Time::from_millis(3100));
        // SYN and message, each sent once and retransmitted on four expiries.
        assert_eq!(transmissions, 2 * 5);
    }

    #[test]
    fn answering_peer_outlasts_the_expiry_budget() {
        let cfg = MessagingConfig::default();
        let mut x = MessageEndpoint::new(cfg.clone(), 1);
        let mut y = MessageEndpoint::new(cfg.clone(), 2);
        x.send(Time::ZERO, a(2), 0x20, 0, vec![0xAA]).unwrap();
        x.send(Time::ZERO, a(2), 0x20, 0, vec![0xBB]).unwrap();
        let mut now = Time::ZERO;
        let mut blocked_rounds = 0;
        while blocked_rounds < 3 * cfg.max_expiries {
            shuttle(now, &mut x, a(1), &mut y, a(2), |b| usize::from(!b.ends_with(&[0xAA])));
            now = x.next_deadline().expect("0xAA still pending");
            x.on_tick(now);
            blocked_rounds += 1;
        }
        shuttle(now, &mut x, a(1), &mut y, a(2), |_| 1);
        assert_eq!(received(&mut y), vec![vec![0xAA], vec![0xBB]]);
        assert_eq!(x.stats().flows_failed, 0);
        assert_eq!(x.pending_to(&a(2)), 0);
    }

    #[test]
    fn duplicates_and_reordering_are_absorbed() {
        let mut x = MessageEndpoint::new(MessagingConfig::default(), 3);
        let mut y = MessageEndpoint::new(MessagingConfig::default(), 4);
        for i in 0..20u8 {
            x.send(Time::ZERO, a(2), 0x20, 0, vec![i]).unwrap();
        }
        let mut frames: Vec<Vec<u8>> = std::iter::from_fn(|| x.poll_transmit().map(|(_, b)| b)).collect();
        frames.reverse();
        for f in frames.iter().chain(frames.iter()) {
            y.on_datagram(Time::ZERO, a(1), f);
        }
        let got = received(&mut y);
        assert_eq!(got, (0..20u8).map(|i| vec![i]).collect::<Vec<_>>());
        assert_eq!(y.stats().duplicates_dropped, 21);
    }

    #[test]
    fn new_flow_after_failure_resynchronises_receiver() {
        let mut x = MessageEndpoint::new(MessagingConfig::default(), 11);
        let mut y = MessageEndpoint::new(MessagingConfig::default(), 12);
        x.send(Time::ZERO, a(2), 0x20, 0, vec![1]).unwrap();
        shuttle(Time::ZERO, &mut x, a(1), &mut y, a(2), |_| 1);
        assert_eq!(received(&mut y), vec![vec![1]]);

        // Second message is lost until the flow fails.
        x.send(Time::ZERO, a(2), 0x20, 0, vec![2]).unwrap();
        while x.poll_transmit().is_some() {}
        let mut now = Time::ZERO;
        while !std::iter::from_fn(|| x.poll_event()).any(|e| matches!(e, MsgEvent::Failed { .. })) {
            now = x.next_deadline().unwrap();
            x.on_tick(now);
            while x.poll_transmit().is_some() {}
        }

        x.send(now, a(2), 0x20, 0, vec![3]).unwrap();
        shuttle(now, &mut x, a(1), &mut y, a(2), |_| 1);
        assert_eq!(received(&mut y), vec![vec![3]]);
    }

    #[test]
    fn restarted_sender_is_accepted() {
        let mut y = MessageEndpoint::new(MessagingConfig::default(), 5);
        let mut x = MessageEndpoint::new(MessagingConfig::default(), 100);
        x.send(Time::ZERO, a(2), 0x20, 0, vec![1]).unwrap();
        shuttle(Time::ZERO, &mut x, a(1), &mut y, a(2), |_| 1);
        let mut x2 = MessageEndpoint::new(MessagingConfig::default(), 200);
        x2.send(Time::ZERO, a(2), 0x20, 0, vec![2]).unwrap();
        shuttle(Time::ZERO, &mut x2, a(1), &mut y, a(2), |_| 1);
        assert_eq!(received(&mut y), vec![vec![1], vec![2]]);
    }

    #[test]
    fn oversized_and_reserved_rejected() {
        let mut x = MessageEndpoint::new(MessagingConfig::default(), 1);
        assert!(matches!(
            x.send(Time::ZERO, a(2), 0x20, 0, vec![0; MAX_PAYLOAD + 1]),
            Err(TransportError::PayloadTooLarge(_))
        ));
        assert!(x.send(Time::ZERO, a(2), control::ACK, 0, vec![]).is_err());
        assert!(x.send(Time::ZERO, a(2), 0x8001, 0, vec![]).is_err());
    }

    #[test]
    fn window_limits_in_flight() {
        let cfg = MessagingConfig { window: 4, ..Default::default() };
        let mut x = MessageEndpoint::new(cfg, 1);
        for i in 0..10u8 {
            x.send(Time::ZERO, a(2), 0x20, 0, vec![i]).unwrap();
        }
        let sent = std::iter::from_fn(|| x.poll_transmit()).count();
        assert_eq!(sent, 4);
        assert_eq!(x.pending_to(&a(2)), 11);
    }

    #[test]
    fn unwrap_handles_wraparound() {
        assert_eq!(unwrap_seq(u32::MAX as u64, 0), u32::MAX as u64 + 1);
        assert_eq!(unwrap_seq(u32::MAX as u64 + 5, u32::MAX - 1), u32::MAX as u64 - 1);
        assert_eq!(unwrap_seq(10, 12), 12);
    }
}

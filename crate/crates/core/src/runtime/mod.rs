//! Node hosting: one actor plus its two transport endpoints and its timers.
//!
//! A [`Host`] is a sans-IO bundle. The simulated runtime ([`sim`]) and the
//! real UDP runtime ([`udp`]) both drive hosts the same way: feed datagrams
//! and clock ticks in, pull datagrams out. Actors never see which one is
//! underneath.

pub mod sim;
pub mod udp;

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::time::Time;
use crate::transport::{
    ChannelConfig, ChannelError, ChannelEvent, ChannelId, DataEndpoint, Message, MessageEndpoint,
    MessagingConfig, MsgEvent, MsgToken, TransportError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Port {
    Msg,
    Data,
}

/// Outcome of a message send, reported back to the sending actor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    Delivered { to: SocketAddr, token: MsgToken },
    Failed { to: SocketAddr, token: MsgToken, msg_type: u16 },
}

pub trait Actor: Any + Send {
    fn on_start(&mut self, _ctx: &mut Ctx<'_>) {}

    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: SocketAddr, msg: Message);

    fn on_delivery(&mut self, _ctx: &mut Ctx<'_>, _delivery: Delivery) {}

    fn on_timer(&mut self, _ctx: &mut Ctx<'_>, _token: u64) {}

    fn on_channel(&mut self, _ctx: &mut Ctx<'_>, _event: ChannelEvent) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimerId(u64);

#[derive(Debug, Default)]
struct Timers {
    due: BTreeMap<(Time, u64), u64>,
    by_id: BTreeMap<u64, Time>,
    next_id: u64,
}

impl Timers {
    fn set(&mut self, at: Time, token: u64) -> TimerId {
        self.next_id += 1;
        let id = self.next_id;
        self.due.insert((at, id), token);
        self.by_id.insert(id, at);
        TimerId(id)
    }

    fn cancel(&mut self, id: TimerId) {
        if let Some(at) = self.by_id.remove(&id.0) {
            self.due.remove(&(at, id.0));
        }
    }

    fn pop_due(&mut self, now: Time) -> Option<u64> {
        let (&(at, id), _) = self.due.iter().next()?;
        if at > now {
            return None;
        }
        self.by_id.remove(&id);
        self.due.remove(&(at, id))
    }

    fn next(&self) -> Option<Time> {
        self.due.keys().next().map(|(t, _)| *t)
    }
}

/// Static facts about the host an actor runs on.
#[derive(Debug, Clone)]
pub struct HostEnv {
    pub msg_addr: SocketAddr,
    pub data_addr: SocketAddr,
    /// Simulated hosts charge modeled compute time; real hosts already spent it.
    pub modeled_compute: bool,
    pub compute_scale: f64,
}

/// What an actor may do while handling an event.
pub struct Ctx<'a> {
    now: Time,
    env: &'a HostEnv,
    msg: &'a mut MessageEndpoint,
    data: &'a mut DataEndpoint,
    timers: &'a mut Timers,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Ctx<'a> {
    pub fn now(&self) -> Time {
        self.now
    }

    pub fn msg_addr(&self) -> SocketAddr {
        self.env.msg_addr
    }

    pub fn data_addr(&self) -> SocketAddr {
        self.env.data_addr
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn send(
        &mut self,
        to: SocketAddr,
        msg_type: u16,
        session_id: u32,
        payload: Vec<u8>,
    ) -> Result<MsgToken, TransportError> {
        self.msg.send(self.now, to, msg_type, session_id, payload)
    }

    /// Abandons queued traffic to a peer believed dead.
    pub fn forget_peer(&mut self, peer: SocketAddr) {
        self.msg.reset_peer(peer);
    }

    pub fn set_timer(&mut self, delay: Duration, token: u64) -> TimerId {
        self.timers.set(self.now + delay, token)
    }

    pub fn cancel_timer(&mut self, id: TimerId) {
        self.timers.cancel(id);
    }

    pub fn channel_open(&mut self, id: ChannelId, peer: SocketAddr) -> Result<(), ChannelError> {
        self.data.open(self.now, id, peer)
    }

    pub fn channel_send(&mut self, id: ChannelId, bytes: &[u8]) -> Result<usize, ChannelError> {
        self.data.send(self.now, id, bytes)
    }

    pub fn channel_finish(&mut self, id: ChannelId) -> Result<(), ChannelError> {
        self.data.finish(self.now, id)
    }

    pub fn channel_close(&mut self, id: ChannelId) {
        self.data.close(self.now, id)
    }

    pub fn channel_abort(&mut self, id: ChannelId) {
        self.data.abort(self.now, id)
    }

    pub fn channel_unacked(&self, id: ChannelId) -> u64 {
        self.data.unacked(id)
    }

    /// Simulated duration of work that nominally takes `nominal`.
    pub fn compute_time(&self, nominal: Duration) -> Duration {
        if self.env.modeled_compute {
            nominal.mul_f64(self.env.compute_scale)
        } else {
            Duration::ZERO
        }
    }
}

#[derive(Debug, Clone)]
pub struct HostConfig {
    pub msg_addr: SocketAddr,
    pub data_addr: SocketAddr,
    pub messaging: MessagingConfig,
    pub channels: ChannelConfig,
    pub seed: u64,
    /// Distinguishes restarts of the same node.
    pub incarnation: u64,
    pub modeled_compute: bool,
}

impl HostConfig {
    pub fn new(msg_addr: SocketAddr, data_addr: SocketAddr) -> Self {
        Self {
            msg_addr,
            data_addr,
            messaging: MessagingConfig::default(),
            channels: ChannelConfig::default(),
            seed: 0,
            incarnation: 1,
            modeled_compute: false,
        }
    }
}

pub struct Host {
    env: HostEnv,
    actor: Box<dyn Actor>,
    msg: MessageEndpoint,
    data: DataEndpoint,
    timers: Timers,
    rng: ChaCha8Rng,
    started: bool,
    frozen_until: Option<Time>,
    frozen_inbox: VecDeque<(Port, SocketAddr, Vec<u8>)>,
    transmit: VecDeque<(Port, SocketAddr, Vec<u8>)>,
}

impl Host {
    pub fn new(actor: Box<dyn Actor>, config: HostConfig) -> Self {
        Self {
            env: HostEnv {
                msg_addr: config.msg_addr,
                data_addr: config.data_addr,
                modeled_compute: config.modeled_compute,
                compute_scale: 1.0,
            },
            actor,
            msg: MessageEndpoint::new(config.messaging, config.incarnation),
            data: DataEndpoint::new(config.channels),
            timers: Timers::default(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ config.incarnation.rotate_left(17)),
            started: false,
            frozen_until: None,
            frozen_inbox: VecDeque::new(),
            transmit: VecDeque::new(),
        }
    }

    pub fn env(&self) -> &HostEnv {
        &self.env
    }

    pub fn msg_addr(&self) -> SocketAddr {
        self.env.msg_addr
    }

    pub fn data_addr(&self) -> SocketAddr {
        self.env.data_addr
    }

    pub fn messaging(&self) -> &MessageEndpoint {
        &self.msg
    }

    pub fn data(&self) -> &DataEndpoint {
        &self.data
    }

    pub fn set_compute_scale(&mut self, scale: f64) {
        self.env.compute_scale = scale;
    }

    /// Suspends the whole process until `until`; datagrams wait in the socket buffer.
    pub fn freeze(&mut self, until: Time) {
        self.frozen_until = Some(self.frozen_until.map_or(until, |t| t.max(until)));
    }

    pub fn actor<A: Actor>(&self) -> Option<&A> {
        let any: &dyn Any = &*self.actor;
        any.downcast_ref::<A>()
    }

    pub fn actor_mut<A: Actor>(&mut self) -> Option<&mut A> {
        let any: &mut dyn Any = &mut *self.actor;
        any.downcast_mut::<A>()
    }

    fn is_frozen(&mut self, now: Time) -> bool {
        match self.frozen_until {
            Some(t) if now < t => true,
            Some(_) => {
                self.frozen_until = None;
                let inbox = std::mem::take(&mut self.frozen_inbox);
                for (port, from, bytes) in inbox {
                    self.feed(now, port, from, &bytes);
                }
                false
            }
            None => false,
        }
    }

    pub fn start(&mut self, now: Time) {
        if self.started {
            return;
        }
        self.started = true;
        self.with_ctx(now, |actor, ctx| actor.on_start(ctx));
        self.dispatch(now);
    }

    pub fn handle_datagram(&mut self, now: Time, port: Port, from: SocketAddr, bytes: Vec<u8>) {
        if self.is_frozen(now) {
            self.frozen_inbox.push_back((port, from, bytes));
            return;
        }
        self.feed(now, port, from, &bytes);
        self.dispatch(now);
    }

    fn feed(&mut self, now: Time, port: Port, from: SocketAddr, bytes: &[u8]) {
        match port {
            Port::Msg => self.msg.on_datagram(now, from, bytes),
            Port::Data => self.data.on_datagram(now, from, bytes),
        }
    }

    pub fn tick(&mut self, now: Time) {
        if self.is_frozen(now) {
            return;
        }
        self.msg.on_tick(now);
        self.data.on_tick(now);
        self.dispatch(now);
        while let Some(token) = self.timers.pop_due(now) {
            self.with_ctx(now, |actor, ctx| actor.on_timer(ctx, token));
            self.dispatch(now);
        }
        self.collect_transmits();
    }

    /// Runs `f` against the actor as if it were handling an event.
    pub fn invoke<R>(&mut self, now: Time, f: impl FnOnce(&mut dyn Actor, &mut Ctx<'_>) -> R) -> R {
        let r = self.with_ctx(now, f);
        self.dispatch(now);
        r
    }

    fn with_ctx<R>(&mut self, now: Time, f: impl FnOnce(&mut dyn Actor, &mut Ctx<'_>) -> R) -> R {
        let mut ctx = Ctx {
            now,
            env: &self.env,
            msg: &mut self.msg,
            data: &mut self.data,
            timers: &mut self.timers,
            rng: &mut self.rng,
        };
        f(&mut *self.actor, &mut ctx)
    }

    fn dispatch(&mut self, now: Time) {
        loop {
            let mut progressed = false;
            while let Some(ev) = self.msg.poll_event() {
                progressed = true;
                self.with_ctx(now, |actor, ctx| match ev {
                    MsgEvent::Received { from, msg } => actor.on_message(ctx, from, msg),
                    MsgEvent::Delivered { to, token } => {
                        actor.on_delivery(ctx, Delivery::Delivered { to, token })
                    }
                    MsgEvent::Failed { to, token, msg_type } => {
                        actor.on_delivery(ctx, Delivery::Failed { to, token, msg_type })
                    }
                });
            }
            while let Some(ev) = self.data.poll_event() {
                progressed = true;
                self.with_ctx(now, |actor, ctx| actor.on_channel(ctx, ev));
            }
            if !progressed {
                break;
            }
        }
        self.collect_transmits();
    }

    fn collect_transmits(&mut self) {
        while let Some((to, bytes)) = self.msg.poll_transmit() {
            self.transmit.push_back((Port::Msg, to, bytes));
        }
        while let Some((to, bytes)) = self.data.poll_transmit() {
            self.transmit.push_back((Port::Data, to, bytes));
        }
    }

    pub fn poll_transmit(&mut self) -> Option<(Port, SocketAddr, Vec<u8>)> {
        self.transmit.pop_front()
    }

    pub fn next_deadline(&self) -> Option<Time> {
        if let Some(t) = self.frozen_until {
            return Some(t);
        }
        [self.msg.next_deadline(), self.data.next_deadline(), self.timers.next()]
            .into_iter()
            .flatten()
            .min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Recorder {
        timers: Vec<(Time, u64)>,
    }

    impl Actor for Recorder {
        fn on_start(&mut self, ctx: &mut Ctx<'_>) {
            ctx.set_timer(Duration::from_millis(5), 1);
            let cancelled = ctx.set_timer(Duration::from_millis(3), 2);
            ctx.set_timer(Duration::from_millis(1), 3);
            ctx.cancel_timer(cancelled);
        }

        fn on_message(&mut self, _ctx: &mut Ctx<'_>, _from: SocketAddr, _msg: Message) {}

        fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
            self.timers.push((ctx.now(), token));
        }
    }

    fn host() -> Host {
        let a: SocketAddr = "127.0.0.1:1".parse().unwrap();
        let b: SocketAddr = "127.0.0.1:2".parse().unwrap();
        Host::new(Box::<Recorder>::default(), HostConfig::new(a, b))
    }

    #[test]
    fn timers_fire_in_order_and_cancel() {
        let mut h = host();
        h.start(Time::ZERO);
        while let Some(t) = h.next_deadline() {
            h.tick(t);
        }
        let rec = h.actor::<Recorder>().unwrap();
        assert_eq!(
            rec.timers,
            vec![(Time::from_millis(1), 3), (Time::from_millis(5), 1)]
        );
    }

    #[test]
    fn frozen_host_defers_timers() {
        let mut h = host();
        h.start(Time::ZERO);
        h.freeze(Time::from_millis(50));
        assert_eq!(h.next_deadline(), Some(Time::from_millis(50)));
        h.tick(Time::from_millis(10));
        assert!(h.actor::<Recorder>().unwrap().timers.is_empty());
        h.tick(Time::from_millis(50));
        let fired: Vec<u64> = h.actor::<Recorder>().unwrap().timers.iter().map(|t| t.1).collect();
        assert_eq!(fired, vec![3, 1]);
    }
}

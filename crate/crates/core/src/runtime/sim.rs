//! Deterministic in-process network and scheduler.
//!
//! All hosts share one virtual clock. Datagrams are delivered through a seeded
//! link model (latency by topology distance, per-node egress bandwidth, and the
//! active [`NetFaultPlan`]). Given the same seed and the same sequence of
//! external calls, a simulation replays identically.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::net::SocketAddr;
use std::time::Duration;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{location_distance, Location};
use crate::time::Time;
use crate::transport::NetFaultPlan;

use super::{Actor, Ctx, Host, HostConfig, Port};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Latency and bandwidth of the simulated fabric.
#[derive(Debug, Clone)]
pub struct LinkModel {
    pub loopback: Duration,
    pub same_rack: Duration,
    pub same_dc: Duration,
    pub cross_dc: Duration,
    /// Egress bandwidth of one node, bytes per second.
    pub node_bandwidth: f64,
    /// Extra delay per reorder-window slot.
    pub jitter_quantum: Duration,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            loopback: Duration::from_micros(10),
            same_rack: Duration::from_micros(100),
            same_dc: Duration::from_micros(300),
            cross_dc: Duration::from_millis(10),
            node_bandwidth: 125_000_000.0,
            jitter_quantum: Duration::from_micros(50),
        }
    }
}

impl LinkModel {
    fn latency(&self, distance: u8) -> Duration {
        match distance {
            0 => self.loopback,
            1 => self.same_rack,
            2 => self.same_dc,
            _ => self.cross_dc,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetStats {
    pub datagrams_sent: u64,
    pub datagrams_dropped: u64,
    pub datagrams_duplicated: u64,
    /// Data-port payload bytes per (source, destination) node pair.
    pub data_bytes: BTreeMap<(NodeId, NodeId), u64>,
    pub msg_bytes: BTreeMap<(NodeId, NodeId), u64>,
}

enum Event {
    Deliver {
        node: NodeId,
        port: Port,
        from: SocketAddr,
        bytes: Vec<u8>,
    },
    Wake {
        node: NodeId,
    },
}

struct Scheduled {
    at: Time,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct SimNode {
    name: String,
    location: Option<Location>,
    host: Host,
    alive: bool,
    wake_at: Option<Time>,
    egress_busy: Time,
    incarnation: u64,
}

pub struct Sim {
    now: Time,
    seed: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    nodes: Vec<SimNode>,
    by_addr: BTreeMap<SocketAddr, (NodeId, Port)>,
    rng: ChaCha8Rng,
    links: LinkModel,
    faults: NetFaultPlan,
    link_faults: BTreeMap<(NodeId, NodeId), NetFaultPlan>,
    stats: NetStats,
    events_processed: u64,
}

/// Addresses and placement for a node joining the simulation.
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub name: String,
    pub msg_addr: SocketAddr,
    pub data_addr: SocketAddr,
    pub location: Option<Location>,
}

impl Sim {
    pub fn new(seed: u64) -> Self {
        Self {
            now: Time::ZERO,
            seed,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes: Vec::new(),
            by_addr: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            links: LinkModel::default(),
            faults: NetFaultPlan::default(),
            link_faults: BTreeMap::new(),
            stats: NetStats::default(),
            events_processed: 0,
        }
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_links(&mut self, links: LinkModel) {
        self.links = links;
    }

    pub fn set_faults(&mut self, plan: NetFaultPlan) {
        self.faults = plan;
    }

    pub fn faults(&self) -> &NetFaultPlan {
        &self.faults
    }

    /// Overrides faults on the directed link `from -> to`.
    pub fn set_link_faults(&mut self, from: NodeId, to: NodeId, plan: NetFaultPlan) {
        self.link_faults.insert((from, to), plan);
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    fn host_config(&self, spec: &NodeSpec, id: usize, incarnation: u64) -> HostConfig {
        let mut cfg = HostConfig::new(spec.msg_addr, spec.data_addr);
        cfg.seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (id as u64);
        cfg.incarnation = incarnation
            .wrapping_mul(0x2545_F491_4F6C_DD1D)
            .wrapping_add((id as u64) << 32 | self.seed & 0xFFFF);
        cfg.modeled_compute = true;
        cfg
    }

    pub fn add_node(&mut self, spec: NodeSpec, actor: Box<dyn Actor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let cfg = self.host_config(&spec, id.0, 1);
        self.add_node_with(spec, actor, cfg)
    }

    /// Adds a node with explicit transport settings.
    pub fn add_node_with(&mut self, spec: NodeSpec, actor: Box<dyn Actor>, cfg: HostConfig) -> NodeId {
        let id = NodeId(self.nodes.len());
        assert!(
            !self.by_addr.contains_key(&spec.msg_addr) && !self.by_addr.contains_key(&spec.data_addr),
            "address already in use"
        );
        self.by_addr.insert(spec.msg_addr, (id, Port::Msg));
        self.by_addr.insert(spec.data_addr, (id, Port::Data));
        let mut host = Host::new(actor, cfg);
        host.start(self.now);
        self.nodes.push(SimNode {
            name: spec.name,
            location: spec.location,
            host,
            alive: true,
            wake_at: None,
            egress_busy: Time::ZERO,
            incarnation: 1,
        });
        self.after_host_activity(id);
        id
    }

    /// Kills the node process: it stops running and its traffic vanishes.
    pub fn kill(&mut self, node: NodeId) {
        let n = &mut self.nodes[node.0];
        n.alive = false;
        n.wake_at = None;
    }

    /// Replaces a node's process with a fresh one at the same addresses.
    pub fn restart(&mut self, node: NodeId, actor: Box<dyn Actor>) {
        let incarnation = self.nodes[node.0].incarnation + 1;
        let spec = NodeSpec {
            name: self.nodes[node.0].name.clone(),
            msg_addr: self.nodes[node.0].host.msg_addr(),
            data_addr: self.nodes[node.0].host.data_addr(),
            location: self.nodes[node.0].location.clone(),
        };
        let cfg = self.host_config(&spec, node.0, incarnation);
        let mut host = Host::new(actor, cfg);
        host.start(self.now);
        let n = &mut self.nodes[node.0];
        n.host = host;
        n.alive = true;
        n.incarnation = incarnation;
        n.wake_at = None;
        self.after_host_activity(node);
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.nodes[node.0].alive
    }

    pub fn freeze(&mut self, node: NodeId, duration: Duration) {
        let until = self.now + duration;
        self.nodes[node.0].host.freeze(until);
        self.after_host_activity(node);
    }

    pub fn set_compute_scale(&mut self, node: NodeId, scale: f64) {
        self.nodes[node.0].host.set_compute_scale(scale);
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn name(&self, node: NodeId) -> &str {
        &self.nodes[node.0].name
    }

    pub fn location(&self, node: NodeId) -> Option<&Location> {
        self.nodes[node.0].location.as_ref()
    }

    pub fn host(&self, node: NodeId) -> &Host {
        &self.nodes[node.0].host
    }

    pub fn node_by_addr(&self, addr: &SocketAddr) -> Option<NodeId> {
        self.by_addr.get(addr).map(|(n, _)| *n)
    }

    pub fn actor<A: Actor>(&self, node: NodeId) -> Option<&A> {
        self.nodes[node.0].host.actor::<A>()
    }

    /// Runs `f` on a live node's actor, then delivers whatever it sent.
    pub fn invoke<A: Actor, R>(&mut self, node: NodeId, f: impl FnOnce(&mut A, &mut Ctx<'_>) -> R) -> R {
        let now = self.now;
        let r = self.nodes[node.0].host.invoke(now, |actor, ctx| {
            let any: &mut dyn std::any::Any = actor;
            let a = any.downcast_mut::<A>().expect("actor type mismatch");
            f(a, ctx)
        });
        self.after_host_activity(node);
        r
    }

    /// Data-port bytes moved between nodes in different racks.
    pub fn cross_rack_data_bytes(&self) -> u64 {
        self.stats
            .data_bytes
            .iter()
            .filter(|((a, b), _)| {
                let (la, lb) = (self.location(*a), self.location(*b));
                location_distance(la, lb) >= 2
            })
            .map(|(_, v)| *v)
            .sum()
    }

    fn push(&mut self, at: Time, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            event,
        }));
    }

    fn after_host_activity(&mut self, node: NodeId) {
        if !self.nodes[node.0].alive {
            return;
        }
        while let Some((port, to, bytes)) = self.nodes[node.0].host.poll_transmit() {
            self.route(node, port, to, bytes);
        }
        let now = self.now;
        let n = &mut self.nodes[node.0];
        let next = n.host.next_deadline().map(|t| t.max(now));
        if next.is_some() && next != n.wake_at {
            let at = next.expect("checked");
            n.wake_at = Some(at);
            self.push(at, Event::Wake { node });
        }
    }

    fn route(&mut self, src: NodeId, port: Port, to: SocketAddr, bytes: Vec<u8>) {
        self.stats.datagrams_sent += 1;
        let Some(&(dst, dst_port)) = self.by_addr.get(&to) else {
            self.stats.datagrams_dropped += 1;
            return;
        };
        let plan = self
            .link_faults
            .get(&(src, dst))
            .unwrap_or(&self.faults)
            .clone();
        if plan.drop > 0.0 && self.rng.gen_bool(plan.drop.min(1.0)) {
            self.stats.datagrams_dropped += 1;
            return;
        }
        let copies = if plan.duplicate > 0.0 && self.rng.gen_bool(plan.duplicate.min(1.0)) {
            self.stats.datagrams_duplicated += 1;
            2
        } else {
            1
        };
        let distance = if src == dst {
            0
        } else {
            location_distance(self.location(src), self.location(dst)).max(1)
        };
        let latency = plan.latency.unwrap_or_else(|| self.links.latency(distance));
        let from = match port {
            Port::Msg => self.nodes[src.0].host.msg_addr(),
            Port::Data => self.nodes[src.0].host.data_addr(),
        };
        let payload_len = bytes.len() as u64;
        let stats = match port {
            Port::Msg => &mut self.stats.msg_bytes,
            Port::Data => &mut self.stats.data_bytes,
        };
        *stats.entry((src, dst)).or_default() += payload_len;

        let departure = if src == dst {
            self.now
        } else {
            let serialize = Duration::from_secs_f64(payload_len as f64 / self.links.node_bandwidth);
            let start = self.nodes[src.0].egress_busy.max(self.now);
            let done = start + serialize;
            self.nodes[src.0].egress_busy = done;
            done
        };
        for _ in 0..copies {
            let jitter = if plan.reorder_window > 0 {
                self.links.jitter_quantum * self.rng.gen_range(0..=plan.reorder_window)
            } else {
                Duration::ZERO
            };
            let at = departure + latency + jitter;
            self.push(
                at,
                Event::Deliver {
                    node: dst,
                    port: dst_port,
                    from,
                    bytes: bytes.clone(),
                },
            );
        }
        let _ = port;
    }

    /// Processes the next event. Returns false when nothing is scheduled.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(next)) = self.queue.pop() else {
            return false;
        };
        self.now = self.now.max(next.at);
        self.events_processed += 1;
        match next.event {
            Event::Deliver {
                node,
                port,
                from,
                bytes,
            } => {
                if !self.nodes[node.0].alive {
                    self.stats.datagrams_dropped += 1;
                    return true;
                }
                // Traffic from a dead node that was already on the wire still arrives.
                let now = self.now;
                self.nodes[node.0].host.handle_datagram(now, port, from, bytes);
                self.after_host_activity(node);
            }
            Event::Wake { node } => {
                let n = &mut self.nodes[node.0];
                if !n.alive || n.wake_at != Some(next.at) {
                    return true;
                }
                n.wake_at = None;
                let now = self.now;
                n.host.tick(now);
                self.after_host_activity(node);
            }
        }
        true
    }

    /// Runs until the clock would pass `until`.
    pub fn run_until(&mut self, until: Time) {
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.at > until {
                break;
            }
            self.step();
        }
        self.now = self.now.max(until);
    }

    pub fn run_for(&mut self, d: Duration) {
        let until = self.now + d;
        self.run_until(until);
    }

    /// Runs until `done` holds or the clock passes `limit`. Returns whether `done` held.
    pub fn run_until_pred(&mut self, limit: Time, mut done: impl FnMut(&Sim) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            match self.queue.peek() {
                Some(Reverse(next)) if next.at <= limit => {
                    self.step();
                }
                _ => {
                    self.now = self.now.max(limit);
                    return done(self);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Message;

    struct Echo {
        got: Vec<Vec<u8>>,
    }

    impl Actor for Echo {
        fn on_message(&mut self, ctx: &mut Ctx<'_>, from: SocketAddr, msg: Message) {
            self.got.push(msg.payload.clone());
            if msg.msg_type == 0x20 {
                ctx.send(from, 0x21, 0, msg.payload).unwrap();
            }
        }
    }

    fn spec(i: u8, rack: &str) -> NodeSpec {
        NodeSpec {
            name: format!("n{i}"),
            msg_addr: SocketAddr::from(([10, 0, 0, i], 6000)),
            data_addr: SocketAddr::from(([10, 0, 0, i], 6001)),
            location: Some(Location::new("dc1", rack, format!("n{i}"))),
        }
    }

    fn run_echo(seed: u64) -> (Vec<Vec<u8>>, Time, u64) {
        let mut sim = Sim::new(seed);
        sim.set_faults(NetFaultPlan {
            drop: 0.2,
            duplicate: 0.1,
            reorder_window: 4,
            latency: None,
        });
        let a = sim.add_node(spec(1, "r1"), Box::new(Echo { got: vec![] }));
        let b = sim.add_node(spec(2, "r2"), Box::new(Echo { got: vec![] }));
        let peer = sim.host(b).msg_addr();
        sim.invoke::<Echo, _>(a, |_, ctx| {
            for i in 0..50u8 {
                ctx.send(peer, 0x20, 0, vec![i]).unwrap();
            }
        });
        sim.run_until_pred(Time::from_secs(60), |s| s.actor::<Echo>(a).unwrap().got.len() == 50);
        (sim.actor::<Echo>(a).unwrap().got.clone(), sim.now(), sim.stats().datagrams_dropped)
    }

    #[test]
    fn echo_through_lossy_fabric_is_exact_and_deterministic() {
        let (got, t1, d1) = run_echo(42);
        assert_eq!(got, (0..50u8).map(|i| vec![i]).collect::<Vec<_>>());
        assert_eq!(run_echo(42), (got, t1, d1));
        assert!(d1 > 0);
    }

    #[test]
    fn killed_node_goes_silent() {
        let mut sim = Sim::new(1);
        let a = sim.add_node(spec(1, "r1"), Box::new(Echo { got: vec![] }));
        let b = sim.add_node(spec(2, "r1"), Box::new(Echo { got: vec![] }));
        sim.kill(b);
        let peer = sim.host(b).msg_addr();
        sim.invoke::<Echo, _>(a, |_, ctx| {
            ctx.send(peer, 0x20, 0, vec![1]).unwrap();
        });
        sim.run_for(Duration::from_secs(10));
        assert!(sim.actor::<Echo>(a).unwrap().got.is_empty());
        assert!(sim.actor::<Echo>(b).unwrap().got.is_empty());
    }

    #[test]
    fn cross_rack_accounting() {
        let mut sim = Sim::new(3);
        let a = sim.add_node(spec(1, "r1"), Box::new(Echo { got: vec![] }));
        let b = sim.add_node(spec(2, "r2"), Box::new(Echo { got: vec![] }));
        let c = sim.add_node(spec(3, "r1"), Box::new(Echo { got: vec![] }));
        let (bd, cd) = (sim.host(b).data_addr(), sim.host(c).data_addr());
        let ad = sim.host(a).data_addr();
        sim.invoke::<Echo, _>(a, |_, ctx| {
            ctx.channel_open(1, cd).unwrap();
            ctx.channel_send(1, &[0u8; 1000]).unwrap();
        });
        sim.invoke::<Echo, _>(c, |_, ctx| ctx.channel_open(1, ad).unwrap());
        sim.run_for(Duration::from_secs(1));
        assert_eq!(sim.cross_rack_data_bytes(), 0);
        sim.invoke::<Echo, _>(a, |_, ctx| {
            ctx.channel_open(2, bd).unwrap();
        });
        sim.invoke::<Echo, _>(b, |_, ctx| ctx.channel_open(2, ad).unwrap());
        sim.run_for(Duration::from_secs(1));
        assert!(sim.cross_rack_data_bytes() > 0);
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::ops::Range;
use std::time::Duration;

use crate::model::{location_distance, FileMeta, Location, SlaveId, SlaveStatus, Topology};
use crate::proto::{FsError, ScanEntry};
use crate::time::Time;
use crate::transport::ChannelId;

#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub replicas: usize,
    pub heartbeat_interval: Duration,
    pub missed_heartbeats: u32,
    pub sweep_interval: Duration,
    pub job_channel_block: u32,
}

impl Default for MasterConfig {
    fn default() -> Self {
        Self {
            replicas: 3,
            heartbeat_interval: Duration::from_secs(2),
            missed_heartbeats: 3,
            sweep_interval: Duration::from_secs(10),
            job_channel_block: 1 << 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlaveEntry {
    pub status: SlaveStatus,
    pub last_heartbeat: Time,
    pub files: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quarantined {
    pub path: String,
    pub slave: SlaveId,
    pub size: u64,
    pub expected: u64,
}

/// A copy the sweep wants made.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyPlan {
    pub path: String,
    pub source: SlaveId,
    pub target: SlaveId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelPurpose {
    Read { path: String, slave: SlaveId },
    Write { path: String, slave: SlaveId },
    Copy { path: String, source: SlaveId, target: SlaveId },
}

/// Every channel id the master has handed out.
#[derive(Debug, Clone, Default)]
pub struct ChannelLedger {
    next: u32,
    single: BTreeMap<ChannelId, ChannelPurpose>,
    blocks: Vec<(Range<u32>, u32)>,
}

impl ChannelLedger {
    pub fn starting_at(base: u32) -> Self {
        Self {
            next: base.max(1),
            ..Default::default()
        }
    }

    pub fn issue(&mut self, purpose: ChannelPurpose) -> ChannelId {
        let id = self.take(1).start;
        self.single.insert(id, purpose);
        id
    }

    pub fn issue_block(&mut self, len: u32, job: u32) -> Range<u32> {
        let r = self.take(len);
        self.blocks.push((r.clone(), job));
        r
    }

    fn take(&mut self, len: u32) -> Range<u32> {
        if self.next.checked_add(len).is_none() {
            self.next = 1;
        }
        let r = self.next..self.next + len;
        self.next += len;
        r
    }

    pub fn purpose(&self, id: ChannelId) -> Option<&ChannelPurpose> {
        self.single.get(&id)
    }

    pub fn is_issued(&self, id: ChannelId) -> bool {
        self.single.contains_key(&id) || self.blocks.iter().any(|(r, _)| r.contains(&id))
    }

    pub fn job_of(&self, id: ChannelId) -> Option<u32> {
        self.blocks.iter().find(|(r, _)| r.contains(&id)).map(|(_, j)| *j)
    }
}

/// Metadata index and slave table.
#[derive(Debug, Clone)]
pub struct MasterState {
    pub config: MasterConfig,
    topology: Topology,
    slaves: BTreeMap<SlaveId, SlaveEntry>,
    by_addr: BTreeMap<SocketAddr, SlaveId>,
    files: BTreeMap<String, FileMeta>,
    quarantine: Vec<Quarantined>,
    /// Transfers granted by the master and not yet reported finished.
    granted: BTreeMap<SlaveId, u32>,
    pub channels: ChannelLedger,
}

impl MasterState {
    pub fn new(config: MasterConfig, topology: Topology) -> Self {
        Self {
            config,
            topology,
            slaves: BTreeMap::new(),
            by_addr: BTreeMap::new(),
            files: BTreeMap::new(),
            quarantine: Vec::new(),
            granted: BTreeMap::new(),
            channels: ChannelLedger::starting_at(1),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn files(&self) -> &BTreeMap<String, FileMeta> {
        &self.files
    }

    pub fn slaves(&self) -> &BTreeMap<SlaveId, SlaveEntry> {
        &self.slaves
    }

    pub fn slave(&self, id: SlaveId) -> Option<&SlaveEntry> {
        self.slaves.get(&id)
    }

    pub fn slave_by_addr(&self, addr: &SocketAddr) -> Option<SlaveId> {
        self.by_addr.get(addr).copied()
    }

    pub fn quarantine(&self) -> &[Quarantined] {
        &self.quarantine
    }

    pub fn is_alive(&self, id: SlaveId) -> bool {
        self.slaves.get(&id).is_some_and(|s| s.status.alive)
    }

    pub fn alive_slaves(&self) -> impl Iterator<Item = &SlaveEntry> {
        self.slaves.values().filter(|s| s.status.alive)
    }

    /// Location of any host, matched on IP against the topology.
    pub fn location_of(&self, addr: &SocketAddr) -> Option<Location> {
        if let Some(l) = self.topology.location(addr) {
            return Some(l.clone());
        }
        self.topology
            .iter()
            .find(|(a, _)| a.ip() == addr.ip())
            .map(|(_, l)| l.clone())
    }

    /// Stable id: the slave's position in the topology, else after all topology slots.
    fn id_for(&mut self, addr: SocketAddr) -> SlaveId {
        if let Some(id) = self.by_addr.get(&addr) {
            return *id;
        }
        if let Some(pos) = self.topology.iter().position(|(a, _)| *a == addr) {
            return SlaveId(pos as u32);
        }
        let base = self.topology.len() as u32;
        let used: BTreeSet<u32> = self.slaves.keys().map(|s| s.0).collect();
        SlaveId((base..).find(|i| !used.contains(i)).expect("id space"))
    }

    /// Adds an admitted slave and merges its scan report.
    pub fn register_slave(&mut self, now: Time, mut status: SlaveStatus, scan: &[ScanEntry]) -> SlaveId {
        let id = self.id_for(status.address);
        status.id = id;
        status.alive = true;
        if status.location.is_none() {
            status.location = self.location_of(&status.address);
        }
        if let Some(old) = self.slaves.get(&id) {
            let old_files = old.files.clone();
            for path in old_files {
                self.drop_replica(&path, id);
            }
        }
        self.quarantine.retain(|q| q.slave != id);
        self.by_addr.insert(status.address, id);
        self.slaves.insert(
            id,
            SlaveEntry {
                status,
                last_heartbeat: now,
                files: BTreeSet::new(),
            },
        );
        for entry in scan {
            self.add_replica(id, entry);
        }
        id
    }

    /// Records that `slave` holds `entry`. Returns false when the replica is quarantined.
    pub fn add_replica(&mut self, slave: SlaveId, entry: &ScanEntry) -> bool {
        match self.files.get_mut(&entry.path) {
            Some(meta) if meta.size != entry.size && !meta.replicas.is_empty() => {
                log::warn!(
                    "{}: {slave} reports {} bytes, index has {}; quarantined",
                    entry.path,
                    entry.size,
                    meta.size
                );
                self.quarantine.push(Quarantined {
                    path: entry.path.clone(),
                    slave,
                    size: entry.size,
                    expected: meta.size,
                });
                return false;
            }
            Some(meta) => {
                if meta.replicas.is_empty() {
                    meta.size = entry.size;
                    meta.record_count = entry.record_count;
                }
                if meta.record_count.is_none() {
                    meta.record_count = entry.record_count;
                }
                meta.timestamp = meta.timestamp.max(entry.timestamp);
                meta.replicas.insert(slave);
            }
            None => {
                self.files.insert(
                    entry.path.clone(),
                    FileMeta {
                        path: entry.path.clone(),
                        size: entry.size,
                        record_count: entry.record_count,
                        replicas: [slave].into(),
                        timestamp: entry.timestamp,
                    },
                );
            }
        }
        if let Some(s) = self.slaves.get_mut(&slave) {
            s.files.insert(entry.path.clone());
        }
        true
    }

    fn drop_replica(&mut self, path: &str, slave: SlaveId) {
        if let Some(meta) = self.files.get_mut(path) {
            meta.replicas.remove(&slave);
        }
        if let Some(s) = self.slaves.get_mut(&slave) {
            s.files.remove(path);
        }
    }

    pub fn remove_file(&mut self, path: &str) -> Option<FileMeta> {
        let meta = self.files.remove(path)?;
        for s in &meta.replicas {
            if let Some(e) = self.slaves.get_mut(s) {
                e.files.remove(path);
            }
        }
        Some(meta)
    }

    /// Returns false for an unknown slave, which must register again.
    pub fn heartbeat(&mut self, now: Time, status: &SlaveStatus) -> bool {
        let Some(id) = self.by_addr.get(&status.address).copied() else {
            return false;
        };
        let entry = self.slaves.get_mut(&id).expect("by_addr and slaves agree");
        if !entry.status.alive {
            return false;
        }
        entry.last_heartbeat = now;
        entry.status.free_disk = status.free_disk;
        entry.status.active_transfers = status.active_transfers;
        entry.status.spe_count = status.spe_count;
        true
    }

    /// Marks slaves that missed too many heartbeats as dead. Returns them.
    pub fn check_liveness(&mut self, now: Time) -> Vec<SlaveId> {
        let limit = self.config.heartbeat_interval * self.config.missed_heartbeats;
        let dead: Vec<SlaveId> = self
            .slaves
            .iter()
            .filter(|(_, s)| s.status.alive && now.saturating_since(s.last_heartbeat) > limit)
            .map(|(id, _)| *id)
            .collect();
        for id in &dead {
            self.mark_dead(*id);
        }
        dead
    }

    pub fn mark_dead(&mut self, id: SlaveId) {
        let Some(entry) = self.slaves.get_mut(&id) else {
            return;
        };
        entry.status.alive = false;
        let files = std::mem::take(&mut entry.files);
        for path in files {
            if let Some(meta) = self.files.get_mut(&path) {
                meta.replicas.remove(&id);
            }
        }
        self.granted.remove(&id);
        log::info!("{id} declared dead");
    }

    pub fn lookup(&self, path: &str) -> Result<FileMeta, FsError> {
        let meta = self.files.get(path).ok_or_else(|| FsError::NotFound(path.to_string()))?;
        let mut meta = meta.clone();
        meta.replicas.retain(|s| self.is_alive(*s));
        if meta.replicas.is_empty() {
            return Err(FsError::NoLiveReplica(path.to_string()));
        }
        Ok(meta)
    }

    pub fn list(&self, prefix: &str) -> Vec<FileMeta> {
        self.files
            .values()
            .filter(|m| crate::model::path_has_prefix(&m.path, prefix))
            .map(|m| {
                let mut m = m.clone();
                m.replicas.retain(|s| self.is_alive(*s));
                m
            })
            .collect()
    }

    fn load(&self, id: SlaveId) -> u32 {
        let s = &self.slaves[&id];
        s.status.active_transfers + self.granted.get(&id).copied().unwrap_or(0)
    }

    pub fn grant_transfer(&mut self, id: SlaveId) {
        *self.granted.entry(id).or_default() += 1;
    }

    pub fn finish_transfer(&mut self, id: SlaveId) {
        if let Some(n) = self.granted.get_mut(&id) {
            *n = n.saturating_sub(1);
        }
    }

    /// The live replica nearest the client, then least busy, then roomiest, then lowest id.
    pub fn choose_slave_for_read(&self, meta: &FileMeta, client: Option<&Location>) -> Option<SlaveId> {
        let candidates: Vec<ReadCandidate> = meta
            .replicas
            .iter()
            .filter(|s| self.is_alive(**s))
            .map(|s| {
                let e = &self.slaves[s];
                ReadCandidate {
                    id: *s,
                    distance: client.map_or(0, |c| location_distance(Some(c), e.status.location.as_ref())),
                    active: self.load(*s),
                    free_disk: e.status.free_disk,
                }
            })
            .collect();
        pick_read(&candidates)
    }

    /// Target for a new file: most free disk, then nearest the client, then lowest id.
    pub fn choose_slave_for_write(&self, size: u64, client: Option<&Location>) -> Result<SlaveId, FsError> {
        self.alive_slaves()
            .filter(|s| s.status.free_disk >= size)
            .min_by_key(|s| {
                let d = client.map_or(0, |c| location_distance(Some(c), s.status.location.as_ref()));
                (std::cmp::Reverse(s.status.free_disk), d, s.status.id)
            })
            .map(|s| s.status.id)
            .ok_or(FsError::NoSpace(size))
    }

    /// Plans copies for files below the replication threshold.
    ///
    /// `in_flight` lists targets of copies already under way, per path; they
    /// count as replicas for planning.
    pub fn replication_sweep(&self, in_flight: &BTreeMap<String, BTreeSet<SlaveId>>) -> (Vec<CopyPlan>, Vec<String>) {
        let mut plan = Vec::new();
        let mut warnings = Vec::new();
        let mut reserved: BTreeMap<SlaveId, u64> = BTreeMap::new();
        let alive: Vec<&SlaveEntry> = self.alive_slaves().collect();
        for meta in self.files.values() {
            let live: BTreeSet<SlaveId> = meta.replicas.iter().copied().filter(|s| self.is_alive(*s)).collect();
            if live.is_empty() {
                continue;
            }
            let pending = in_flight.get(&meta.path).cloned().unwrap_or_default();
            let mut existing: BTreeSet<SlaveId> = live.union(&pending).copied().collect();
            existing.retain(|s| self.is_alive(*s));
            let need = self.config.replicas.saturating_sub(existing.len());
            if need == 0 {
                continue;
            }
            let candidates: Vec<PlacementNode> = alive
                .iter()
                .filter(|s| !existing.contains(&s.status.id))
                .filter(|s| {
                    let used = reserved.get(&s.status.id).copied().unwrap_or(0);
                    s.status.free_disk.saturating_sub(used) >= meta.size
                })
                .map(|s| PlacementNode {
                    id: s.status.id,
                    location: s.status.location.clone(),
                    free_disk: s.status.free_disk,
                })
                .collect();
            let fixed: Vec<PlacementNode> = existing
                .iter()
                .map(|id| {
                    let s = &self.slaves[id];
                    PlacementNode {
                        id: *id,
                        location: s.status.location.clone(),
                        free_disk: s.status.free_disk,
                    }
                })
                .collect();
            let chosen = place_replicas(&fixed, &candidates, need);
            if chosen.len() < need {
                warnings.push(format!(
                    "{}: wants {} more replicas, only {} eligible slaves",
                    meta.path,
                    need,
                    chosen.len()
                ));
            }
            let source = *live
                .iter()
                .min_by_key(|s| (self.load(**s), **s))
                .expect("live is nonempty");
            for target in chosen {
                *reserved.entry(target).or_default() += meta.size;
                plan.push(CopyPlan {
                    path: meta.path.clone(),
                    source,
                    target,
                });
            }
        }
        (plan, warnings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadCandidate {
    pub id: SlaveId,
    pub distance: u8,
    pub active: u32,
    pub free_disk: u64,
}

/// Lexicographic minimum of (distance, active transfers, free disk descending, id).
pub fn pick_read(candidates: &[ReadCandidate]) -> Option<SlaveId> {
    candidates
        .iter()
        .min_by_key(|c| (c.distance, c.active, std::cmp::Reverse(c.free_disk), c.id))
        .map(|c| c.id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementNode {
    pub id: SlaveId,
    pub location: Option<Location>,
    pub free_disk: u64,
}

fn dist(a: &PlacementNode, b: &PlacementNode) -> u8 {
    if a.id == b.id {
        0
    } else {
        location_distance(a.location.as_ref(), b.location.as_ref())
    }
}

/// Spread score of a replica set: its minimum pairwise distance, then the
/// sum of pairwise distances.
pub fn spread(nodes: &[&PlacementNode]) -> (u8, u32) {
    let mut min = u8::MAX;
    let mut sum = 0u32;
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let d = dist(nodes[i], nodes[j]);
            min = min.min(d);
            sum += d as u32;
        }
    }
    (if nodes.len() < 2 { 3 } else { min }, sum)
}

const EXHAUSTIVE_LIMIT: u64 = 20_000;

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Chooses up to `need` new replica holders maximizing the spread of the final set.
///
/// Ties go to more free disk, then lower ids. The result is ordered most
/// distant from the existing replicas first.
pub fn place_replicas(fixed: &[PlacementNode], candidates: &[PlacementNode], need: usize) -> Vec<SlaveId> {
    let k = need.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    let chosen: Vec<usize> = if binomial(candidates.len() as u64, k as u64) <= EXHAUSTIVE_LIMIT {
        best_subset(fixed, candidates, k)
    } else {
        greedy(fixed, candidates, k)
    };
    let mut picked: Vec<&PlacementNode> = chosen.iter().map(|&i| &candidates[i]).collect();
    picked.sort_by_key(|c| {
        let d = fixed.iter().map(|f| dist(f, c)).min().unwrap_or(3);
        (std::cmp::Reverse(d), std::cmp::Reverse(c.free_disk), c.id)
    });
    picked.into_iter().map(|c| c.id).collect()
}

type SubsetKey = ((u8, u32), u64, std::cmp::Reverse<Vec<SlaveId>>);

fn subset_key(fixed: &[PlacementNode], candidates: &[PlacementNode], idx: &[usize]) -> SubsetKey {
    let mut all: Vec<&PlacementNode> = fixed.iter().collect();
    all.extend(idx.iter().map(|&i| &candidates[i]));
    let free: u64 = idx.iter().map(|&i| candidates[i].free_disk).sum();
    let mut ids: Vec<SlaveId> = idx.iter().map(|&i| candidates[i].id).collect();
    ids.sort();
    (spread(&all), free, std::cmp::Reverse(ids))
}

fn best_subset(fixed: &[PlacementNode], candidates: &[PlacementNode], k: usize) -> Vec<usize> {
    let n = candidates.len();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = idx.clone();
    let mut best_key = subset_key(fixed, candidates, &idx);
    loop {
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
        let key = subset_key(fixed, candidates, &idx);
        if key > best_key {
            best_key = key;
            best = idx.clone();
        }
    }
    best
}

fn greedy(fixed: &[PlacementNode], candidates: &[PlacementNode], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..k {
        let next = (0..candidates.len())
            .filter(|i| !chosen.contains(i))
            .max_by_key(|&i| {
                let d = fixed
                    .iter()
                    .chain(chosen.iter().map(|&j| &candidates[j]))
                    .map(|f| dist(f, &candidates[i]))
                    .min()
                    .unwrap_or(3);
                (d, candidates[i].free_disk, std::cmp::Reverse(candidates[i].id))
            });
        match next {
            Some(i) => chosen.push(i),
            None => break,
        }
    }
    chosen
}

//! Segment-to-SPE assignment and end-game speculation.
//!
//! Both functions are pure: given the same snapshot they return the same
//! assignments, with ties broken by segment id and then SPE id.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use crate::model::SlaveId;
use crate::time::Time;

/// Job-wide SPE number.
pub type SpeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Spe {
    pub id: SpeId,
    pub node: SlaveId,
}

/// An unassigned segment as the scheduler sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingSegment {
    pub segment_id: u64,
    pub file: String,
    /// Nodes holding a replica of the segment's file.
    pub replicas: BTreeSet<SlaveId>,
}

/// Assigns unassigned segments to idle SPEs.
///
/// Local pairings (an SPE on a node holding the file) come first. Among the
/// remaining choices a segment of a file with nothing in flight beats one of
/// a file already being processed, and otherwise stream order decides.
/// `active` counts in-flight segments per file and is updated in place.
pub fn schedule(
    pending: &[PendingSegment],
    idle: &[Spe],
    active: &mut BTreeMap<String, usize>,
) -> Vec<(u64, SpeId)> {
    let mut segs: Vec<&PendingSegment> = pending.iter().collect();
    segs.sort_by_key(|s| s.segment_id);
    let mut spes: Vec<Spe> = idle.to_vec();
    spes.sort();
    let mut out = Vec::new();
    while !segs.is_empty() && !spes.is_empty() {
        let busy = |s: &PendingSegment| active.get(&s.file).copied().unwrap_or(0) > 0;
        let mut best: Option<((bool, u64, SpeId), usize, usize)> = None;
        for (si, s) in segs.iter().enumerate() {
            for (pi, p) in spes.iter().enumerate() {
                if s.replicas.contains(&p.node) {
                    let key = (busy(s), s.segment_id, p.id);
                    if best.as_ref().is_none_or(|(k, _, _)| key < *k) {
                        best = Some((key, si, pi));
                    }
                }
            }
        }
        let (si, pi) = match best {
            Some((_, si, pi)) => (si, pi),
            None => {
                let si = segs.iter().position(|s| !busy(s)).unwrap_or(0);
                (si, 0)
            }
        };
        let s = segs.remove(si);
        let p = spes.remove(pi);
        *active.entry(s.file.clone()).or_default() += 1;
        out.push((s.segment_id, p.id));
    }
    out
}

/// A segment with at least one attempt in flight and no result yet.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningSegment {
    pub segment_id: u64,
    pub replicas: BTreeSet<SlaveId>,
    /// Start of the oldest live attempt.
    pub started: Time,
    /// Nodes running an attempt.
    pub nodes: BTreeSet<SlaveId>,
    /// Best completed fraction across attempts, in [0, 1].
    pub progress: f64,
}

impl RunningSegment {
    pub fn copies(&self) -> usize {
        self.nodes.len()
    }

    /// Remaining time extrapolated from the progress rate.
    pub fn estimated_remaining(&self, now: Time) -> Option<Duration> {
        if self.progress <= 0.0 {
            return None;
        }
        let elapsed = now.saturating_since(self.started).as_secs_f64();
        Some(Duration::from_secs_f64(
            elapsed * (1.0 - self.progress.min(1.0)) / self.progress,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeculationPolicy {
    /// Upper bound on concurrent attempts of one segment.
    pub max_copies: usize,
    /// When set, only segments expected to need longer than this are duplicated.
    /// A segment without progress qualifies once it has run twice this long.
    pub min_remaining: Option<Duration>,
}

impl Default for SpeculationPolicy {
    fn default() -> Self {
        Self {
            max_copies: 3,
            min_remaining: None,
        }
    }
}

/// Hands idle SPEs duplicates of in-flight segments.
///
/// Segments with fewer copies go first, so every candidate gets one
/// duplicate before any gets a second. Within that, a candidate with a
/// replica on the SPE's node wins, then the longest-running one, then the
/// lowest segment id. An SPE never duplicates a segment already running on
/// its node.
pub fn speculate(
    running: &[RunningSegment],
    idle: &[Spe],
    now: Time,
    policy: &SpeculationPolicy,
) -> Vec<(u64, SpeId)> {
    let mut cands: Vec<RunningSegment> = running
        .iter()
        .filter(|r| match policy.min_remaining {
            None => true,
            Some(min) => match r.estimated_remaining(now) {
                Some(rem) => rem > min,
                None => now.saturating_since(r.started) >= min * 2,
            },
        })
        .cloned()
        .collect();
    let mut spes = idle.to_vec();
    spes.sort();
    let mut out = Vec::new();
    for spe in spes {
        let pick = cands
            .iter()
            .enumerate()
            .filter(|(_, c)| c.copies() < policy.max_copies && !c.nodes.contains(&spe.node))
            .min_by_key(|(_, c)| (c.copies(), !c.replicas.contains(&spe.node), c.started, c.segment_id))
            .map(|(i, _)| i);
        if let Some(i) = pick {
            cands[i].nodes.insert(spe.node);
            out.push((cands[i].segment_id, spe.id));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(id: u64, file: &str, replicas: &[u32]) -> PendingSegment {
        PendingSegment {
            segment_id: id,
            file: file.into(),
            replicas: replicas.iter().map(|&r| SlaveId(r)).collect(),
        }
    }

    fn spe(id: u32, node: u32) -> Spe {
        Spe { id, node: SlaveId(node) }
    }

    #[test]
    fn local_spe_wins() {
        let out = schedule(&[seg(0, "A", &[1])], &[spe(0, 2), spe(1, 1)], &mut BTreeMap::new());
        assert_eq!(out, vec![(0, 1)]);
    }

    #[test]
    fn distinct_files_first_without_locality() {
        let p = [seg(0, "A", &[]), seg(1, "A", &[]), seg(2, "B", &[]), seg(3, "B", &[])];
        let out = schedule(&p, &[spe(0, 1), spe(1, 2)], &mut BTreeMap::new());
        assert_eq!(out, vec![(0, 0), (2, 1)]);
    }

    #[test]
    fn stream_order_leaves_extra_spe_idle() {
        let p = [seg(4, "A", &[]), seg(5, "A", &[])];
        let out = schedule(&p, &[spe(0, 1), spe(1, 2), spe(2, 3)], &mut BTreeMap::new());
        assert_eq!(out, vec![(4, 0), (5, 1)]);
    }

    #[test]
    fn active_file_yields_to_idle_file() {
        let mut active = BTreeMap::from([("A".to_string(), 1)]);
        let out = schedule(&[seg(1, "A", &[]), seg(7, "B", &[])], &[spe(0, 1)], &mut active);
        assert_eq!(out, vec![(7, 0)]);
    }

    fn running(id: u64, started: u64, nodes: &[u32], progress: f64) -> RunningSegment {
        RunningSegment {
            segment_id: id,
            replicas: BTreeSet::new(),
            started: Time::from_secs(started),
            nodes: nodes.iter().map(|&n| SlaveId(n)).collect(),
            progress,
        }
    }

    #[test]
    fn speculation_basics() {
        let now = Time::from_secs(100);
        let p = SpeculationPolicy::default();
        let one = [running(3, 10, &[1], 0.5)];
        assert_eq!(speculate(&one, &[spe(0, 2), spe(1, 3)], now, &p), vec![(3, 0), (3, 1)]);
        assert!(speculate(&one, &[], now, &p).is_empty());
        let two = [running(1, 50, &[1], 0.5), running(2, 20, &[2], 0.5)];
        assert_eq!(
            speculate(&two, &[spe(0, 3), spe(1, 4), spe(2, 5)], now, &p),
            vec![(2, 0), (1, 1), (2, 2)]
        );
    }

    #[test]
    fn estimate_threshold_skips_nearly_done_segments() {
        let now = Time::from_secs(20);
        let p = SpeculationPolicy {
            max_copies: 2,
            min_remaining: Some(Duration::from_secs(8)),
        };
        let r = [running(0, 10, &[1], 0.9), running(1, 10, &[2], 0.1), running(2, 15, &[3], 0.0)];
        assert_eq!(speculate(&r, &[spe(0, 4), spe(1, 5)], now, &p), vec![(1, 0)]);
        assert!(speculate(&r[2..], &[spe(0, 4)], Time::from_secs(23), &p).is_empty());
        let later = Time::from_secs(31);
        assert_eq!(speculate(&r[2..], &[spe(0, 4)], later, &p), vec![(2, 0)]);
    }

    /// Brute force: whether any (segment, spe) pair in the snapshot is local.
    fn has_local(p: &[PendingSegment], idle: &[Spe]) -> bool {
        p.iter().any(|s| idle.iter().any(|e| s.replicas.contains(&e.node)))
    }

    proptest! {
        #[test]
        fn local_pairing_whenever_feasible(
            reps in prop::collection::vec(prop::collection::btree_set(0u32..6, 0..3), 1..12),
            idle_nodes in prop::collection::vec(0u32..6, 1..8),
        ) {
            let pending: Vec<PendingSegment> = reps.iter().enumerate()
                .map(|(i, r)| seg(i as u64, &format!("f{}", i % 3), &r.iter().copied().collect::<Vec<_>>()))
                .collect();
            let idle: Vec<Spe> = idle_nodes.iter().enumerate().map(|(i, &n)| spe(i as u32, n)).collect();
            let out = schedule(&pending, &idle, &mut BTreeMap::new());
            prop_assert_eq!(out.len(), pending.len().min(idle.len()));
            let mut segs = BTreeSet::new();
            let mut used = BTreeSet::new();
            for (s, e) in &out {
                prop_assert!(segs.insert(*s));
                prop_assert!(used.insert(*e));
            }
            if has_local(&pending, &idle) {
                prop_assert!(out.iter().any(|(s, e)| pending[*s as usize].replicas.contains(&idle[*e as usize].node)));
            }
            let again = schedule(&pending, &idle, &mut BTreeMap::new());
            prop_assert_eq!(out, again);
        }
    }
}

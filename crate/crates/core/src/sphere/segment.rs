//! Splitting a stream into segments.

use thiserror::Error;

use crate::model::{Segment, SegmentExtent, SphereStream};

pub const DEFAULT_SMIN: u64 = 8 << 20;
pub const DEFAULT_SMAX: u64 = 128 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPolicy {
    pub spe_count: u64,
    pub smin: u64,
    pub smax: u64,
    pub per_file: bool,
}

impl SegmentPolicy {
    pub fn new(spe_count: u64) -> Self {
        Self {
            spe_count,
            smin: DEFAULT_SMIN,
            smax: DEFAULT_SMAX,
            per_file: false,
        }
    }

    /// Target segment size in bytes for a stream of `total` bytes.
    pub fn target(&self, total: u64) -> u64 {
        (total / self.spe_count.max(1)).clamp(self.smin, self.smax)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("{0} has no record index")]
    IndexRequired(String),
    #[error("S_min {0} exceeds S_max {1}")]
    BadBounds(u64, u64),
    #[error("S_min must be positive")]
    ZeroMin,
}

/// Cuts `stream` into segments numbered from 0 in stream order.
///
/// Each segment takes as many whole records as fit in the target size, at
/// least one. When that falls short of `smin` and one more record still fits
/// under `smax`, the extra record is taken. Empty files yield no segments.
pub fn segment_stream(stream: &SphereStream, policy: &SegmentPolicy, params: &[u8]) -> Result<Vec<Segment>, SegmentError> {
    if policy.smin == 0 {
        return Err(SegmentError::ZeroMin);
    }
    if policy.smin > policy.smax {
        return Err(SegmentError::BadBounds(policy.smin, policy.smax));
    }
    let mut out = Vec::new();
    let mut next_id = 0u64;
    let mut push = |file: &str, extent| {
        out.push(Segment {
            segment_id: next_id,
            file: file.to_string(),
            extent,
            params: params.to_vec(),
        });
        next_id += 1;
    };
    if policy.per_file {
        for f in stream.files() {
            if f.meta.size == 0 {
                continue;
            }
            push(
                &f.meta.path,
                SegmentExtent::WholeFile {
                    size: f.meta.size,
                    record_count: f.index.as_ref().map(|i| i.record_count()),
                },
            );
        }
        return Ok(out);
    }
    for f in stream.files() {
        if f.index.is_none() && f.meta.size > 0 {
            return Err(SegmentError::IndexRequired(f.meta.path.clone()));
        }
    }
    let target = policy.target(stream.total_size());
    for f in stream.files() {
        let Some(index) = &f.index else { continue };
        let offs = index.offsets();
        let n = index.record_count() as usize;
        let mut r = 0usize;
        while r < n {
            let base = offs[r];
            // Largest end with offs[end] - base <= target.
            let mut end = offs[r + 1..=n].partition_point(|&o| o - base <= target) + r;
            if end == r {
                end = r + 1;
            }
            if end < n && offs[end] - base < policy.smin && offs[end + 1] - base <= policy.smax {
                end += 1;
            }
            push(
                &f.meta.path,
                SegmentExtent::Records {
                    records: r as u64..end as u64,
                    bytes: base..offs[end],
                },
            );
            r = end;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FileMeta, RecordIndex, StreamFile};
    use proptest::prelude::*;

    fn file(path: &str, sizes: &[u64]) -> StreamFile {
        let index = RecordIndex::build(sizes.iter().copied()).unwrap();
        StreamFile {
            meta: FileMeta {
                path: path.into(),
                size: index.data_size(),
                record_count: Some(index.record_count()),
                replicas: Default::default(),
                timestamp: 0,
            },
            index: Some(index),
        }
    }

    fn fixed(path: &str, n: u64, w: u64) -> StreamFile {
        let index = RecordIndex::fixed_width(n, w).unwrap();
        StreamFile {
            meta: FileMeta {
                path: path.into(),
                size: n * w,
                record_count: Some(n),
                replicas: Default::default(),
                timestamp: 0,
            },
            index: Some(index),
        }
    }

    fn records(s: &Segment) -> std::ops::Range<u64> {
        match &s.extent {
            SegmentExtent::Records { records, .. } => records.clone(),
            _ => panic!("expected record extent"),
        }
    }

    #[test]
    fn gigabyte_over_ten_spes() {
        let stream = SphereStream::new(vec![fixed("/a", 10_000_000, 100)]);
        let segs = segment_stream(&stream, &SegmentPolicy::new(10), &[]).unwrap();
        assert_eq!(segs.len(), 10);
        assert!(segs.iter().all(|s| s.record_count() == Some(1_000_000)));
    }

    #[test]
    fn small_file_is_one_segment() {
        let stream = SphereStream::new(vec![fixed("/a", 4 * 1024 * 1024 / 64, 64)]);
        for spes in [1, 3, 64] {
            let segs = segment_stream(&stream, &SegmentPolicy::new(spes), &[]).unwrap();
            assert_eq!(segs.len(), 1);
            assert_eq!(segs[0].byte_len(), 4 << 20);
        }
    }

    #[test]
    fn empty_stream_and_per_file() {
        assert!(segment_stream(&SphereStream::default(), &SegmentPolicy::new(4), &[])
            .unwrap()
            .is_empty());
        let stream = SphereStream::new(vec![fixed("/a", 10, 10), fixed("/b", 20, 10), fixed("/c", 5, 10)]);
        let policy = SegmentPolicy {
            per_file: true,
            ..SegmentPolicy::new(4)
        };
        let segs = segment_stream(&stream, &policy, b"p").unwrap();
        assert_eq!(segs.len(), 3);
        assert!(matches!(segs[1].extent, SegmentExtent::WholeFile { size: 200, record_count: Some(20) }));
        assert_eq!(segs[2].params, b"p");
    }

    #[test]
    fn index_required_unless_per_file() {
        let mut f = fixed("/a", 10, 10);
        f.index = None;
        let stream = SphereStream::new(vec![f]);
        assert_eq!(
            segment_stream(&stream, &SegmentPolicy::new(2), &[]),
            Err(SegmentError::IndexRequired("/a".into()))
        );
        let policy = SegmentPolicy {
            per_file: true,
            ..SegmentPolicy::new(2)
        };
        assert_eq!(segment_stream(&stream, &policy, &[]).unwrap().len(), 1);
    }

    /// Reference segmenter: walks records one at a time.
    fn oracle(stream: &SphereStream, p: &SegmentPolicy) -> Vec<(String, u64, u64)> {
        let total: u64 = stream.files().iter().map(|f| f.meta.size).sum();
        let target = (total / p.spe_count).max(p.smin).min(p.smax);
        let mut out = Vec::new();
        for f in stream.files() {
            let sizes: Vec<u64> = f.index.as_ref().unwrap().record_sizes().collect();
            let mut i = 0;
            while i < sizes.len() {
                let mut j = i;
                let mut bytes = 0;
                while j < sizes.len() && (j == i || bytes + sizes[j] <= target) {
                    bytes += sizes[j];
                    j += 1;
                }
                if j < sizes.len() && bytes < p.smin && bytes + sizes[j] <= p.smax {
                    j += 1;
                }
                out.push((f.meta.path.clone(), i as u64, j as u64));
                i = j;
            }
        }
        out
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<u64>>, u64, u64, u64)> {
        (1u64..200, 0u64..400, 1u64..16).prop_flat_map(|(smin, span, spes)| {
            let smax = smin + span.max(30);
            let max_rec = (smax - smin).max(1);
            (
                prop::collection::vec(prop::collection::vec(1..=max_rec, 0..40), 1..6),
                Just(smin),
                Just(smax),
                Just(spes),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1200))]

        #[test]
        fn coverage_alignment_and_bounds((files, smin, smax, spes) in arb_case()) {
            let stream = SphereStream::new(
                files.iter().enumerate().map(|(i, s)| file(&format!("/f{i}"), s)).collect(),
            );
            let policy = SegmentPolicy { spe_count: spes, smin, smax, per_file: false };
            let segs = segment_stream(&stream, &policy, &[]).unwrap();
            let got: Vec<_> = segs.iter().map(|s| { let r = records(s); (s.file.clone(), r.start, r.end) }).collect();
            prop_assert_eq!(&got, &oracle(&stream, &policy));
            for (k, s) in segs.iter().enumerate() {
                prop_assert_eq!(s.segment_id, k as u64);
            }
            for f in stream.files() {
                let ix = f.index.as_ref().unwrap();
                let mine: Vec<&Segment> = segs.iter().filter(|s| s.file == f.meta.path).collect();
                let mut next = 0;
                for (k, s) in mine.iter().enumerate() {
                    let r = records(s);
                    prop_assert_eq!(r.start, next);
                    prop_assert!(r.end > r.start);
                    prop_assert_eq!(s.byte_range(), ix.byte_range(r.clone()).unwrap());
                    let last = k + 1 == mine.len();
                    if !last {
                        prop_assert!(s.byte_len() >= smin && s.byte_len() <= smax);
                    }
                    next = r.end;
                }
                prop_assert_eq!(next, ix.record_count());
            }
        }
    }
}

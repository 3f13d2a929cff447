//! Running a UDF over one segment's records.

use crate::model::{RecordIndex, Segment, SegmentExtent};
use crate::proto::{SegmentFailure, UdfFailure};

use super::udf::{Emits, Emitter, Granularity, Udf, UdfInput};

/// Output of a successful segment run.
#[derive(Debug)]
pub struct SegmentRun {
    pub records_in: u64,
    pub output: Emitter,
}

/// Splits segment bytes into records. Without an index the whole payload is one record.
pub fn split_records<'a>(data: &'a [u8], index: Option<&RecordIndex>) -> Result<Vec<&'a [u8]>, String> {
    match index {
        Some(ix) => ix.split(data).map_err(|e| e.to_string()),
        None if data.is_empty() => Ok(Vec::new()),
        None => Ok(vec![data]),
    }
}

/// Checks that `udf` may run on `segment` with the given bucket count.
pub fn validate(udf: &Udf, segment: &Segment, buckets: Option<u32>) -> Result<(), SegmentFailure> {
    let name = &udf.spec.name;
    match (udf.spec.emits, buckets) {
        (Emits::Local, None) => {}
        (Emits::Buckets, Some(b)) if b >= 1 => {}
        (Emits::Buckets, Some(_)) => {
            return Err(SegmentFailure::Resolve(format!("{name}: bucket count must be at least 1")))
        }
        (Emits::Local, Some(_)) => {
            return Err(SegmentFailure::Resolve(format!("{name}: writes local output, not buckets")))
        }
        (Emits::Buckets, None) => {
            return Err(SegmentFailure::Resolve(format!("{name}: needs a bucket count")))
        }
    }
    if udf.spec.granularity == Granularity::PerFile
        && !matches!(segment.extent, SegmentExtent::WholeFile { .. })
    {
        return Err(SegmentFailure::Resolve(format!(
            "{name}: per-file UDF needs whole-file segments"
        )));
    }
    Ok(())
}

/// Applies `udf` to a segment. `index` is segment-relative.
pub fn run_segment(
    udf: &Udf,
    segment: &Segment,
    data: &[u8],
    index: Option<&RecordIndex>,
    buckets: Option<u32>,
) -> Result<SegmentRun, SegmentFailure> {
    validate(udf, segment, buckets)?;
    let records = split_records(data, index).map_err(SegmentFailure::Io)?;
    let mut out = match buckets {
        Some(b) => Emitter::buckets(b),
        None => Emitter::local(),
    };
    let group = match udf.spec.granularity {
        Granularity::PerRecord => 1,
        Granularity::PerGroup(n) => n.max(1) as usize,
        Granularity::PerSegment | Granularity::PerFile => records.len().max(1),
    };
    let mut base = 0u64;
    for unit in records.chunks(group) {
        let input = UdfInput {
            file: &segment.file,
            segment_id: segment.segment_id,
            params: &segment.params,
            records: unit,
        };
        if let Err(e) = (udf.func)(&input, &mut out) {
            let rel = e.record.min(unit.len().saturating_sub(1) as u64);
            return Err(SegmentFailure::Udf(UdfFailure {
                segment_id: segment.segment_id,
                record: base + rel,
                message: e.message,
            }));
        }
        base += unit.len() as u64;
    }
    Ok(SegmentRun {
        records_in: records.len() as u64,
        output: out,
    })
}

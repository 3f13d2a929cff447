//! Terasort as two Sphere stages: range-partition by key prefix into
//! buckets, then sort each bucket.

use crate::sphere::{Emits, Emitter, Granularity, UdfError, UdfInput, UdfRegistry, UdfSpec};

use super::gensort::{KEY, RECORD};

pub const HASH: &str = "terasort.hash";
pub const SORT: &str = "terasort.sort";

/// Bucket of a key. One prefix byte for up to 256 buckets, two beyond that.
pub fn bucket_of(key: &[u8], buckets: u32) -> u32 {
    let b = buckets.max(1) as u64;
    if b <= 256 {
        (key[0] as u64 * b / 256) as u32
    } else {
        let p = ((key[0] as u64) << 8) | key.get(1).copied().unwrap_or(0) as u64;
        (p * b / 65536) as u32
    }
}

fn hash(input: &UdfInput<'_>, out: &mut Emitter) -> Result<(), UdfError> {
    let b = out.bucket_count();
    for (i, rec) in input.records.iter().enumerate() {
        if rec.len() != RECORD {
            return Err(UdfError::new(i as u64, format!("record of {} bytes", rec.len())));
        }
        out.emit_to(bucket_of(rec, b), rec).map_err(|e| UdfError::new(i as u64, e))?;
    }
    Ok(())
}

/// Splits records into fixed-width sort records, rejecting misaligned input.
pub fn fixed_records<'a>(records: &[&'a [u8]]) -> Result<Vec<&'a [u8]>, UdfError> {
    let mut out = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        if rec.len() % RECORD != 0 {
            return Err(UdfError::new(i as u64, format!("{} bytes is not a multiple of {RECORD}", rec.len())));
        }
        out.extend(rec.chunks_exact(RECORD));
    }
    Ok(out)
}

fn sort(input: &UdfInput<'_>, out: &mut Emitter) -> Result<(), UdfError> {
    let mut recs = fixed_records(input.records)?;
    recs.sort_by(|a, b| a[..KEY].cmp(&b[..KEY]));
    for r in recs {
        out.emit(r).map_err(|e| UdfError::new(0, e))?;
    }
    Ok(())
}

pub fn register(r: &mut UdfRegistry) {
    r.register(UdfSpec::new(HASH, Granularity::PerRecord, Emits::Buckets), hash)
        .expect("unique name");
    r.register(UdfSpec::new(SORT, Granularity::PerSegment, Emits::Local), sort)
        .expect("unique name");
}

/// Serial oracle: every record of `data`, stably sorted by key.
pub fn reference_sort(data: &[u8]) -> Vec<u8> {
    let mut recs: Vec<&[u8]> = data.chunks_exact(RECORD).collect();
    recs.sort_by(|a, b| a[..KEY].cmp(&b[..KEY]));
    recs.concat()
}

//! Deterministic sort-benchmark input: 100-byte records, a 10-byte key and a
//! 90-byte value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::RecordIndex;

pub const RECORD: usize = 100;
pub const KEY: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenError {
    #[error("{0} bytes is not a whole number of {RECORD}-byte records")]
    NotAligned(u64),
}

/// One node's generated slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub node: usize,
    pub path: String,
    pub data: Vec<u8>,
    pub index: RecordIndex,
}

pub fn slice_path(dir: &str, node: usize) -> String {
    format!("{}/part-{node:04}.dat", dir.trim_end_matches('/'))
}

/// Generates `bytes` of records for `node` from `seed`.
pub fn generate(node: usize, bytes: u64, seed: u64) -> Result<Vec<u8>, GenError> {
    if !bytes.is_multiple_of(RECORD as u64) {
        return Err(GenError::NotAligned(bytes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = bytes as usize / RECORD;
    let mut out = vec![0u8; bytes as usize];
    for (i, rec) in out.chunks_exact_mut(RECORD).enumerate() {
        rng.fill(&mut rec[..KEY]);
        let tag = format!("{node:04}{i:012}");
        rec[KEY..KEY + tag.len()].copy_from_slice(tag.as_bytes());
        for b in &mut rec[KEY + tag.len()..RECORD - 1] {
            *b = b'A' + rng.gen_range(0..26);
        }
        rec[RECORD - 1] = b'\n';
    }
    debug_assert_eq!(out.len(), n * RECORD);
    Ok(out)
}

/// One slice per node under `dir`.
pub fn gen_sort_data(nodes: usize, bytes_per_node: u64, seed: u64, dir: &str) -> Result<Vec<Slice>, GenError> {
    (0..nodes)
        .map(|node| {
            let data = generate(node, bytes_per_node, seed)?;
            let index = RecordIndex::fixed_width(bytes_per_node / RECORD as u64, RECORD as u64).expect("aligned");
            Ok(Slice {
                node,
                path: slice_path(dir, node),
                data,
                index,
            })
        })
        .collect()
}

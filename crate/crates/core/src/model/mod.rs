//! Shared domain types used by every node role.

mod index;
mod topology;

use std::collections::BTreeSet;
use std::fmt;
use std::net::SocketAddr;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{index_path, is_index_path, RecordIndex, INDEX_SUFFIX};
pub use topology::{location_distance, Location, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("record {0} has zero size")]
    ZeroSizeRecord(u64),
    #[error("index offsets overflow u64")]
    IndexOverflow,
    #[error("malformed index: {0}")]
    MalformedIndex(String),
    #[error("size mismatch: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("topology: {0}")]
    Topology(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("invalid path `{0}`")]
    InvalidPath(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlaveId(pub u32);

impl fmt::Display for SlaveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "slave-{}", self.0)
    }
}

/// Metadata for one slice as held by the master.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub path: String,
    pub size: u64,
    pub record_count: Option<u64>,
    pub replicas: BTreeSet<SlaveId>,
    pub timestamp: u64,
}

impl FileMeta {
    pub fn has_index(&self) -> bool {
        self.record_count.is_some()
    }
}

/// Load and capacity report for one slave.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlaveStatus {
    pub id: SlaveId,
    pub address: SocketAddr,
    pub data_address: SocketAddr,
    pub location: Option<Location>,
    pub free_disk: u64,
    pub active_transfers: u32,
    pub spe_count: u32,
    pub alive: bool,
}

/// Which part of a file a segment covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentExtent {
    /// Records `[first, last)`, occupying `bytes` in the data file.
    Records { records: Range<u64>, bytes: Range<u64> },
    /// The whole file, processed as one unit.
    WholeFile { size: u64, record_count: Option<u64> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: u64,
    pub file: String,
    pub extent: SegmentExtent,
    pub params: Vec<u8>,
}

impl Segment {
    pub fn byte_len(&self) -> u64 {
        match &self.extent {
            SegmentExtent::Records { bytes, .. } => bytes.end - bytes.start,
            SegmentExtent::WholeFile { size, .. } => *size,
        }
    }

    pub fn byte_range(&self) -> Range<u64> {
        match &self.extent {
            SegmentExtent::Records { bytes, .. } => bytes.clone(),
            SegmentExtent::WholeFile { size, .. } => 0..*size,
        }
    }

    pub fn record_count(&self) -> Option<u64> {
        match &self.extent {
            SegmentExtent::Records { records, .. } => Some(records.end - records.start),
            SegmentExtent::WholeFile { record_count, .. } => *record_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamFile {
    pub meta: FileMeta,
    pub index: Option<RecordIndex>,
}

/// Ordered collection of slice files used as the input or output of a stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereStream {
    files: Vec<StreamFile>,
}

impl SphereStream {
    pub fn new(files: Vec<StreamFile>) -> Self {
        Self { files }
    }

    pub fn files(&self) -> &[StreamFile] {
        &self.files
    }

    pub fn push(&mut self, file: StreamFile) {
        self.files.push(file);
    }

    pub fn total_size(&self) -> u64 {
        self.files.iter().map(|f| f.meta.size).sum()
    }

    /// Sum of record counts, absent when any member has no index.
    pub fn total_records(&self) -> Option<u64> {
        self.files
            .iter()
            .map(|f| f.meta.record_count)
            .sum::<Option<u64>>()
    }

    pub fn paths(&self) -> Vec<String> {
        self.files.iter().map(|f| f.meta.path.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }
}

/// Normalizes a logical path to `/a/b/c` form, rejecting `..`, `.` and index names.
pub fn normalize_path(path: &str) -> Result<String, ModelError> {
    let mut parts = Vec::new();
    for comp in path.split('/') {
        match comp {
            "" => continue,
            "." | ".." => return Err(ModelError::InvalidPath(path.to_string())),
            c if c.contains('\0') => return Err(ModelError::InvalidPath(path.to_string())),
            c => parts.push(c),
        }
    }
    if parts.is_empty() {
        return Ok("/".to_string());
    }
    let out = format!("/{}", parts.join("/"));
    if out.ends_with(INDEX_SUFFIX) {
        return Err(ModelError::InvalidPath(path.to_string()));
    }
    Ok(out)
}

/// True when `prefix` names `path` itself or one of its ancestor directories.
pub fn path_has_prefix(path: &str, prefix: &str) -> bool {
    let prefix = prefix.trim_end_matches('/');
    if prefix.is_empty() {
        return path.starts_with('/');
    }
    match path.strip_prefix(prefix) {
        Some(rest) => rest.is_empty() || rest.starts_with('/'),
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize() {
        assert_eq!(normalize_path("data//a.dat").unwrap(), "/data/a.dat");
        assert_eq!(normalize_path("/").unwrap(), "/");
        assert!(normalize_path("/data/../etc").is_err());
        assert!(normalize_path("/data/a.dat.idx").is_err());
    }

    #[test]
    fn component_prefix() {
        assert!(path_has_prefix("/data/a.dat", "/data"));
        assert!(path_has_prefix("/data", "/data"));
        assert!(path_has_prefix("/data/a", "/"));
        assert!(!path_has_prefix("/database/x", "/data"));
    }

    #[test]
    fn stream_totals() {
        let meta = |p: &str, size, rc| FileMeta {
            path: p.into(),
            size,
            record_count: rc,
            replicas: BTreeSet::new(),
            timestamp: 0,
        };
        let mut s = SphereStream::default();
        s.push(StreamFile { meta: meta("/a", 100, Some(10)), index: None });
        s.push(StreamFile { meta: meta("/b", 50, Some(5)), index: None });
        assert_eq!(s.total_size(), 150);
        assert_eq!(s.total_records(), Some(15));
        s.push(StreamFile { meta: meta("/c", 7, None), index: None });
        assert_eq!(s.total_records(), None);
    }
}

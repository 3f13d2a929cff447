//! User-defined function registry.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::model::RecordIndex;

/// How many records one UDF invocation sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerRecord,
    /// Groups of `n` records; the last group may be short.
    PerGroup(u64),
    PerSegment,
    /// The whole file; only valid when segments cover whole files.
    PerFile,
}

/// Where a UDF's output goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emits {
    Local,
    Buckets,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdfSpec {
    pub name: String,
    pub granularity: Granularity,
    pub emits: Emits,
}

impl UdfSpec {
    pub fn new(name: impl Into<String>, granularity: Granularity, emits: Emits) -> Self {
        Self {
            name: name.into(),
            granularity,
            emits,
        }
    }
}

/// One invocation's view of its input.
pub struct UdfInput<'a> {
    /// Logical path of the file the records come from.
    pub file: &'a str,
    pub segment_id: u64,
    pub params: &'a [u8],
    pub records: &'a [&'a [u8]],
}

impl UdfInput<'_> {
    /// File name without directories or extension.
    pub fn page_name(&self) -> &str {
        let base = self.file.rsplit('/').next().unwrap_or(self.file);
        match base.rfind('.') {
            Some(0) | None => base,
            Some(i) => &base[..i],
        }
    }
}

/// A UDF failure. `record` is relative to the invocation's first record.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("record {record}: {message}")]
pub struct UdfError {
    pub record: u64,
    pub message: String,
}

impl UdfError {
    pub fn new(record: u64, message: impl Into<String>) -> Self {
        Self {
            record,
            message: message.into(),
        }
    }
}

/// Output of a bucketed UDF for one bucket.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BucketData {
    pub data: Vec<u8>,
    pub index: RecordIndex,
}

impl BucketData {
    fn push(&mut self, rec: &[u8]) {
        self.data.extend_from_slice(rec);
        self.index
            .push_record(rec.len() as u64)
            .expect("empty records rejected before push");
    }
}

/// Collects UDF output records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emitter {
    bucket_count: Option<u32>,
    local: BucketData,
    buckets: BTreeMap<u32, BucketData>,
    records_out: u64,
}

impl Emitter {
    pub fn local() -> Self {
        Self {
            bucket_count: None,
            local: BucketData::default(),
            buckets: BTreeMap::new(),
            records_out: 0,
        }
    }

    pub fn buckets(count: u32) -> Self {
        Self {
            bucket_count: Some(count),
            ..Self::local()
        }
    }

    /// Bucket count, or 0 for local output.
    pub fn bucket_count(&self) -> u32 {
        self.bucket_count.unwrap_or(0)
    }

    /// Appends a record to the local result file.
    pub fn emit(&mut self, rec: &[u8]) -> Result<(), String> {
        if self.bucket_count.is_some() {
            return Err("local emit from a bucketed UDF".into());
        }
        if rec.is_empty() {
            return Err("empty output record".into());
        }
        self.local.push(rec);
        self.records_out += 1;
        Ok(())
    }

    /// Routes a record to `bucket`.
    pub fn emit_to(&mut self, bucket: u32, rec: &[u8]) -> Result<(), String> {
        let count = self.bucket_count.ok_or("bucket emit from a local-output UDF")?;
        if bucket >= count {
            return Err(format!("bucket {bucket} out of range 0..{count}"));
        }
        if rec.is_empty() {
            return Err("empty output record".into());
        }
        self.buckets.entry(bucket).or_default().push(rec);
        self.records_out += 1;
        Ok(())
    }

    pub fn records_out(&self) -> u64 {
        self.records_out
    }

    pub fn local_output(&self) -> &BucketData {
        &self.local
    }

    pub fn into_local(self) -> BucketData {
        self.local
    }

    /// Non-empty buckets.
    pub fn bucket_output(&self) -> &BTreeMap<u32, BucketData> {
        &self.buckets
    }

    pub fn into_buckets(self) -> BTreeMap<u32, BucketData> {
        self.buckets
    }
}

pub type UdfFn = dyn Fn(&UdfInput<'_>, &mut Emitter) -> Result<(), UdfError> + Send + Sync;

#[derive(Clone)]
pub struct Udf {
    pub spec: UdfSpec,
    pub func: Arc<UdfFn>,
}

impl fmt::Debug for Udf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Udf").field("spec", &self.spec).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("UDF `{0}` already registered")]
    Duplicate(String),
    #[error("no UDF named `{0}`")]
    Unknown(String),
    #[error("UDF `{0}`: group size must be at least 1")]
    BadGroup(String),
}

#[derive(Debug, Clone, Default)]
pub struct UdfRegistry {
    entries: BTreeMap<String, Udf>,
}

impl UdfRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, spec: UdfSpec, func: F) -> Result<(), RegistryError>
    where
        F: Fn(&UdfInput<'_>, &mut Emitter) -> Result<(), UdfError> + Send + Sync + 'static,
    {
        if self.entries.contains_key(&spec.name) {
            return Err(RegistryError::Duplicate(spec.name));
        }
        if spec.granularity == Granularity::PerGroup(0) {
            return Err(RegistryError::BadGroup(spec.name));
        }
        let udf = Udf {
            spec: spec.clone(),
            func: Arc::new(func),
        };
        self.entries.insert(spec.name, udf);
        Ok(())
    }

    pub fn resolve(&self, name: &str) -> Result<&Udf, RegistryError> {
        self.entries
            .get(name)
            .ok_or_else(|| RegistryError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brown_dwarf(input: &UdfInput<'_>, out: &mut Emitter) -> Result<(), UdfError> {
        for r in input.records {
            if r.first() == Some(&b'B') {
                out.emit(r).map_err(|e| UdfError::new(0, e))?;
            }
        }
        Ok(())
    }

    #[test]
    fn register_and_resolve() {
        let mut reg = UdfRegistry::new();
        let spec = UdfSpec::new("findBrownDwarf", Granularity::PerRecord, Emits::Local);
        reg.register(spec.clone(), brown_dwarf).unwrap();
        assert_eq!(reg.resolve("findBrownDwarf").unwrap().spec, spec);
        assert_eq!(
            reg.register(spec, brown_dwarf),
            Err(RegistryError::Duplicate("findBrownDwarf".into()))
        );
        assert_eq!(
            reg.resolve("nope").unwrap_err(),
            RegistryError::Unknown("nope".into())
        );
    }

    #[test]
    fn emitter_checks_mode_and_range() {
        let mut local = Emitter::local();
        assert!(local.emit(b"x").is_ok());
        assert!(local.emit_to(0, b"x").is_err());
        assert!(local.emit(b"").is_err());
        let mut b = Emitter::buckets(4);
        assert!(b.emit_to(3, b"x").is_ok());
        assert!(b.emit_to(4, b"x").is_err());
        assert!(b.emit(b"x").is_err());
        assert_eq!(b.records_out(), 1);
        assert_eq!(b.bucket_output()[&3].index.offsets(), &[0, 1]);
    }

    #[test]
    fn page_name_strips_dirs_and_extension() {
        let input = UdfInput {
            file: "/web/w1.html",
            segment_id: 0,
            params: &[],
            records: &[],
        };
        assert_eq!(input.page_name(), "w1");
    }
}

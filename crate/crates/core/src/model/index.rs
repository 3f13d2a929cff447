//! Record index: byte offsets of every record in a slice file.
//!
//! A file with N records has N+1 offsets. Entry 0 is always 0 and the final
//! entry equals the file size, so record `i` occupies `[offsets[i], offsets[i+1])`.
//! On disk the index lives next to the data file with an `.idx` suffix and is a
//! headerless run of big-endian `u64` values.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Suffix appended to a data file name to name its index.
pub const INDEX_SUFFIX: &str = ".idx";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordIndex {
    offsets: Vec<u64>,
}

impl Default for RecordIndex {
    fn default() -> Self {
        Self { offsets: vec![0] }
    }
}

impl RecordIndex {
    /// Builds an index from record sizes. Every record must occupy at least one byte.
    pub fn build<I>(record_sizes: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = u64>,
    {
        let iter = record_sizes.into_iter();
        let mut offsets = Vec::with_capacity(iter.size_hint().0 + 1);
        offsets.push(0u64);
        let mut end = 0u64;
        for (i, size) in iter.enumerate() {
            if size == 0 {
                return Err(ModelError::ZeroSizeRecord(i as u64));
            }
            end = end
                .checked_add(size)
                .ok_or(ModelError::IndexOverflow)?;
            offsets.push(end);
        }
        Ok(Self { offsets })
    }

    /// Index of `count` records of `width` bytes each.
    pub fn fixed_width(count: u64, width: u64) -> Result<Self, ModelError> {
        if width == 0 && count > 0 {
            return Err(ModelError::ZeroSizeRecord(0));
        }
        Ok(Self {
            offsets: (0..=count).map(|i| i * width).collect(),
        })
    }

    /// Validates raw offsets: leading zero, non-decreasing, no empty records.
    pub fn from_offsets(offsets: Vec<u64>) -> Result<Self, ModelError> {
        match offsets.first() {
            None => return Err(ModelError::MalformedIndex("no offsets".into())),
            Some(&first) if first != 0 => {
                return Err(ModelError::MalformedIndex(format!(
                    "first offset is {first}, expected 0"
                )))
            }
            _ => {}
        }
        if let Some(pos) = offsets.windows(2).position(|w| w[1] <= w[0]) {
            return Err(ModelError::MalformedIndex(format!(
                "offset {} is not greater than offset {}",
                pos + 1,
                pos
            )));
        }
        Ok(Self { offsets })
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn record_count(&self) -> u64 {
        (self.offsets.len() - 1) as u64
    }

    /// Total bytes covered, i.e. the size of the data file.
    pub fn data_size(&self) -> u64 {
        *self.offsets.last().expect("index always has a leading zero")
    }

    pub fn record_range(&self, record: u64) -> Option<Range<u64>> {
        let i = usize::try_from(record).ok()?;
        if i + 1 >= self.offsets.len() {
            return None;
        }
        Some(self.offsets[i]..self.offsets[i + 1])
    }

    /// Byte range covering records `[first, last)`.
    pub fn byte_range(&self, records: Range<u64>) -> Option<Range<u64>> {
        if records.start > records.end || records.end > self.record_count() {
            return None;
        }
        Some(self.offsets[records.start as usize]..self.offsets[records.end as usize])
    }

    pub fn record_sizes(&self) -> impl Iterator<Item = u64> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }

    /// Index for records `[first, last)`, rebased so the first record starts at 0.
    pub fn slice(&self, records: Range<u64>) -> Option<RecordIndex> {
        if records.start > records.end || records.end > self.record_count() {
            return None;
        }
        let base = self.offsets[records.start as usize];
        Some(RecordIndex {
            offsets: self.offsets[records.start as usize..=records.end as usize]
                .iter()
                .map(|o| o - base)
                .collect(),
        })
    }

    /// Appends the records of `other` after the records of `self`.
    pub fn extend(&mut self, other: &RecordIndex) {
        let base = self.data_size();
        self.offsets
            .extend(other.offsets[1..].iter().map(|o| o + base));
    }

    pub fn push_record(&mut self, size: u64) -> Result<(), ModelError> {
        if size == 0 {
            return Err(ModelError::ZeroSizeRecord(self.record_count()));
        }
        let end = self.data_size() + size;
        self.offsets.push(end);
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.offsets.len() * 8);
        for o in &self.offsets {
            out.extend_from_slice(&o.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        if !bytes.len().is_multiple_of(8) {
            return Err(ModelError::MalformedIndex(format!(
                "length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let offsets = bytes
            .chunks_exact(8)
            .map(|c| u64::from_be_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_offsets(offsets)
    }

    /// Splits `data` into record slices. `data` must be exactly the bytes the index covers.
    pub fn split<'a>(&self, data: &'a [u8]) -> Result<Vec<&'a [u8]>, ModelError> {
        if data.len() as u64 != self.data_size() {
            return Err(ModelError::SizeMismatch {
                expected: self.data_size(),
                actual: data.len() as u64,
            });
        }
        Ok(self
            .offsets
            .windows(2)
            .map(|w| &data[w[0] as usize..w[1] as usize])
            .collect())
    }
}

/// Path of the index file that belongs to `data_path`.
pub fn index_path(data_path: &Path) -> PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(INDEX_SUFFIX);
    PathBuf::from(s)
}

pub fn is_index_path(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(INDEX_SUFFIX))
}

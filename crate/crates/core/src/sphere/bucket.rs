//! Bucket handler: appends shuffled segment output to a bucket file, once per segment.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::model::RecordIndex;
use crate::proto::Verdict;
use crate::transport::ChannelId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    InFlight { attempt: u32, channel: ChannelId },
    Stored { attempt: u32 },
}

/// One bucket's growing file and the per-segment claims on it.
#[derive(Debug)]
pub struct BucketFile {
    path: PathBuf,
    index: RecordIndex,
    claims: BTreeMap<u64, Claim>,
}

impl BucketFile {
    /// Creates (or truncates) the file at `path`.
    pub fn create(path: PathBuf) -> io::Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        File::create(&path)?;
        Ok(Self {
            path,
            index: RecordIndex::default(),
            claims: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn index(&self) -> &RecordIndex {
        &self.index
    }

    pub fn size(&self) -> u64 {
        self.index.data_size()
    }

    pub fn claim(&self, segment: u64) -> Option<Claim> {
        self.claims.get(&segment).copied()
    }

    pub fn stored_segments(&self) -> impl Iterator<Item = u64> + '_ {
        self.claims
            .iter()
            .filter(|(_, c)| matches!(c, Claim::Stored { .. }))
            .map(|(s, _)| *s)
    }

    /// Decides whether an incoming transfer for `(segment, attempt)` may proceed.
    pub fn offer(&mut self, segment: u64, attempt: u32, channel: ChannelId) -> Verdict {
        match self.claims.get(&segment) {
            Some(Claim::Stored { .. }) => Verdict::Duplicate,
            Some(Claim::InFlight { attempt: a, channel: c }) if *a == attempt && *c == channel => Verdict::Accept,
            Some(Claim::InFlight { .. }) => Verdict::Busy,
            None => {
                self.claims.insert(segment, Claim::InFlight { attempt, channel });
                Verdict::Accept
            }
        }
    }

    /// Appends a completed transfer. Returns false when the claim does not
    /// match, in which case nothing is written.
    pub fn complete(&mut self, segment: u64, attempt: u32, data: &[u8], index: &RecordIndex) -> io::Result<bool> {
        match self.claims.get(&segment) {
            Some(Claim::InFlight { attempt: a, .. }) if *a == attempt => {}
            _ => return Ok(false),
        }
        if index.data_size() != data.len() as u64 {
            self.claims.remove(&segment);
            return Err(io::Error::new(io::ErrorKind::InvalidData, "index does not cover payload"));
        }
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        if let Err(e) = f.write_all(data) {
            let _ = f.set_len(self.index.data_size());
            self.claims.remove(&segment);
            return Err(e);
        }
        self.index.extend(index);
        self.claims.insert(segment, Claim::Stored { attempt });
        Ok(true)
    }

    /// Releases an in-flight claim after a failed transfer.
    pub fn abandon(&mut self, segment: u64, attempt: u32) {
        if matches!(self.claims.get(&segment), Some(Claim::InFlight { attempt: a, .. }) if *a == attempt) {
            self.claims.remove(&segment);
        }
    }

    /// Writes the index next to the data file and moves both to `dest`.
    pub fn finalize(&self, dest: &Path) -> io::Result<()> {
        if let Some(dir) = dest.parent() {
            fs::create_dir_all(dir)?;
        }
        let idx = crate::model::index_path(dest);
        let tmp_idx = crate::model::index_path(&self.path);
        fs::write(&tmp_idx, self.index.encode())?;
        fs::rename(&self.path, dest)?;
        fs::rename(&tmp_idx, idx)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ix(sizes: &[u64]) -> RecordIndex {
        RecordIndex::build(sizes.iter().copied()).unwrap()
    }

    #[test]
    fn second_attempt_for_same_segment_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = BucketFile::create(dir.path().join("b0")).unwrap();
        assert_eq!(b.offer(5, 1, 100), Verdict::Accept);
        assert_eq!(b.offer(5, 2, 101), Verdict::Busy);
        assert!(b.complete(5, 1, b"aaaa", &ix(&[2, 2])).unwrap());
        assert_eq!(b.offer(5, 2, 101), Verdict::Duplicate);
        assert!(!b.complete(5, 2, b"bbbb", &ix(&[4])).unwrap());
        assert_eq!(fs::read(b.path()).unwrap(), b"aaaa");
        assert_eq!(b.index().offsets(), &[0, 2, 4]);
    }

    #[test]
    fn interleaved_segments_stay_contiguous_in_arrival_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = BucketFile::create(dir.path().join("b1")).unwrap();
        assert_eq!(b.offer(1, 1, 10), Verdict::Accept);
        assert_eq!(b.offer(2, 1, 11), Verdict::Accept);
        b.complete(2, 1, b"222222", &ix(&[3, 3])).unwrap();
        b.complete(1, 1, b"11", &ix(&[1, 1])).unwrap();
        assert_eq!(fs::read(b.path()).unwrap(), b"22222211");
        assert_eq!(b.index().offsets(), &[0, 3, 6, 7, 8]);
        assert_eq!(b.stored_segments().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn abandoned_claim_can_be_retaken() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = BucketFile::create(dir.path().join("b")).unwrap();
        assert_eq!(b.offer(9, 1, 1), Verdict::Accept);
        assert_eq!(b.offer(9, 1, 1), Verdict::Accept);
        b.abandon(9, 1);
        assert_eq!(b.offer(9, 2, 2), Verdict::Accept);
        assert!(b.complete(9, 2, b"x", &ix(&[1])).unwrap());
    }

    #[test]
    fn zero_writes_leave_an_empty_bucket_file() {
        let dir = tempfile::tempdir().unwrap();
        let b = BucketFile::create(dir.path().join("tmp/b")).unwrap();
        let dest = dir.path().join("out/7.bucket.3");
        b.finalize(&dest).unwrap();
        assert_eq!(fs::metadata(&dest).unwrap().len(), 0);
        let idx = RecordIndex::decode(&fs::read(crate::model::index_path(&dest)).unwrap()).unwrap();
        assert_eq!(idx.record_count(), 0);
    }
}

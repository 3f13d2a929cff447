//! Slices stored as whole native files under a root directory.

use std::fs;
use std::io;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use thiserror::Error;

use crate::model::{index_path, is_index_path, normalize_path, RecordIndex, INDEX_SUFFIX};
use crate::proto::ScanEntry;

/// Top-level directories with this prefix hold slave-private scratch data.
pub const RESERVED_PREFIX: &str = ".sector-";

const DEFAULT_CAPACITY: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid path `{0}`")]
    InvalidPath(String),
    #[error("{0}: no such slice")]
    NotFound(String),
    #[error("range {start}..{end} beyond size {size}")]
    Range { start: u64, end: u64, size: u64 },
    #[error("disk full: need {need} bytes, {free} free")]
    DiskFull { need: u64, free: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct SliceStore {
    root: PathBuf,
    capacity: u64,
}

impl SliceStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            capacity: DEFAULT_CAPACITY,
        })
    }

    pub fn with_capacity(mut self, bytes: u64) -> Self {
        self.capacity = bytes;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Native path of a logical slice name.
    pub fn local_path(&self, logical: &str) -> Result<PathBuf, StoreError> {
        let norm = normalize_path(logical).map_err(|_| StoreError::InvalidPath(logical.into()))?;
        let rel = norm.trim_start_matches('/');
        if rel.is_empty() || rel.starts_with(RESERVED_PREFIX) {
            return Err(StoreError::InvalidPath(logical.into()));
        }
        Ok(self.root.join(rel))
    }

    /// Scratch directory for `name`, outside the logical namespace.
    pub fn scratch(&self, name: &str) -> io::Result<PathBuf> {
        let dir = self.root.join(format!("{RESERVED_PREFIX}{name}"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Every slice under the root, sorted by path, plus warnings about bad indexes.
    pub fn scan(&self) -> (Vec<ScanEntry>, Vec<String>) {
        let mut entries = Vec::new();
        let mut warnings = Vec::new();
        self.walk(&self.root, "", &mut entries, &mut warnings);
        entries.sort();
        (entries, warnings)
    }

    fn walk(&self, dir: &Path, prefix: &str, entries: &mut Vec<ScanEntry>, warnings: &mut Vec<String>) {
        let rd = match fs::read_dir(dir) {
            Ok(rd) => rd,
            Err(e) => {
                warnings.push(format!("{}: {e}", dir.display()));
                return;
            }
        };
        for ent in rd.flatten() {
            let Some(name) = ent.file_name().to_str().map(str::to_owned) else {
                warnings.push(format!("{}: non-UTF-8 name skipped", ent.path().display()));
                continue;
            };
            if prefix.is_empty() && name.starts_with(RESERVED_PREFIX) {
                continue;
            }
            let logical = format!("{prefix}/{name}");
            let path = ent.path();
            let Ok(ft) = ent.file_type() else { continue };
            if ft.is_dir() {
                self.walk(&path, &logical, entries, warnings);
            } else if ft.is_file() && !is_index_path(&path) {
                if normalize_path(&logical).as_deref() != Ok(logical.as_str()) {
                    warnings.push(format!("{logical}: not a valid slice name"));
                    continue;
                }
                match self.entry_at(&logical, &path) {
                    Ok((e, w)) => {
                        warnings.extend(w);
                        entries.push(e);
                    }
                    Err(e) => warnings.push(format!("{logical}: {e}")),
                }
            }
        }
    }

    fn entry_at(&self, logical: &str, path: &Path) -> io::Result<(ScanEntry, Option<String>)> {
        let md = fs::metadata(path)?;
        let size = md.len();
        let timestamp = md
            .modified()
            .ok()
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_secs());
        let idx = index_path(path);
        let mut warning = None;
        let record_count = if idx.exists() {
            match fs::read(&idx).map_err(|e| e.to_string()).and_then(|b| RecordIndex::decode(&b).map_err(|e| e.to_string())) {
                Ok(ix) if ix.data_size() == size => Some(ix.record_count()),
                Ok(ix) => {
                    warning = Some(format!(
                        "{logical}{INDEX_SUFFIX}: final offset {} does not match size {size}",
                        ix.data_size()
                    ));
                    None
                }
                Err(e) => {
                    warning = Some(format!("{logical}{INDEX_SUFFIX}: {e}"));
                    None
                }
            }
        } else {
            None
        };
        Ok((
            ScanEntry {
                path: logical.to_string(),
                size,
                record_count,
                timestamp,
            },
            warning,
        ))
    }

    pub fn entry(&self, logical: &str) -> Result<ScanEntry, StoreError> {
        let path = self.local_path(logical)?;
        if !path.is_file() {
            return Err(StoreError::NotFound(logical.into()));
        }
        let norm = normalize_path(logical).map_err(|_| StoreError::InvalidPath(logical.into()))?;
        Ok(self.entry_at(&norm, &path)?.0)
    }

    pub fn contains(&self, logical: &str) -> bool {
        self.local_path(logical).is_ok_and(|p| p.is_file())
    }

    pub fn read(&self, logical: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.local_path(logical)?;
        fs::read(&path).map_err(|e| not_found(e, logical))
    }

    pub fn read_range(&self, logical: &str, range: Range<u64>) -> Result<Vec<u8>, StoreError> {
        use std::io::{Read, Seek, SeekFrom};
        let path = self.local_path(logical)?;
        let mut f = fs::File::open(&path).map_err(|e| not_found(e, logical))?;
        let size = f.metadata()?.len();
        if range.start > range.end || range.end > size {
            return Err(StoreError::Range {
                start: range.start,
                end: range.end,
                size,
            });
        }
        f.seek(SeekFrom::Start(range.start))?;
        let mut buf = vec![0u8; (range.end - range.start) as usize];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }

    /// The slice's index if present and consistent with the data size.
    pub fn read_index(&self, logical: &str) -> Option<RecordIndex> {
        let path = self.local_path(logical).ok()?;
        let size = fs::metadata(&path).ok()?.len();
        let ix = RecordIndex::decode(&fs::read(index_path(&path)).ok()?).ok()?;
        (ix.data_size() == size).then_some(ix)
    }

    /// Bytes used by slices and indexes.
    pub fn used(&self) -> u64 {
        fn walk(dir: &Path) -> u64 {
            fs::read_dir(dir)
                .map(|rd| {
                    rd.flatten()
                        .map(|e| match e.file_type() {
                            Ok(t) if t.is_dir() => walk(&e.path()),
                            Ok(_) => e.metadata().map_or(0, |m| m.len()),
                            Err(_) => 0,
                        })
                        .sum()
                })
                .unwrap_or(0)
        }
        walk(&self.root)
    }

    pub fn free(&self) -> u64 {
        self.capacity.saturating_sub(self.used())
    }

    /// Fails with `DiskFull` unless `need` more bytes fit.
    pub fn reserve(&self, need: u64) -> Result<(), StoreError> {
        let free = self.free();
        if need > free {
            return Err(StoreError::DiskFull { need, free });
        }
        Ok(())
    }

    /// Writes a slice (and index) atomically through the scratch area.
    pub fn write(&self, logical: &str, data: &[u8], index: Option<&RecordIndex>) -> Result<ScanEntry, StoreError> {
        let dest = self.local_path(logical)?;
        if let Some(ix) = index {
            if ix.data_size() != data.len() as u64 {
                return Err(StoreError::Io(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "index does not cover data",
                )));
            }
        }
        let need = data.len() as u64 + index.map_or(0, |i| i.offsets().len() as u64 * 8);
        self.reserve(need)?;
        let tmp = tempfile::NamedTempFile::new_in(self.scratch("tmp")?)?;
        fs::write(tmp.path(), data)?;
        let tmp_idx = index
            .map(|ix| -> io::Result<_> {
                let t = tempfile::NamedTempFile::new_in(self.scratch("tmp")?)?;
                fs::write(t.path(), ix.encode())?;
                Ok(t)
            })
            .transpose()?;
        if let Some(dir) = dest.parent() {
            fs::create_dir_all(dir)?;
        }
        let _ = fs::remove_file(index_path(&dest));
        if let Some(t) = tmp_idx {
            t.persist(index_path(&dest)).map_err(|e| e.error)?;
        }
        tmp.persist(&dest).map_err(|e| e.error)?;
        self.entry(logical)
    }

    /// Moves files prepared in the scratch area into place as `logical`.
    pub fn install(&self, logical: &str, data: &Path, index: Option<&Path>) -> Result<ScanEntry, StoreError> {
        let dest = self.local_path(logical)?;
        if let Some(dir) = dest.parent() {
            fs::create_dir_all(dir)?;
        }
        let _ = fs::remove_file(index_path(&dest));
        if let Some(ix) = index {
            fs::rename(ix, index_path(&dest))?;
        }
        fs::rename(data, &dest)?;
        self.entry(logical)
    }

    pub fn remove(&self, logical: &str) -> Result<(), StoreError> {
        let path = self.local_path(logical)?;
        let _ = fs::remove_file(index_path(&path));
        fs::remove_file(&path).map_err(|e| not_found(e, logical))
    }
}

fn not_found(e: io::Error, logical: &str) -> StoreError {
    if e.kind() == io::ErrorKind::NotFound {
        StoreError::NotFound(logical.into())
    } else {
        StoreError::Io(e)
    }
}

/// Length-prefixed transfer framing: `data_len u64 | index_len u64 | data | index`.
/// An absent index has length zero.
pub fn frame(data: &[u8], index: Option<&RecordIndex>) -> Vec<u8> {
    let ix = index.map(RecordIndex::encode).unwrap_or_default();
    let mut out = Vec::with_capacity(16 + data.len() + ix.len());
    out.extend_from_slice(&(data.len() as u64).to_be_bytes());
    out.extend_from_slice(&(ix.len() as u64).to_be_bytes());
    out.extend_from_slice(data);
    out.extend_from_slice(&ix);
    out
}

pub fn unframe(mut buf: Vec<u8>) -> Result<(Vec<u8>, Option<RecordIndex>), String> {
    if buf.len() < 16 {
        return Err(format!("frame of {} bytes has no header", buf.len()));
    }
    let dl = u64::from_be_bytes(buf[0..8].try_into().expect("8 bytes"));
    let il = u64::from_be_bytes(buf[8..16].try_into().expect("8 bytes"));
    if Some(buf.len() as u64) != dl.checked_add(il).and_then(|n| n.checked_add(16)) {
        return Err(format!("frame length {} does not match header {dl}+{il}", buf.len()));
    }
    let ix_bytes = buf.split_off(16 + dl as usize);
    buf.drain(..16);
    let index = if il == 0 {
        None
    } else {
        let ix = RecordIndex::decode(&ix_bytes).map_err(|e| e.to_string())?;
        if ix.data_size() != dl {
            return Err("framed index does not cover data".into());
        }
        Some(ix)
    };
    Ok((buf, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, SliceStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = SliceStore::open(dir.path()).unwrap();
        (dir, s)
    }

    #[test]
    fn empty_root_scans_empty() {
        let (_d, s) = store();
        assert_eq!(s.scan(), (vec![], vec![]));
    }

    #[test]
    fn scan_reports_index_state() {
        let (d, s) = store();
        let ix = RecordIndex::build([10, 20, 30]).unwrap();
        fs::write(d.path().join("a.dat"), [1u8; 60]).unwrap();
        fs::write(d.path().join("a.dat.idx"), ix.encode()).unwrap();
        let (e, w) = s.scan();
        assert!(w.is_empty());
        assert_eq!((e[0].path.as_str(), e[0].size, e[0].record_count), ("/a.dat", 60, Some(3)));

        let bad = RecordIndex::build([10, 20, 20]).unwrap();
        fs::write(d.path().join("a.dat.idx"), bad.encode()).unwrap();
        let (e, w) = s.scan();
        assert_eq!((e[0].size, e[0].record_count), (60, None));
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("final offset 50"));
    }

    #[test]
    fn rescan_is_idempotent_and_skips_scratch() {
        let (d, s) = store();
        s.write("/x/y/b", b"hello", None).unwrap();
        s.write("/c", b"abc", Some(&RecordIndex::build([1, 2]).unwrap())).unwrap();
        fs::write(s.scratch("spool").unwrap().join("junk"), b"zz").unwrap();
        let first = s.scan();
        assert_eq!(first, s.scan());
        let paths: Vec<_> = first.0.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, vec!["/c", "/x/y/b"]);
        assert!(d.path().join("x/y/b").is_file());
    }

    #[test]
    fn range_reads_follow_index() {
        let (_d, s) = store();
        let data: Vec<u8> = (0..60).collect();
        let ix = RecordIndex::build([10, 20, 30]).unwrap();
        s.write("/a.dat", &data, Some(&ix)).unwrap();
        let r = ix.record_range(1).unwrap();
        assert_eq!(s.read_range("/a.dat", r).unwrap(), data[10..30].to_vec());
        assert!(matches!(s.read_range("/a.dat", 50..61), Err(StoreError::Range { .. })));
        assert_eq!(s.read_index("/a.dat"), Some(ix));
    }

    #[test]
    fn paths_are_confined() {
        let (_d, s) = store();
        assert!(s.local_path("/../etc/passwd").is_err());
        assert!(s.local_path("/.sector-tmp/x").is_err());
        assert!(s.local_path("/").is_err());
        assert!(s.local_path("/a/b").unwrap().starts_with(s.root()));
    }

    #[test]
    fn capacity_enforced() {
        let (_d, s) = store();
        let s = s.with_capacity(100);
        assert!(s.write("/a", &[0u8; 60], None).is_ok());
        assert!(matches!(s.write("/b", &[0u8; 60], None), Err(StoreError::DiskFull { .. })));
        assert!(!s.contains("/b"));
    }

    #[test]
    fn framing_roundtrip() {
        let ix = RecordIndex::build([2, 3]).unwrap();
        let f = frame(b"hello", Some(&ix));
        assert_eq!(unframe(f).unwrap(), (b"hello".to_vec(), Some(ix)));
        assert_eq!(unframe(frame(b"", None)).unwrap(), (vec![], None));
        let mut bad = frame(b"hello", None);
        bad.pop();
        assert!(unframe(bad).is_err());
    }
}

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::LogRecord;

/// Persistent destination for committed records.
pub trait LogStore: Send {
    /// Appends a batch atomically from the caller's point of view: either
    /// every record lands or an error is returned.
    fn append(&mut self, batch: &[LogRecord]) -> io::Result<()>;

    /// All persisted records in commit order.
    fn read_all(&self) -> io::Result<Vec<LogRecord>>;

    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    records: Vec<LogRecord>,
    /// Number of upcoming `append` calls that should fail (for tests).
    pub fail_next: u32,
}

impl LogStore for MemoryStore {
    fn append(&mut self, batch: &[LogRecord]) -> io::Result<()> {
        if self.fail_next > 0 {
            self.fail_next -= 1;
            return Err(io::Error::other("injected failure"));
        }
        self.records.extend_from_slice(batch);
        Ok(())
    }

    fn read_all(&self) -> io::Result<Vec<LogRecord>> {
        Ok(self.records.clone())
    }

    fn len(&self) -> u64 {
        self.records.len() as u64
    }
}

/// Append-only newline-delimited record files, split by size, each with a
/// sparse `.idx` sidecar of `record_no|byte_offset|ts_ms` every
/// `index_every` records.
#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    segment: u32,
    segment_bytes: u64,
    max_segment_bytes: u64,
    index_every: u64,
    count: u64,
}

impl FileStore {
    pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;

    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        Self::with_limits(dir, Self::DEFAULT_SEGMENT_BYTES, 1024)
    }

    pub fn with_limits(dir: impl AsRef<Path>, max_segment_bytes: u64, index_every: u64) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut store = FileStore {
            dir,
            segment: 0,
            segment_bytes: 0,
            max_segment_bytes: max_segment_bytes.max(1),
            index_every: index_every.max(1),
            count: 0,
        };
        // Resume after existing segments.
        while store.segment_path(store.segment + 1).exists() {
            store.segment += 1;
        }
        if let Ok(meta) = fs::metadata(store.segment_path(store.segment)) {
            store.segment_bytes = meta.len();
        }
        store.count = store.read_all()?.len() as u64;
        Ok(store)
    }

    fn segment_path(&self, n: u32) -> PathBuf {
        self.dir.join(format!("records.{n:05}.log"))
    }

    fn index_path(&self, n: u32) -> PathBuf {
        self.dir.join(format!("records.{n:05}.idx"))
    }

    pub fn segments(&self) -> Vec<PathBuf> {
        (0..=self.segment).map(|n| self.segment_path(n)).filter(|p| p.exists()).collect()
    }
}

impl LogStore for FileStore {
    fn append(&mut self, batch: &[LogRecord]) -> io::Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        if self.segment_bytes >= self.max_segment_bytes {
            self.segment += 1;
            self.segment_bytes = 0;
        }
        let mut buf = String::new();
        let mut index = String::new();
        let mut offset = self.segment_bytes;
        for (i, r) in batch.iter().enumerate() {
            let n = self.count + i as u64;
            if n % self.index_every == 0 {
                index.push_str(&format!("{n}|{offset}|{}\n", r.ts_ms));
            }
            let line = r.to_line();
            offset += line.len() as u64 + 1;
            buf.push_str(&line);
            buf.push('\n');
        }
        let mut f = OpenOptions::new().create(true).append(true).open(self.segment_path(self.segment))?;
        f.write_all(buf.as_bytes())?;
        f.flush()?;
        if !index.is_empty() {
            let mut idx = OpenOptions::new().create(true).append(true).open(self.index_path(self.segment))?;
            idx.write_all(index.as_bytes())?;
        }
        self.segment_bytes = offset;
        self.count += batch.len() as u64;
        Ok(())
    }

    fn read_all(&self) -> io::Result<Vec<LogRecord>> {
        let mut out = Vec::new();
        for path in self.segments() {
            let f = File::open(&path)?;
            for line in BufReader::new(f).lines() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let rec = LogRecord::from_line(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
                out.push(rec);
            }
        }
        Ok(out)
    }

    fn len(&self) -> u64 {
        self.count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitoring::{LogKind, LogValue};
    use crate::runtime::PeerId;

    fn rec(i: u64) -> LogRecord {
        LogRecord { agent: PeerId(i % 3), ts_ms: i, kind: LogKind::Service, key: "k".into(), value: LogValue::Num(i as f64) }
    }

    #[test]
    fn file_store_appends_splits_and_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let batch: Vec<LogRecord> = (0..50).map(rec).collect();
        {
            let mut s = FileStore::with_limits(dir.path(), 200, 10).unwrap();
            for chunk in batch.chunks(7) {
                s.append(chunk).unwrap();
            }
            assert!(s.segments().len() > 1);
            assert_eq!(s.len(), 50);
            assert_eq!(s.read_all().unwrap(), batch);
        }
        let reopened = FileStore::with_limits(dir.path(), 200, 10).unwrap();
        assert_eq!(reopened.len(), 50);
        let idx = fs::read_to_string(dir.path().join("records.00000.idx")).unwrap();
        assert!(idx.starts_with("0|0|0\n"));
    }
}

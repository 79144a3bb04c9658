//! Append-only JSON Lines log.
//!
//! A record is committed once its terminating newline is on disk. On open,
//! an unterminated tail (torn write) is dropped and the file truncated back
//! to the last committed record; a malformed committed record anywhere is
//! corruption and fails the open.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt record at {path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("cannot encode record: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Handle on one `.jsonl` file holding records of type `T`.
#[derive(Debug)]
pub struct JsonlLog<T> {
    path: PathBuf,
    fsync: bool,
    // serializes appends so lines never interleave
    write: Mutex<()>,
    _marker: PhantomData<fn() -> T>,
}

impl<T: Serialize + DeserializeOwned> JsonlLog<T> {
    /// Opens (creating if needed) the log and returns every committed record.
    pub fn open(path: impl Into<PathBuf>, fsync: bool) -> Result<(Self, Vec<T>), LogError> {
        let path = path.into();
        let io_err = |source| LogError::Io { path: path.clone(), source };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                File::create(&path).map_err(io_err)?;
                Vec::new()
            }
            Err(e) => return Err(io_err(e)),
        };
        let (records, committed) = decode_committed(&path, &bytes)?;
        if committed < bytes.len() {
            tracing::warn!(
                path = %path.display(),
                dropped_bytes = bytes.len() - committed,
                "dropping unterminated tail record"
            );
            let file = OpenOptions::new().write(true).open(&path).map_err(io_err)?;
            file.set_len(committed as u64).map_err(io_err)?;
            if fsync {
                file.sync_all().map_err(io_err)?;
            }
        }
        Ok((Self { path, fsync, write: Mutex::new(()), _marker: PhantomData }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record; returns once the line is written (and synced, if enabled).
    pub fn append(&self, record: &T) -> Result<(), LogError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let _guard = self.write.lock().unwrap_or_else(|e| e.into_inner());
        let io_err = |source| LogError::Io { path: self.path.clone(), source };
        let mut file = OpenOptions::new().append(true).open(&self.path).map_err(io_err)?;
        file.write_all(&line).map_err(io_err)?;
        if self.fsync {
            file.sync_data().map_err(io_err)?;
        }
        Ok(())
    }
}

/// Decodes newline-terminated records; returns them with the byte length they span.
fn decode_committed<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<(Vec<T>, usize), LogError> {
    let mut records = Vec::new();
    let mut offset = 0;
    let mut line_no = 0;
    while let Some(rel) = bytes[offset..].iter().position(|b| *b == b'\n') {
        line_no += 1;
        let line = &bytes[offset..offset + rel];
        offset += rel + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let record = serde_json::from_slice(line).map_err(|e| LogError::Corrupt {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok((records, offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Rec {
        n: u32,
        s: String,
    }

    #[test]
    fn append_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let (log, recs) = JsonlLog::<Rec>::open(&path, false).unwrap();
        assert!(recs.is_empty());
        log.append(&Rec { n: 1, s: "a".into() }).unwrap();
        log.append(&Rec { n: 2, s: "b\nc".into() }).unwrap();
        let (_, recs) = JsonlLog::<Rec>::open(&path, false).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].s, "b\nc");
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let (log, _) = JsonlLog::<Rec>::open(&path, false).unwrap();
        log.append(&Rec { n: 1, s: "a".into() }).unwrap();
        let good_len = fs::metadata(&path).unwrap().len();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"n\":2,\"s\":").unwrap();
        drop(f);
        let (log, recs) = JsonlLog::<Rec>::open(&path, false).unwrap();
        assert_eq!(recs, vec![Rec { n: 1, s: "a".into() }]);
        assert_eq!(fs::metadata(&path).unwrap().len(), good_len);
        log.append(&Rec { n: 3, s: "c".into() }).unwrap();
        let (_, recs) = JsonlLog::<Rec>::open(&path, false).unwrap();
        assert_eq!(recs.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn corrupt_committed_line_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        fs::write(&path, "{\"n\":1,\"s\":\"a\"}\nnot json\n{\"n\":2,\"s\":\"b\"}\n").unwrap();
        let err = JsonlLog::<Rec>::open(&path, false).unwrap_err();
        assert!(matches!(err, LogError::Corrupt { line: 2, .. }));
    }
}

//! Append-only durable log.
//!
//! Layout: the first line is the magic header `LLMSCALE-STORE/1`. Each
//! following line is one committed transaction as JSON:
//! `{"seq":N,"ops":[...]}` with `seq` starting at 1 and increasing by one.
//! Opening the file replays every line through the same checks live writes
//! use. A final line without a trailing newline is a torn write from a crash;
//! it was never acknowledged, so it is truncated away on open.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Engine, Rollback, StateStore, StoreError, StoreStats, Tables, Transaction, WriteOp};

pub const MAGIC: &str = "LLMSCALE-STORE/1";

#[derive(Serialize, Deserialize)]
struct LogRecord {
    seq: u64,
    ops: Vec<WriteOp>,
}

struct LogWriter {
    file: File,
    seq: u64,
}

pub struct FileStore {
    engine: Engine,
    log: Mutex<LogWriter>,
    path: PathBuf,
}

fn io(e: std::io::Error) -> StoreError {
    StoreError::Io(e.to_string())
}

impl FileStore {
    /// Opens (or creates) the log at `path` and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut tables = Tables::default();
        let mut seq = 0u64;

        if path.exists() {
            let mut content = std::fs::read(&path).map_err(io)?;
            let clean_len = content
                .iter()
                .rposition(|b| *b == b'\n')
                .map_or(0, |p| p + 1);
            if clean_len < content.len() {
                let f = OpenOptions::new().write(true).open(&path).map_err(io)?;
                f.set_len(clean_len as u64).map_err(io)?;
                f.sync_all().map_err(io)?;
                content.truncate(clean_len);
            }
            let text = String::from_utf8(content)
                .map_err(|_| StoreError::Corrupt("log is not UTF-8".into()))?;
            let mut lines = text.lines();
            match lines.next() {
                None => {}
                Some(MAGIC) => {}
                Some(other) => return Err(StoreError::Corrupt(format!("bad header {other:?}"))),
            }
            for (i, line) in lines.enumerate() {
                let lineno = i + 2;
                let record: LogRecord = serde_json::from_str(line)
                    .map_err(|e| StoreError::Corrupt(format!("line {lineno}: {e}")))?;
                if record.seq != seq + 1 {
                    return Err(StoreError::Corrupt(format!(
                        "line {lineno}: sequence {} after {seq}",
                        record.seq
                    )));
                }
                for op in &record.ops {
                    tables.apply(op).map_err(|e| {
                        StoreError::Corrupt(format!("line {lineno}: replay rejected: {e}"))
                    })?;
                }
                seq = record.seq;
            }
            tables.check_integrity()?;
        }

        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        if file.metadata().map_err(io)?.len() == 0 {
            writeln!(file, "{MAGIC}").map_err(io)?;
            file.sync_all().map_err(io)?;
        }

        Ok(Self {
            engine: Engine::new(tables),
            log: Mutex::new(LogWriter { file, seq }),
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl StateStore for FileStore {
    fn run_transaction(
        &self,
        body: &mut dyn FnMut(&mut Transaction<'_>) -> Result<(), Rollback>,
    ) -> Result<(), StoreError> {
        self.engine.execute(body, &mut |ops| {
            let mut log = self.log.lock().unwrap_or_else(|p| p.into_inner());
            let record = LogRecord {
                seq: log.seq + 1,
                ops: ops.to_vec(),
            };
            let mut line = serde_json::to_vec(&record).map_err(|e| StoreError::Io(e.to_string()))?;
            line.push(b'\n');
            log.file.write_all(&line).map_err(io)?;
            log.file.sync_data().map_err(io)?;
            log.seq = record.seq;
            Ok(())
        })
    }

    fn stats(&self) -> &StoreStats {
        self.engine.stats()
    }

    fn snapshot(&self) -> Tables {
        self.engine.snapshot()
    }
}

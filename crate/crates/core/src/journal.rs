//! Append-only broker journal.
//!
//! One JSON object per line, `op` first. The broker writes a record (and
//! fsyncs it) before applying the mutation it describes, so replaying the
//! file from the start rebuilds queues and the learning store. A crash can
//! leave a final line without its `\n`; that torn tail is discarded on open.
//! Compaction replaces the file with a single `checkpoint` record via a
//! temp file and rename. See `docs/journal.md` for the record catalogue.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::Checkpoint;
use crate::pattern_store::{CloseReason, LearnedPattern};
use crate::protocol::{Ack, JointCommand, Message};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt journal record on line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("cannot encode journal record: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MintedCommand {
    pub record_id: u64,
    pub command: JointCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalRecord {
    /// Creates `cmd.<arm>` and `ack.<arm>`.
    RegisterArm { arm_id: String },
    /// Accepted operator command: queued on `cmd.<arm>` and observed by the store.
    Submit {
        record_id: u64,
        at_ms: u64,
        command: JointCommand,
    },
    /// Command that failed validation: observed, never queued, and answered
    /// with a rejected ack queued on `ack.<arm>`.
    Reject {
        at_ms: u64,
        command: JointCommand,
        ack_record_id: u64,
        ack: Ack,
    },
    Enqueue {
        queue: String,
        record_id: u64,
        at_ms: u64,
        message: Message,
    },
    Lease {
        queue: String,
        record_id: u64,
        consumer: String,
        expiry_ms: u64,
    },
    /// Queue-level acknowledgement; removes the record.
    Ack { queue: String, record_id: u64 },
    /// Robot acknowledgement routed back: queued on `ack.<arm>` and fed to the store.
    RouteAck {
        arm_id: String,
        record_id: u64,
        at_ms: u64,
        ack: Ack,
    },
    Close {
        arm_id: String,
        operator_id: String,
        reason: CloseReason,
        at_ms: u64,
    },
    Promote { pattern: LearnedPattern },
    /// Accepted reuse prompt: one more use of the pattern and its remainder queued.
    Accept {
        pattern_id: String,
        operator_id: String,
        at_ms: u64,
        commands: Vec<MintedCommand>,
    },
    Checkpoint { state: Box<Checkpoint> },
}

impl JournalRecord {
    pub fn to_line(&self) -> Result<String, JournalError> {
        let mut line =
            serde_json::to_string(self).map_err(|e| JournalError::Encode(e.to_string()))?;
        line.push('\n');
        Ok(line)
    }
}

#[derive(Debug)]
enum Sink {
    Disabled,
    Memory(Vec<String>),
    File {
        path: PathBuf,
        file: File,
        fsync: bool,
    },
}

#[derive(Debug)]
pub struct Journal {
    sink: Sink,
    appended_since_compact: u64,
}

/// Records recovered from a journal file.
#[derive(Debug)]
pub struct Replay {
    pub records: Vec<JournalRecord>,
    /// Byte length of the intact prefix.
    pub valid_len: u64,
    pub torn_tail: bool,
}

/// Parses journal text. A trailing fragment without `\n` is a torn write and
/// is ignored; any complete line that fails to parse is corruption.
pub fn parse_journal(text: &str) -> Result<Replay, JournalError> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut torn_tail = false;
    for (i, chunk) in text.split_inclusive('\n').enumerate() {
        if !chunk.ends_with('\n') {
            torn_tail = true;
            break;
        }
        offset += chunk.len();
        let line = chunk.trim_end();
        if line.is_empty() {
            continue;
        }
        let rec: JournalRecord = serde_json::from_str(line).map_err(|e| JournalError::Corrupt {
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(Replay {
        records,
        valid_len: offset as u64,
        torn_tail,
    })
}

pub fn read_journal(path: impl AsRef<Path>) -> Result<Replay, JournalError> {
    let bytes = std::fs::read(path)?;
    // A torn multi-byte character can only be in the tail; keep the valid prefix.
    let text = match std::str::from_utf8(&bytes) {
        Ok(t) => t,
        Err(e) => std::str::from_utf8(&bytes[..e.valid_up_to()]).expect("valid prefix"),
    };
    parse_journal(text)
}

impl Journal {
    pub fn disabled() -> Self {
        Self {
            sink: Sink::Disabled,
            appended_since_compact: 0,
        }
    }

    pub fn memory() -> Self {
        Self {
            sink: Sink::Memory(Vec::new()),
            appended_since_compact: 0,
        }
    }

    /// In-memory journal that already holds `lines`.
    pub fn memory_from(lines: Vec<String>) -> Self {
        Self {
            sink: Sink::Memory(lines),
            appended_since_compact: 0,
        }
    }

    /// Opens (or creates) a journal file and returns the records already in
    /// it. A torn tail is truncated away so new appends start on a clean line.
    pub fn open_file(path: impl AsRef<Path>, fsync: bool) -> Result<(Self, Vec<JournalRecord>), JournalError> {
        let path = path.as_ref().to_path_buf();
        let replay = if path.exists() {
            read_journal(&path)?
        } else {
            Replay {
                records: Vec::new(),
                valid_len: 0,
                torn_tail: false,
            }
        };
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        if file.metadata()?.len() != replay.valid_len {
            tracing::warn!(path = %path.display(), valid_len = replay.valid_len, "truncating torn journal tail");
            file.set_len(replay.valid_len)?;
            file.sync_all()?;
        }
        Ok((
            Self {
                sink: Sink::File { path, file, fsync },
                appended_since_compact: 0,
            },
            replay.records,
        ))
    }

    pub fn append(&mut self, rec: &JournalRecord) -> Result<(), JournalError> {
        match &mut self.sink {
            Sink::Disabled => {}
            Sink::Memory(lines) => lines.push(rec.to_line()?),
            Sink::File { file, fsync, .. } => {
                file.write_all(rec.to_line()?.as_bytes())?;
                if *fsync {
                    file.sync_data()?;
                }
            }
        }
        self.appended_since_compact += 1;
        Ok(())
    }

    pub fn appended_since_compact(&self) -> u64 {
        self.appended_since_compact
    }

    /// Replaces the whole journal with `records`.
    pub fn rewrite(&mut self, records: &[JournalRecord]) -> Result<(), JournalError> {
        match &mut self.sink {
            Sink::Disabled => {}
            Sink::Memory(lines) => {
                *lines = records.iter().map(|r| r.to_line()).collect::<Result<_, _>>()?;
            }
            Sink::File { path, file, .. } => {
                let tmp = path.with_extension("compact");
                {
                    let mut out = File::create(&tmp)?;
                    for r in records {
                        out.write_all(r.to_line()?.as_bytes())?;
                    }
                    out.sync_all()?;
                }
                std::fs::rename(&tmp, &*path)?;
                *file = OpenOptions::new().append(true).read(true).open(&*path)?;
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    if let Ok(d) = File::open(dir) {
                        let _ = d.sync_all();
                    }
                }
            }
        }
        self.appended_since_compact = 0;
        Ok(())
    }

    /// Lines held by an in-memory journal.
    pub fn memory_lines(&self) -> Option<&[String]> {
        match &self.sink {
            Sink::Memory(lines) => Some(lines),
            _ => None,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Current journal size in bytes.
    pub fn byte_len(&self) -> u64 {
        match &self.sink {
            Sink::Disabled => 0,
            Sink::Memory(lines) => lines.iter().map(|l| l.len() as u64).sum(),
            Sink::File { file, .. } => file.metadata().map(|m| m.len()).unwrap_or(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: u64) -> JournalRecord {
        JournalRecord::Ack {
            queue: "cmd.armA".into(),
            record_id: n,
        }
    }

    #[test]
    fn op_tag_comes_first() {
        let line = rec(3).to_line().unwrap();
        assert!(line.starts_with(r#"{"op":"ack","queue":"cmd.armA","record_id":3}"#));
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.log");
        let mut text = rec(1).to_line().unwrap() + &rec(2).to_line().unwrap();
        let intact = text.len() as u64;
        text.push_str(r#"{"op":"ack","que"#);
        std::fs::write(&path, &text).unwrap();

        let (mut journal, records) = Journal::open_file(&path, true).unwrap();
        assert_eq!(records, vec![rec(1), rec(2)]);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), intact);
        journal.append(&rec(3)).unwrap();
        let replay = read_journal(&path).unwrap();
        assert_eq!(replay.records, vec![rec(1), rec(2), rec(3)]);
        assert!(!replay.torn_tail);
    }

    #[test]
    fn complete_garbage_line_is_corruption() {
        let text = rec(1).to_line().unwrap() + "{\"op\":\"nope\"}\n";
        match parse_journal(&text) {
            Err(JournalError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rewrite_replaces_file_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.log");
        let (mut journal, _) = Journal::open_file(&path, false).unwrap();
        for n in 0..5 {
            journal.append(&rec(n)).unwrap();
        }
        journal.rewrite(&[rec(42)]).unwrap();
        journal.append(&rec(43)).unwrap();
        assert_eq!(read_journal(&path).unwrap().records, vec![rec(42), rec(43)]);
        assert_eq!(journal.appended_since_compact(), 1);
    }
}

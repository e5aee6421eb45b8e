//! Incremental reading of a growing log file.

use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use cmdrec_core::logs::{parse_log_line, LineOutcome, LogRecord, LogSchema};

/// Follows one log file by byte offset.
///
/// The committed offset always sits just after the last complete line, so a
/// half-written line is read again, whole, on a later poll. A file shorter
/// than the offset is taken as truncated and read from the start.
#[derive(Debug)]
pub struct LogTailer {
    path: PathBuf,
    offset: u64,
    schema: LogSchema,
    /// Lines consumed without producing a record (headers, other categories, bad rows).
    pub skipped: usize,
    pub truncations: usize,
}

impl LogTailer {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self::resume(path, 0)
    }

    /// Continues from an offset stored by an earlier tailer.
    pub fn resume(path: impl Into<PathBuf>, offset: u64) -> Self {
        LogTailer { path: path.into(), offset, schema: LogSchema::default(), skipped: 0, truncations: 0 }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Records appended since the last poll. A missing file yields nothing.
    pub fn poll(&mut self) -> io::Result<Vec<LogRecord>> {
        let mut file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let len = file.metadata()?.len();
        if len < self.offset {
            log::warn!("{} shrank from {} to {len} bytes; reading from the start", self.path.display(), self.offset);
            self.offset = 0;
            self.truncations += 1;
        }
        if len == self.offset {
            return Ok(Vec::new());
        }
        file.seek(SeekFrom::Start(self.offset))?;
        let mut bytes = Vec::with_capacity((len - self.offset) as usize);
        file.take(len - self.offset).read_to_end(&mut bytes)?;
        let Some(last_newline) = bytes.iter().rposition(|b| *b == b'\n') else {
            return Ok(Vec::new());
        };
        let complete = &bytes[..=last_newline];
        self.offset += complete.len() as u64;
        let mut out = Vec::new();
        for line in String::from_utf8_lossy(complete).lines() {
            if let Some(schema) = LogSchema::from_header(line) {
                self.schema = schema;
                self.skipped += 1;
                continue;
            }
            match parse_log_line(line, &self.schema) {
                Ok(LineOutcome::Record(r)) => out.push(r),
                Ok(LineOutcome::Skip(_)) => self.skipped += 1,
                Err(e) => {
                    log::debug!("{}: {e}", self.path.display());
                    self.skipped += 1;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmdrec_core::logs::{format_log_line, header_line, Category, CommandEvent, Timestamp};
    use std::io::Write;

    fn line(i: i64) -> String {
        format_log_line("s1", Timestamp(1_000 * i), Category::Tool, &CommandEvent::tool(&format!("T{i}"), -1000 - i).message()) + "\n"
    }

    fn append(path: &Path, text: &str) {
        std::fs::OpenOptions::new().create(true).append(true).open(path).unwrap().write_all(text.as_bytes()).unwrap();
    }

    #[test]
    fn emits_exactly_what_was_appended() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.log");
        let mut t = LogTailer::new(&path);
        assert!(t.poll().unwrap().is_empty());
        append(&path, &(header_line() + "\n"));
        append(&path, &(line(1) + &line(2) + &line(3)));
        assert_eq!(t.poll().unwrap().len(), 3);
        assert!(t.poll().unwrap().is_empty());
        append(&path, &line(4));
        let got = t.poll().unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].timestamp, Timestamp(4_000));
    }

    #[test]
    fn partial_lines_wait_for_their_newline() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.log");
        let l = line(7);
        let (head, tail) = l.split_at(20);
        append(&path, head);
        let mut t = LogTailer::new(&path);
        assert!(t.poll().unwrap().is_empty());
        assert_eq!(t.offset(), 0);
        append(&path, tail);
        assert_eq!(t.poll().unwrap().len(), 1);
    }

    #[test]
    fn truncation_restarts_from_the_top() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.log");
        append(&path, &(line(1) + &line(2) + &line(3)));
        let mut t = LogTailer::new(&path);
        assert_eq!(t.poll().unwrap().len(), 3);
        std::fs::write(&path, line(9)).unwrap();
        let got = t.poll().unwrap();
        assert_eq!(t.truncations, 1);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].timestamp, Timestamp(9_000));
    }

    #[test]
    fn resuming_from_a_stored_offset_never_repeats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.log");
        append(&path, &(line(1) + &line(2)));
        let mut t = LogTailer::new(&path);
        t.poll().unwrap();
        append(&path, &line(3));
        let mut again = LogTailer::resume(&path, t.offset());
        let got = again.poll().unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].timestamp, Timestamp(3_000));
    }
}

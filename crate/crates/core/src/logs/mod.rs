//! Native log parsing: tab-separated rows into typed records, grouped into sessions.

mod message;

pub use message::{format_message, parse_message, MessageError};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.3f";

/// Column names of the native log, in file order.
pub const COLUMNS: [&str; 11] = [
    "sn_anonymized",
    "session_anonymized",
    "mac_id_anonymized",
    "timestamp",
    "log_level",
    "version",
    "platform",
    "os_version",
    "type",
    "category",
    "message",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "UNDO")]
    Undo,
    Tool,
    Menu,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Undo, Category::Tool, Category::Menu];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Undo => "UNDO",
            Category::Tool => "Tool",
            Category::Menu => "Menu",
        }
    }

    /// Dense code used by the feature encoder.
    pub fn code(self) -> u8 {
        match self {
            Category::Undo => 0,
            Category::Tool => 1,
            Category::Menu => 2,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "UNDO" => Ok(Category::Undo),
            "Tool" => Ok(Category::Tool),
            "Menu" => Ok(Category::Menu),
            other => Err(other.to_string()),
        }
    }
}

/// Milliseconds since the (naive) epoch. Only differences are ever consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn parse(text: &str) -> Option<Timestamp> {
        NaiveDateTime::parse_from_str(text.trim(), TIMESTAMP_FORMAT)
            .ok()
            .map(|t| Timestamp(t.and_utc().timestamp_millis()))
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    /// Seconds elapsed since `earlier`, never negative.
    pub fn seconds_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0).max(0) as f64 / 1000.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match chrono::DateTime::from_timestamp_millis(self.0) {
            Some(t) => write!(f, "{}", t.naive_utc().format(TIMESTAMP_FORMAT)),
            None => write!(f, "@{}ms", self.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Event,
    EndEvent,
    UndoEvent,
    RedoEvent,
    ToolInvoke,
    MenuInvoke,
}

impl Action {
    pub fn category(self) -> Category {
        match self {
            Action::ToolInvoke => Category::Tool,
            Action::MenuInvoke => Category::Menu,
            _ => Category::Undo,
        }
    }

    pub fn is_invocation(self) -> bool {
        matches!(self, Action::ToolInvoke | Action::MenuInvoke)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommandEvent {
    pub action: Action,
    pub name: String,
    pub loc_id: i64,
    pub modifier: Option<String>,
    pub menu_sub_id: Option<i64>,
}

impl CommandEvent {
    pub fn undo(action: Action, name: &str, loc_id: i64) -> Self {
        debug_assert_eq!(action.category(), Category::Undo);
        CommandEvent { action, name: name.to_string(), loc_id, modifier: None, menu_sub_id: None }
    }

    pub fn tool(name: &str, loc_id: i64) -> Self {
        CommandEvent {
            action: Action::ToolInvoke,
            name: name.to_string(),
            loc_id,
            modifier: None,
            menu_sub_id: None,
        }
    }

    pub fn menu(name: &str, loc_id: i64, sub_id: i64) -> Self {
        CommandEvent {
            action: Action::MenuInvoke,
            name: name.to_string(),
            loc_id,
            modifier: None,
            menu_sub_id: Some(sub_id),
        }
    }

    pub fn category(&self) -> Category {
        self.action.category()
    }

    pub fn message(&self) -> String {
        format_message(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub session_id: String,
    pub timestamp: Timestamp,
    pub category: Category,
    pub message: String,
    pub language: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub timestamp: Timestamp,
    pub event: CommandEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub events: Vec<TimedEvent>,
}

impl Session {
    pub fn new(session_id: impl Into<String>) -> Self {
        Session { session_id: session_id.into(), events: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Column positions of the four consumed fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogSchema {
    pub columns: usize,
    pub session: usize,
    pub timestamp: usize,
    pub category: usize,
    pub message: usize,
}

impl Default for LogSchema {
    fn default() -> Self {
        LogSchema { columns: COLUMNS.len(), session: 1, timestamp: 3, category: 9, message: 10 }
    }
}

impl LogSchema {
    /// Derives positions from a header row, if it names every consumed column.
    pub fn from_header(line: &str) -> Option<LogSchema> {
        let cols: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').map(str::trim).collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);
        Some(LogSchema {
            columns: cols.len(),
            session: find("session_anonymized")?,
            timestamp: find("timestamp")?,
            category: find("category")?,
            message: find("message")?,
        })
    }

    pub fn is_header(&self, line: &str) -> bool {
        line.split('\t').nth(self.session).map(str::trim) == Some("session_anonymized")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SkipReason {
    EmptyLine,
    Header,
    OtherCategory(String),
}

impl SkipReason {
    pub fn code(&self) -> String {
        match self {
            SkipReason::EmptyLine => "empty_line".into(),
            SkipReason::Header => "header".into(),
            SkipReason::OtherCategory(c) => format!("category:{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineOutcome {
    Record(LogRecord),
    Skip(SkipReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LineError {
    #[error("malformed timestamp {0:?}")]
    MalformedTimestamp(String),
    #[error("expected {expected} columns, found {found}")]
    ColumnCountMismatch { expected: usize, found: usize },
}

impl LineError {
    pub fn code(&self) -> &'static str {
        match self {
            LineError::MalformedTimestamp(_) => "malformed_timestamp",
            LineError::ColumnCountMismatch { .. } => "column_count_mismatch",
        }
    }
}

/// Parses one raw log row.
pub fn parse_log_line(line: &str, schema: &LogSchema) -> Result<LineOutcome, LineError> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() {
        return Ok(LineOutcome::Skip(SkipReason::EmptyLine));
    }
    if schema.is_header(line) {
        return Ok(LineOutcome::Skip(SkipReason::Header));
    }
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != schema.columns {
        return Err(LineError::ColumnCountMismatch { expected: schema.columns, found: cols.len() });
    }
    let category = match cols[schema.category].trim().parse::<Category>() {
        Ok(c) => c,
        Err(other) => return Ok(LineOutcome::Skip(SkipReason::OtherCategory(other))),
    };
    let raw_ts = cols[schema.timestamp];
    let timestamp =
        Timestamp::parse(raw_ts).ok_or_else(|| LineError::MalformedTimestamp(raw_ts.to_string()))?;
    Ok(LineOutcome::Record(LogRecord {
        session_id: cols[schema.session].trim().to_string(),
        timestamp,
        category,
        message: cols[schema.message].trim().to_string(),
        language: None,
    }))
}

/// Line accounting for one or more parsed files.
///
/// Every line lands in exactly one bucket: `parsed`, or one of the reasons
/// in `skipped` (skip outcomes, hard line errors, and records dropped by the
/// message grammar).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub lines: usize,
    pub parsed: usize,
    pub skipped: BTreeMap<String, usize>,
    pub io_errors: Vec<(PathBuf, String)>,
}

impl ParseReport {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }

    /// Lines rejected by a hard error rather than a skip outcome.
    pub fn errored(&self) -> usize {
        ["malformed_timestamp", "column_count_mismatch"]
            .iter()
            .filter_map(|k| self.skipped.get(*k))
            .sum()
    }

    fn skip(&mut self, code: impl Into<String>) {
        *self.skipped.entry(code.into()).or_default() += 1;
    }

    pub fn merge(&mut self, other: ParseReport) {
        self.lines += other.lines;
        self.parsed += other.parsed;
        for (k, v) in other.skipped {
            *self.skipped.entry(k).or_default() += v;
        }
        self.io_errors.extend(other.io_errors);
    }
}

impl fmt::Display for ParseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lines    {:>10}", self.lines)?;
        writeln!(f, "parsed   {:>10}", self.parsed)?;
        writeln!(f, "skipped  {:>10}", self.skipped_total())?;
        for (reason, n) in &self.skipped {
            writeln!(f, "  {reason:<28}{n:>10}")?;
        }
        for (path, err) in &self.io_errors {
            writeln!(f, "io error {}: {err}", path.display())?;
        }
        Ok(())
    }
}

/// A record with its decoded event, tagged with its input position for stable ordering.
struct Parsed {
    session_id: String,
    order: (usize, usize),
    event: TimedEvent,
}

fn parse_text(text: &str, file_index: usize, schema: &LogSchema, out: &mut Vec<Parsed>) -> ParseReport {
    let mut report = ParseReport::default();
    for (line_index, line) in text.lines().enumerate() {
        report.lines += 1;
        match parse_log_line(line, schema) {
            Ok(LineOutcome::Record(rec)) => match parse_message(rec.category, &rec.message) {
                Ok(event) => {
                    report.parsed += 1;
                    out.push(Parsed {
                        session_id: rec.session_id,
                        order: (file_index, line_index),
                        event: TimedEvent { timestamp: rec.timestamp, event },
                    });
                }
                Err(e) => report.skip(e.reason()),
            },
            Ok(LineOutcome::Skip(reason)) => report.skip(reason.code()),
            Err(e) => report.skip(e.code()),
        }
    }
    report
}

fn group(mut parsed: Vec<Parsed>) -> Vec<Session> {
    parsed.sort_by(|a, b| {
        a.session_id
            .cmp(&b.session_id)
            .then(a.event.timestamp.cmp(&b.event.timestamp))
            .then(a.order.cmp(&b.order))
    });
    let mut sessions: Vec<Session> = Vec::new();
    for p in parsed {
        match sessions.last_mut() {
            Some(s) if s.session_id == p.session_id => s.events.push(p.event),
            _ => sessions.push(Session { session_id: p.session_id, events: vec![p.event] }),
        }
    }
    sessions
}

/// Parses in-memory log texts (one entry per file) into time-ordered sessions.
pub fn sessions_from_texts<S: AsRef<str>>(texts: &[S], schema: &LogSchema) -> (Vec<Session>, ParseReport) {
    let mut parsed = Vec::new();
    let mut report = ParseReport::default();
    for (i, text) in texts.iter().enumerate() {
        report.merge(parse_text(text.as_ref(), i, schema, &mut parsed));
    }
    (group(parsed), report)
}

/// Reads and parses log files. Unreadable files are reported and skipped.
///
/// Sessions come back sorted by id; events within a session are ordered by
/// timestamp, ties broken by file then line order.
pub fn load_sessions<P: AsRef<Path>>(files: &[P], schema: &LogSchema) -> (Vec<Session>, ParseReport) {
    let mut parsed = Vec::new();
    let mut report = ParseReport::default();
    for (i, path) in files.iter().enumerate() {
        let path = path.as_ref();
        match fs::read_to_string(path) {
            Ok(text) => report.merge(parse_text(&text, i, schema, &mut parsed)),
            Err(e) => {
                log::warn!("cannot read {}: {e}", path.display());
                report.io_errors.push((path.to_path_buf(), e.to_string()));
            }
        }
    }
    (group(parsed), report)
}

/// Formats one row in the native column layout.
pub fn format_log_line(session_id: &str, timestamp: Timestamp, category: Category, message: &str) -> String {
    format_raw_line(session_id, timestamp, category.as_str(), message)
}

/// Like [`format_log_line`] but with a free-form category column.
pub fn format_raw_line(session_id: &str, timestamp: Timestamp, category: &str, message: &str) -> String {
    format!(
        "0662603B\t{session_id}\t6B0F34F7\t{timestamp}\t5\t28.0.0(668937)\tWIN\tWinNT 10.0.19044\tINFO\t{category}\t{message}"
    )
}

pub fn header_line() -> String {
    COLUMNS.join("\t")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(session: &str, ts: &str, cat: &str, msg: &str) -> String {
        format!("0662603B\t{session}\t6B0F34F7\t{ts}\t5\t28.0.0(668937)\tWIN\tWinNT 10.0.19044\tINFO\t{cat}\t{msg}")
    }

    #[test]
    fn parses_figure_rows() {
        let schema = LogSchema::default();
        let line = row("96DC988B", "2023-04-12 23:44:02.441", "UNDO", "End Event: Zoom (242)");
        match parse_log_line(&line, &schema).unwrap() {
            LineOutcome::Record(r) => {
                assert_eq!(r.category, Category::Undo);
                assert_eq!(r.message, "End Event: Zoom (242)");
                assert_eq!(r.session_id, "96DC988B");
            }
            other => panic!("{other:?}"),
        }
        let line = row("96DC988B", "2023-04-12 23:44:06.441", "Menu", "Menu: Save - (-5) (0)");
        assert!(matches!(
            parse_log_line(&line, &schema).unwrap(),
            LineOutcome::Record(LogRecord { category: Category::Menu, .. })
        ));
    }

    #[test]
    fn skips_and_errors() {
        let schema = LogSchema::default();
        assert_eq!(parse_log_line("", &schema).unwrap(), LineOutcome::Skip(SkipReason::EmptyLine));
        assert_eq!(parse_log_line(&header_line(), &schema).unwrap(), LineOutcome::Skip(SkipReason::Header));
        let line = row("A", "2023-04-12 23:44:02.441", "Script", "Run (3)");
        assert_eq!(
            parse_log_line(&line, &schema).unwrap(),
            LineOutcome::Skip(SkipReason::OtherCategory("Script".into()))
        );
        let line = row("A", "2023-04-12T23:44", "UNDO", "End Event: Zoom (242)");
        assert!(matches!(parse_log_line(&line, &schema), Err(LineError::MalformedTimestamp(_))));
        assert!(matches!(
            parse_log_line("a\tb\tc", &schema),
            Err(LineError::ColumnCountMismatch { expected: 11, found: 3 })
        ));
    }

    #[test]
    fn timestamp_round_trip_keeps_millis() {
        let ts = Timestamp::parse("2023-04-12 23:44:02.441").unwrap();
        assert_eq!(ts.to_string(), "2023-04-12 23:44:02.441");
        let later = Timestamp::parse("2023-04-12 23:44:04.000").unwrap();
        assert!((later.seconds_since(ts) - 1.559).abs() < 1e-12);
    }

    #[test]
    fn header_derives_schema() {
        assert_eq!(LogSchema::from_header(&header_line()), Some(LogSchema::default()));
        assert_eq!(LogSchema::from_header("a\tb"), None);
    }

    #[test]
    fn interleaved_sessions_are_grouped_and_ordered() {
        let text = [
            header_line(),
            row("B", "2023-04-12 10:00:03.000", "Tool", "Tool: Wall (-1)"),
            row("A", "2023-04-12 10:00:02.000", "Tool", "Tool: Door (-2)"),
            row("B", "2023-04-12 10:00:01.000", "Tool", "Tool: Slab (-3)"),
            row("A", "2023-04-12 10:00:01.000", "Menu", "Menu: Save - (-5) (0)"),
        ]
        .join("\n");
        let (sessions, report) = sessions_from_texts(&[text], &LogSchema::default());
        assert_eq!(report.parsed, 4);
        assert_eq!(sessions.len(), 2);
        let names: Vec<_> = sessions[0].events.iter().map(|e| e.event.name.as_str()).collect();
        assert_eq!(sessions[0].session_id, "A");
        assert_eq!(names, ["Save", "Door"]);
        let names: Vec<_> = sessions[1].events.iter().map(|e| e.event.name.as_str()).collect();
        assert_eq!(names, ["Slab", "Wall"]);
    }

    #[test]
    fn duplicate_timestamps_keep_file_order() {
        let ts = "2023-04-12 23:44:04.441";
        let text = [
            row("S", ts, "Tool", "Tool: Reshape (-214)"),
            row("S", ts, "UNDO", "Event: (MAX-20) Reshape (279)"),
            row("S", ts, "UNDO", "End Event: Reshape (279)"),
        ]
        .join("\n");
        let (sessions, _) = sessions_from_texts(&[text], &LogSchema::default());
        let actions: Vec<_> = sessions[0].events.iter().map(|e| e.event.action).collect();
        assert_eq!(actions, [Action::ToolInvoke, Action::Event, Action::EndEvent]);
    }

    #[test]
    fn report_counts_parsed_and_skipped() {
        let ts = "2023-04-12 23:44:04.441";
        let mut lines: Vec<String> = (0..5).map(|i| row("S", ts, "Tool", &format!("Tool: T{i} (-{i})"))).collect();
        lines.push("garbage line".into());
        lines.push(row("S", "yesterday", "Tool", "Tool: X (-1)"));
        let (_, report) = sessions_from_texts(&[lines.join("\n")], &LogSchema::default());
        assert_eq!(report.parsed, 5);
        assert_eq!(report.skipped_total(), 2);
        assert_eq!(report.errored(), 2);
        assert_eq!(report.lines, report.parsed + report.skipped_total());
    }

    #[test]
    fn unreadable_file_does_not_stop_others() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.log");
        fs::write(&good, row("S", "2023-04-12 23:44:04.441", "Tool", "Tool: Wall (-1)")).unwrap();
        let missing = dir.path().join("missing.log");
        let (sessions, report) = load_sessions(&[missing, good], &LogSchema::default());
        assert_eq!(sessions.len(), 1);
        assert_eq!(report.io_errors.len(), 1);
    }
}

//! Log sessions to clean, language-aligned, high-level command sequences.

mod denylist;
mod filter;
mod lexicon;
mod split;
mod stats;
mod triggers;
mod undo;

pub use denylist::{
    Denylist, MatchRule, RuleKind, INTERNAL_LOC, PAN_LOC, PLUGIN_ERROR_LOC, SCROLL_LOC, SELECTION_LOC, ZOOM_LOC,
};
pub use filter::{filter_noise, FilterReport};
pub use lexicon::{align_languages, LexiconEntry, LexiconError, TranslationLexicon, LEXICON_HEADER};
pub use split::{sessionize_and_split, SplitConfig, SplitDataset};
pub use stats::{dataset_stats, StatsReport};
pub use triggers::{
    build_trigger_map, first_completed_after, substitute_high_level, Outcome, SubstituteReport, TriggerConfig,
    TriggerDecision, TriggerEntry, TriggerFileError, TriggerKey, TriggerMap, TRIGGER_HEADER,
};
pub use undo::{resolve_undo_redo, Completion, UndoMachine, UndoReport};

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logs::{Action, Category, Session, TimedEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanItem {
    pub name: String,
    pub category: Category,
    pub loc_id: i64,
    /// Seconds since the previous item of the sequence.
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanSequence {
    pub session_id: String,
    pub items: Vec<CleanItem>,
}

impl CleanSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Completed events and invocations become items; `Event` openers are dropped.
pub fn item_events(events: &[TimedEvent]) -> impl Iterator<Item = &TimedEvent> {
    events
        .iter()
        .filter(|e| matches!(e.event.action, Action::EndEvent | Action::ToolInvoke | Action::MenuInvoke))
}

pub fn to_clean_sequence(session: &Session) -> Option<CleanSequence> {
    let mut prev = None;
    let items: Vec<CleanItem> = item_events(&session.events)
        .map(|e| {
            let dt = prev.map_or(0.0, |p| e.timestamp.seconds_since(p));
            prev = Some(e.timestamp);
            CleanItem { name: e.event.name.clone(), category: e.event.category(), loc_id: e.event.loc_id, dt }
        })
        .collect();
    (!items.is_empty()).then(|| CleanSequence { session_id: session.session_id.clone(), items })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "Denylist::default_noise")]
    pub denylist: Denylist,
    #[serde(default = "Denylist::default_ambiguous")]
    pub ambiguous: Denylist,
    #[serde(default)]
    pub triggers: TriggerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::standard()
    }
}

impl PipelineConfig {
    pub fn standard() -> Self {
        PipelineConfig {
            denylist: Denylist::default_noise(),
            ambiguous: Denylist::default_ambiguous(),
            triggers: TriggerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineReport {
    pub sessions_in: usize,
    pub sessions_out: usize,
    pub filter: FilterReport,
    pub undo: UndoReport,
    pub unmapped_names: usize,
    pub substitute: SubstituteReport,
}

impl fmt::Display for PipelineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sessions: {} in, {} out", self.sessions_in, self.sessions_out)?;
        for (rule, n) in &self.filter.removed_by_rule {
            writeln!(f, "removed[{rule}]: {n}")?;
        }
        writeln!(f, "aborted events: {}", self.filter.aborted)?;
        writeln!(
            f,
            "undo: {}, redo: {}, anomalies: {}",
            self.undo.undos, self.undo.redos, self.undo.anomalies
        )?;
        writeln!(f, "unmapped names: {}", self.unmapped_names)?;
        write!(
            f,
            "substituted: {}, unfinished invocations: {}, ambiguous: {}",
            self.substitute.substituted, self.substitute.removed_unfinished, self.substitute.removed_ambiguous
        )
    }
}

/// Noise filtering, undo/redo resolution and language alignment.
pub fn prepare_session(
    session: &Session,
    config: &PipelineConfig,
    lexicon: &TranslationLexicon,
    report: &mut PipelineReport,
) -> Session {
    let (s, fr) = filter_noise(session, &config.denylist);
    let (s, ur) = resolve_undo_redo(&s);
    let (s, unmapped) = align_languages(&s, lexicon);
    report.filter.merge(&fr);
    report.undo.merge(&ur);
    report.unmapped_names += unmapped;
    s
}

/// Substitution and item extraction, given a decided trigger map.
pub fn finish_session(
    session: &Session,
    config: &PipelineConfig,
    map: &TriggerMap,
    report: &mut PipelineReport,
) -> Option<CleanSequence> {
    let (s, sr) = substitute_high_level(session, map, config.triggers.lookahead, &config.ambiguous);
    report.substitute.merge(&sr);
    to_clean_sequence(&s)
}

pub struct PipelineOutput {
    pub sequences: Vec<CleanSequence>,
    pub trigger_map: TriggerMap,
    pub report: PipelineReport,
}

/// Runs the full batch pipeline. The trigger map is inferred from the corpus
/// unless a reviewed one is supplied.
pub fn run_pipeline(
    sessions: &[Session],
    config: &PipelineConfig,
    lexicon: &TranslationLexicon,
    reviewed: Option<&TriggerMap>,
) -> PipelineOutput {
    let mut report = PipelineReport { sessions_in: sessions.len(), ..Default::default() };
    let prepared: Vec<Session> = sessions.iter().map(|s| prepare_session(s, config, lexicon, &mut report)).collect();
    let trigger_map = match reviewed {
        Some(m) => m.clone(),
        None => build_trigger_map(&prepared, &config.triggers, &config.ambiguous),
    };
    let sequences: Vec<CleanSequence> =
        prepared.iter().filter_map(|s| finish_session(s, config, &trigger_map, &mut report)).collect();
    report.sessions_out = sequences.len();
    PipelineOutput { sequences, trigger_map, report }
}

pub const SEQUENCE_HEADER: &str = "session_id\tposition\tcategory\tloc_id\tdt\tname";

#[derive(Debug, Error)]
pub enum SequenceFileError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
}

/// One row per item; `dt` is written in shortest round-trip form.
pub fn sequences_to_tsv(sequences: &[CleanSequence]) -> String {
    let mut out = String::from(SEQUENCE_HEADER);
    out.push('\n');
    for s in sequences {
        for (i, it) in s.items.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", s.session_id, i, it.category, it.loc_id, it.dt, it.name);
        }
    }
    out
}

pub fn sequences_from_tsv(text: &str) -> Result<Vec<CleanSequence>, SequenceFileError> {
    let mut out: Vec<CleanSequence> = Vec::new();
    let err = |line: usize, msg: &str| SequenceFileError::Line { line, msg: msg.into() };
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.is_empty() || line.starts_with("session_id\t") {
            continue;
        }
        let f: Vec<&str> = line.splitn(6, '\t').collect();
        if f.len() != 6 {
            return Err(err(n, "expected 6 fields"));
        }
        let position: usize = f[1].parse().map_err(|_| err(n, "bad position"))?;
        let item = CleanItem {
            category: f[2].parse().map_err(|_| err(n, "bad category"))?,
            loc_id: f[3].parse().map_err(|_| err(n, "bad loc id"))?,
            dt: f[4].parse().map_err(|_| err(n, "bad dt"))?,
            name: f[5].to_string(),
        };
        match out.last_mut() {
            Some(s) if s.session_id == f[0] && position == s.items.len() => s.items.push(item),
            _ if position == 0 => out.push(CleanSequence { session_id: f[0].to_string(), items: vec![item] }),
            _ => return Err(err(n, "positions must count up from 0 per sequence")),
        }
    }
    Ok(out)
}

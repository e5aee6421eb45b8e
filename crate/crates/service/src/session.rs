//! Per-session state fed by tailed log records.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use cmdrec_core::logs::{parse_message, LogRecord, Session, TimedEvent};
use cmdrec_core::preprocess::{
    finish_session, prepare_session, CleanItem, PipelineConfig, PipelineReport, TranslationLexicon, TriggerMap,
};

/// Everything the online pipeline needs, fixed at startup.
#[derive(Debug, Clone)]
pub struct OnlinePipeline {
    pub config: PipelineConfig,
    pub lexicon: TranslationLexicon,
    pub triggers: TriggerMap,
    /// Cap on the cleaned buffer kept per session.
    pub max_len: usize,
}

impl OnlinePipeline {
    /// Cleaned items of one session, most recent `max_len` only.
    pub fn clean(&self, session: &Session) -> Vec<CleanItem> {
        let mut report = PipelineReport::default();
        let prepared = prepare_session(session, &self.config, &self.lexicon, &mut report);
        let mut items = finish_session(&prepared, &self.config, &self.triggers, &mut report)
            .map(|s| s.items)
            .unwrap_or_default();
        let skip = items.len().saturating_sub(self.max_len);
        items.drain(..skip);
        items
    }
}

#[derive(Debug, Clone)]
pub struct SessionState {
    /// Decoded, non-denylisted events in timestamp order (ties by arrival).
    events: Vec<TimedEvent>,
    buffer: Vec<CleanItem>,
    /// Bumped whenever the buffer changes.
    pub version: u64,
    pub last_seen: Instant,
}

impl SessionState {
    pub fn buffer(&self) -> &[CleanItem] {
        &self.buffer
    }

    pub fn raw_events(&self) -> usize {
        self.events.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub records: usize,
    pub undecodable: usize,
    pub denylisted: usize,
    pub sessions_touched: usize,
}

/// All live sessions.
///
/// Each poll appends the new events of a session and re-derives its buffer
/// from the session's retained events, so late undo records and triggers
/// whose completion arrives in a later poll are handled exactly as in batch
/// preprocessing. Denylisted records are dropped on arrival.
#[derive(Debug)]
pub struct SessionStore {
    pipeline: OnlinePipeline,
    sessions: HashMap<String, SessionState>,
    pub polls: u64,
}

impl SessionStore {
    pub fn new(pipeline: OnlinePipeline) -> Self {
        SessionStore { pipeline, sessions: HashMap::new(), polls: 0 }
    }

    pub fn pipeline(&self) -> &OnlinePipeline {
        &self.pipeline
    }

    pub fn get(&self, id: &str) -> Option<&SessionState> {
        self.sessions.get(id)
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn ingest(&mut self, records: &[LogRecord]) -> IngestReport {
        self.ingest_at(records, Instant::now())
    }

    pub fn ingest_at(&mut self, records: &[LogRecord], now: Instant) -> IngestReport {
        self.polls += 1;
        let mut report = IngestReport { records: records.len(), ..Default::default() };
        let mut touched: Vec<String> = Vec::new();
        for r in records {
            let event = match parse_message(r.category, &r.message) {
                Ok(e) => e,
                Err(_) => {
                    report.undecodable += 1;
                    continue;
                }
            };
            if self.pipeline.config.denylist.matches(&event) {
                report.denylisted += 1;
                continue;
            }
            let state = self.sessions.entry(r.session_id.clone()).or_insert_with(|| SessionState {
                events: Vec::new(),
                buffer: Vec::new(),
                version: 0,
                last_seen: now,
            });
            let at = state.events.partition_point(|e| e.timestamp <= r.timestamp);
            state.events.insert(at, TimedEvent { timestamp: r.timestamp, event });
            state.last_seen = now;
            if !touched.contains(&r.session_id) {
                touched.push(r.session_id.clone());
            }
        }
        report.sessions_touched = touched.len();
        for id in touched {
            let state = self.sessions.get_mut(&id).expect("touched session exists");
            let session = Session { session_id: id.clone(), events: state.events.clone() };
            let buffer = self.pipeline.clean(&session);
            if buffer != state.buffer {
                state.buffer = buffer;
                state.version += 1;
            }
        }
        report
    }

    /// Drops sessions idle for longer than `idle`; returns how many.
    pub fn evict_idle(&mut self, now: Instant, idle: Duration) -> usize {
        let before = self.sessions.len();
        self.sessions.retain(|_, s| now.saturating_duration_since(s.last_seen) <= idle);
        before - self.sessions.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmdrec_core::logs::{Action, CommandEvent, Timestamp};

    fn rec(session: &str, ms: i64, event: CommandEvent) -> LogRecord {
        LogRecord {
            session_id: session.into(),
            timestamp: Timestamp(ms),
            category: event.category(),
            message: event.message(),
            language: None,
        }
    }

    fn pair(session: &str, ms: i64, name: &str, loc: i64) -> Vec<LogRecord> {
        vec![
            rec(session, ms, CommandEvent::undo(Action::Event, name, loc)),
            rec(session, ms + 1, CommandEvent::undo(Action::EndEvent, name, loc)),
        ]
    }

    fn store() -> SessionStore {
        SessionStore::new(OnlinePipeline {
            config: PipelineConfig::standard(),
            lexicon: TranslationLexicon::default(),
            triggers: TriggerMap::default(),
            max_len: 3,
        })
    }

    fn names(s: &SessionStore, id: &str) -> Vec<String> {
        s.get(id).unwrap().buffer().iter().map(|i| i.name.clone()).collect()
    }

    #[test]
    fn undo_in_a_later_poll_still_cancels() {
        let mut s = store();
        s.ingest(&[pair("a", 0, "Wall", 1), pair("a", 10, "Door", 2)].concat());
        assert_eq!(names(&s, "a"), ["Wall", "Door"]);
        s.ingest(&[rec("a", 20, CommandEvent::undo(Action::UndoEvent, "Door", 2))]);
        assert_eq!(names(&s, "a"), ["Wall"]);
    }

    #[test]
    fn empty_poll_changes_nothing_and_buffer_is_capped() {
        let mut s = store();
        let recs: Vec<LogRecord> = (0..5).flat_map(|i| pair("a", i * 10, &format!("C{i}"), i)).collect();
        s.ingest(&recs);
        let v = s.get("a").unwrap().version;
        s.ingest(&[]);
        assert_eq!(s.get("a").unwrap().version, v);
        assert_eq!(names(&s, "a"), ["C2", "C3", "C4"]);
        assert_eq!(s.ids(), ["a"]);
    }

    #[test]
    fn idle_sessions_are_evicted() {
        let mut s = store();
        let t0 = Instant::now();
        s.ingest_at(&pair("a", 0, "Wall", 1), t0);
        s.ingest_at(&pair("b", 0, "Wall", 1), t0 + Duration::from_secs(100));
        assert_eq!(s.evict_idle(t0 + Duration::from_secs(150), Duration::from_secs(60)), 1);
        assert_eq!(s.ids(), ["b"]);
    }

    #[test]
    fn denylisted_and_garbled_records_are_counted() {
        let mut s = store();
        let mut bad = rec("a", 0, CommandEvent::tool("X", 1));
        bad.message = "nonsense".into();
        let zoom = rec("a", 1, CommandEvent::undo(Action::EndEvent, "Zoom", cmdrec_core::preprocess::ZOOM_LOC));
        let r = s.ingest(&[bad, zoom]);
        assert_eq!((r.undecodable, r.denylisted), (1, 1));
        assert_eq!(r.sessions_touched, 0);
    }
}

//! Statistical linkage between high-level Tool/Menu invocations and the
//! low-level events they cause.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Denylist;
use crate::logs::{Action, Category, Session, TimedEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TriggerKey {
    pub category: Category,
    pub loc_id: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    /// Minimum probability mass of the prominent event.
    pub p_min: f64,
    /// Minimum number of observed invocations before deciding.
    pub n_min: usize,
    /// Records searched after an invocation for its first completed event.
    pub lookahead: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig { p_min: 0.5, n_min: 20, lookahead: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerDecision {
    TriggersEvent(i64),
    NoEvent,
}

/// `None` is the outcome "no completed event inside the window".
pub type Outcome = Option<i64>;

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerEntry {
    pub name: String,
    pub support: usize,
    pub counts: BTreeMap<Outcome, usize>,
    pub event_names: BTreeMap<i64, String>,
    pub decision: TriggerDecision,
    pub insufficient_data: bool,
}

impl TriggerEntry {
    pub fn probability(&self, outcome: Outcome) -> f64 {
        if self.support == 0 {
            return 0.0;
        }
        self.counts.get(&outcome).copied().unwrap_or(0) as f64 / self.support as f64
    }

    pub fn distribution(&self) -> Vec<(Outcome, f64)> {
        self.counts.keys().map(|o| (*o, self.probability(*o))).collect()
    }

    /// Most probable real event; ties go to the smaller loc id.
    pub fn prominent_event(&self) -> Option<(i64, f64)> {
        self.counts
            .iter()
            .filter_map(|(o, n)| o.map(|loc| (loc, *n)))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(loc, n)| (loc, n as f64 / self.support as f64))
    }

    /// `P_max × distinct outcomes`; close to 1 for a flat distribution.
    pub fn uniformity(&self) -> f64 {
        let p_max = self.counts.keys().map(|o| self.probability(*o)).fold(0.0, f64::max);
        p_max * self.counts.len() as f64
    }

    fn decide(&mut self, config: &TriggerConfig) {
        self.insufficient_data = self.support < config.n_min;
        self.decision = match self.prominent_event() {
            Some((loc, p)) if !self.insufficient_data && p >= config.p_min => TriggerDecision::TriggersEvent(loc),
            _ => TriggerDecision::NoEvent,
        };
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriggerMap {
    pub entries: BTreeMap<TriggerKey, TriggerEntry>,
}

fn invocation_key(ev: &TimedEvent) -> Option<TriggerKey> {
    ev.event
        .action
        .is_invocation()
        .then(|| TriggerKey { category: ev.event.category(), loc_id: ev.event.loc_id })
}

/// Index of the first completed event after the invocation at `start`, searching at most
/// `lookahead` records and stopping at the next invocation. Ambiguous events are skipped.
pub fn first_completed_after(events: &[TimedEvent], start: usize, lookahead: usize, ambiguous: &Denylist) -> Option<usize> {
    let end = (start + 1 + lookahead).min(events.len());
    for (j, ev) in events.iter().enumerate().take(end).skip(start + 1) {
        match ev.event.action {
            Action::ToolInvoke | Action::MenuInvoke => return None,
            Action::EndEvent if !ambiguous.matches(&ev.event) => return Some(j),
            _ => {}
        }
    }
    None
}

/// Counts, per invocation key, which completed event follows it.
/// Expects sessions already filtered and undo-resolved.
pub fn build_trigger_map(corpus: &[Session], config: &TriggerConfig, ambiguous: &Denylist) -> TriggerMap {
    // Per-session counting, then a deterministic merge.
    let partials = corpus.iter().map(|s| count_session(s, config, ambiguous));
    let mut entries: BTreeMap<TriggerKey, TriggerEntry> = BTreeMap::new();
    for partial in partials {
        for (key, part) in partial {
            let entry = entries.entry(key).or_insert_with(|| TriggerEntry {
                name: part.name.clone(),
                support: 0,
                counts: BTreeMap::new(),
                event_names: BTreeMap::new(),
                decision: TriggerDecision::NoEvent,
                insufficient_data: true,
            });
            entry.support += part.support;
            for (o, n) in part.counts {
                *entry.counts.entry(o).or_default() += n;
            }
            for (loc, name) in part.event_names {
                entry.event_names.entry(loc).or_insert(name);
            }
        }
    }
    for entry in entries.values_mut() {
        entry.decide(config);
    }
    TriggerMap { entries }
}

fn count_session(session: &Session, config: &TriggerConfig, ambiguous: &Denylist) -> BTreeMap<TriggerKey, TriggerEntry> {
    let mut out: BTreeMap<TriggerKey, TriggerEntry> = BTreeMap::new();
    for (i, ev) in session.events.iter().enumerate() {
        let Some(key) = invocation_key(ev) else { continue };
        let hit = first_completed_after(&session.events, i, config.lookahead, ambiguous);
        let entry = out.entry(key).or_insert_with(|| TriggerEntry {
            name: ev.event.name.clone(),
            support: 0,
            counts: BTreeMap::new(),
            event_names: BTreeMap::new(),
            decision: TriggerDecision::NoEvent,
            insufficient_data: true,
        });
        entry.support += 1;
        let outcome = hit.map(|j| {
            let e = &session.events[j].event;
            entry.event_names.entry(e.loc_id).or_insert_with(|| e.name.clone());
            e.loc_id
        });
        *entry.counts.entry(outcome).or_default() += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubstituteReport {
    pub substituted: usize,
    pub removed_unfinished: usize,
    pub removed_ambiguous: usize,
}

impl SubstituteReport {
    pub fn merge(&mut self, other: &SubstituteReport) {
        self.substituted += other.substituted;
        self.removed_unfinished += other.removed_unfinished;
        self.removed_ambiguous += other.removed_ambiguous;
    }
}

/// Replaces trigger-caused events by their invoking command, drops invocations
/// whose decided event never completed, and drops ambiguous commands.
pub fn substitute_high_level(
    session: &Session,
    map: &TriggerMap,
    lookahead: usize,
    ambiguous: &Denylist,
) -> (Session, SubstituteReport) {
    let events = &session.events;
    let mut keep = vec![true; events.len()];
    let mut report = SubstituteReport::default();
    for (i, ev) in events.iter().enumerate() {
        let Some(key) = invocation_key(ev) else { continue };
        let Some(TriggerDecision::TriggersEvent(target)) = map.entries.get(&key).map(|e| e.decision) else {
            continue;
        };
        match first_completed_after(events, i, lookahead, ambiguous) {
            Some(j) if events[j].event.loc_id == target => {
                keep[j] = false;
                report.substituted += 1;
            }
            _ => {
                keep[i] = false;
                report.removed_unfinished += 1;
            }
        }
    }
    for (i, ev) in events.iter().enumerate() {
        if keep[i] && ambiguous.matches(&ev.event) {
            keep[i] = false;
            report.removed_ambiguous += 1;
        }
    }
    let events = events.iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| e.clone()).collect();
    (Session { session_id: session.session_id.clone(), events }, report)
}

pub const TRIGGER_HEADER: &str =
    "trigger_category\ttrigger_loc_id\ttrigger_name\tevent_loc_id\tevent_name\tprobability\tsupport\tdecision";

#[derive(Debug, Error)]
pub enum TriggerFileError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
}

impl TriggerMap {
    pub fn decision(&self, key: &TriggerKey) -> Option<TriggerDecision> {
        self.entries.get(key).map(|e| e.decision)
    }

    /// Keys decided as triggering, with their target event.
    pub fn triggers(&self) -> Vec<(TriggerKey, i64)> {
        self.entries
            .iter()
            .filter_map(|(k, e)| match e.decision {
                TriggerDecision::TriggersEvent(loc) => Some((*k, loc)),
                TriggerDecision::NoEvent => None,
            })
            .collect()
    }

    /// Editable table, one row per (trigger, outcome), for manual review.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TRIGGER_HEADER);
        out.push('\n');
        for (key, e) in &self.entries {
            for (outcome, p) in e.distribution() {
                let (loc, name) = match outcome {
                    Some(loc) => (loc.to_string(), e.event_names.get(&loc).cloned().unwrap_or_default()),
                    None => ("-".to_string(), "-".to_string()),
                };
                let decision = match e.decision {
                    TriggerDecision::TriggersEvent(t) if Some(t) == outcome => "triggers",
                    TriggerDecision::TriggersEvent(_) => "-",
                    TriggerDecision::NoEvent if e.insufficient_data => "insufficient",
                    TriggerDecision::NoEvent => "no_event",
                };
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    key.category, key.loc_id, e.name, loc, name, p, e.support, decision
                );
            }
        }
        out
    }

    /// Loads a (possibly hand-edited) table; a row marked `triggers` sets the decision.
    pub fn parse(text: &str) -> Result<TriggerMap, TriggerFileError> {
        let mut entries: BTreeMap<TriggerKey, TriggerEntry> = BTreeMap::new();
        let err = |line: usize, msg: &str| TriggerFileError::Line { line, msg: msg.to_string() };
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() || line.starts_with("trigger_category") {
                continue;
            }
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 8 {
                return Err(err(n, "expected 8 fields"));
            }
            let category = f[0].parse::<Category>().map_err(|_| err(n, "bad category"))?;
            let loc_id = f[1].parse::<i64>().map_err(|_| err(n, "bad trigger loc id"))?;
            let outcome = match f[3] {
                "-" => None,
                v => Some(v.parse::<i64>().map_err(|_| err(n, "bad event loc id"))?),
            };
            let p = f[5].parse::<f64>().map_err(|_| err(n, "bad probability"))?;
            let support = f[6].parse::<usize>().map_err(|_| err(n, "bad support"))?;
            let entry = entries.entry(TriggerKey { category, loc_id }).or_insert_with(|| TriggerEntry {
                name: f[2].to_string(),
                support,
                counts: BTreeMap::new(),
                event_names: BTreeMap::new(),
                decision: TriggerDecision::NoEvent,
                insufficient_data: false,
            });
            entry.counts.insert(outcome, (p * support as f64).round() as usize);
            if let Some(loc) = outcome {
                entry.event_names.insert(loc, f[4].to_string());
            }
            match f[7] {
                "triggers" => {
                    let loc = outcome.ok_or_else(|| err(n, "`triggers` on the no-event row"))?;
                    if matches!(entry.decision, TriggerDecision::TriggersEvent(other) if other != loc) {
                        return Err(err(n, "two `triggers` rows for one trigger"));
                    }
                    entry.decision = TriggerDecision::TriggersEvent(loc);
                }
                "insufficient" => entry.insufficient_data = true,
                "no_event" | "-" => {}
                _ => return Err(err(n, "unknown decision")),
            }
        }
        Ok(TriggerMap { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logs::{CommandEvent, Timestamp};

    fn tool(name: &str, loc: i64) -> TimedEvent {
        TimedEvent { timestamp: Timestamp(0), event: CommandEvent::tool(name, loc) }
    }
    fn done(name: &str, loc: i64) -> TimedEvent {
        TimedEvent { timestamp: Timestamp(0), event: CommandEvent::undo(Action::EndEvent, name, loc) }
    }
    fn session(events: Vec<TimedEvent>) -> Session {
        Session { session_id: "s".into(), events }
    }
    const CLIP: TriggerKey = TriggerKey { category: Category::Tool, loc_id: -226 };

    #[test]
    fn clipping_triggers_clip_surface() {
        let corpus: Vec<Session> = (0..20)
            .map(|_| session(vec![tool("Clipping", -226), done("Clip Surface", 169)]))
            .collect();
        let map = build_trigger_map(&corpus, &TriggerConfig::default(), &Denylist::default());
        let entry = &map.entries[&CLIP];
        assert_eq!(entry.decision, TriggerDecision::TriggersEvent(169));
        assert_eq!(entry.probability(Some(169)), 1.0);
        assert_eq!(entry.support, 20);
    }

    #[test]
    fn flat_distribution_means_no_event() {
        // Counting oracle: 5 events, 4 observations each → P_max = 4/20.
        let corpus: Vec<Session> = (0..20).map(|i| session(vec![tool("X", -1), done("E", 100 + i % 5)])).collect();
        let map = build_trigger_map(&corpus, &TriggerConfig::default(), &Denylist::default());
        let entry = &map.entries[&TriggerKey { category: Category::Tool, loc_id: -1 }];
        assert_eq!(entry.decision, TriggerDecision::NoEvent);
        assert_eq!(entry.prominent_event().unwrap().1, 0.2);
        assert!((entry.uniformity() - 1.0).abs() < 1e-12);
        assert!(!entry.insufficient_data);
    }

    #[test]
    fn small_support_is_flagged() {
        let corpus: Vec<Session> = (0..3).map(|_| session(vec![tool("Clipping", -226), done("Clip Surface", 169)])).collect();
        let map = build_trigger_map(&corpus, &TriggerConfig::default(), &Denylist::default());
        assert!(map.entries[&CLIP].insufficient_data);
        assert_eq!(map.entries[&CLIP].decision, TriggerDecision::NoEvent);
    }

    #[test]
    fn window_stops_at_next_invocation_and_lookahead() {
        let events = vec![tool("A", -1), tool("B", -2), done("E", 1)];
        assert_eq!(first_completed_after(&events, 0, 10, &Denylist::default()), None);
        assert_eq!(first_completed_after(&events, 1, 10, &Denylist::default()), Some(2));
        assert_eq!(first_completed_after(&events, 1, 0, &Denylist::default()), None);
        let ambiguous = Denylist::default_ambiguous();
        let events = vec![tool("A", -1), done("Plug-in Error", 9001), done("E", 1)];
        assert_eq!(first_completed_after(&events, 0, 10, &ambiguous), Some(2));
    }

    fn clip_map() -> TriggerMap {
        let corpus: Vec<Session> = (0..20)
            .map(|_| session(vec![tool("Clipping", -226), done("Clip Surface", 169)]))
            .collect();
        build_trigger_map(&corpus, &TriggerConfig::default(), &Denylist::default())
    }

    #[test]
    fn substitution_examples() {
        let map = clip_map();
        let none = Denylist::default();
        let (out, r) = substitute_high_level(&session(vec![tool("Clipping", -226), done("Clip Surface", 169)]), &map, 10, &none);
        assert_eq!(out.events, vec![tool("Clipping", -226)]);
        assert_eq!(r.substituted, 1);

        let (out, _) = substitute_high_level(&session(vec![done("Wall", 5)]), &map, 10, &none);
        assert_eq!(out.events, vec![done("Wall", 5)]);

        let (out, r) = substitute_high_level(&session(vec![tool("Clipping", -226)]), &map, 10, &none);
        assert!(out.events.is_empty());
        assert_eq!(r.removed_unfinished, 1);

        let (out, r) = substitute_high_level(
            &session(vec![done("Plug-in Error", 9001), done("Wall", 5)]),
            &map,
            10,
            &Denylist::default_ambiguous(),
        );
        assert_eq!(out.events, vec![done("Wall", 5)]);
        assert_eq!(r.removed_ambiguous, 1);
    }

    #[test]
    fn table_round_trip_and_review_edit() {
        let map = clip_map();
        let text = map.to_tsv();
        assert_eq!(TriggerMap::parse(&text).unwrap(), map);

        // A reviewer retracts the mapping.
        let edited = text.replace("\ttriggers", "\tno_event");
        let reviewed = TriggerMap::parse(&edited).unwrap();
        assert_eq!(reviewed.decision(&CLIP), Some(TriggerDecision::NoEvent));
    }
}

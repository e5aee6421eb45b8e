use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::logs::Session;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct LexiconEntry {
    pub loc_id: i64,
    pub language: String,
    pub source_name: String,
    pub english_name: String,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("line {line}: expected 4 tab-separated fields")]
    Fields { line: usize },
    #[error("line {line}: bad localization id {value:?}")]
    LocId { line: usize, value: String },
}

/// Multilingual dictionary keyed by localization id.
///
/// Lookup tries the exact `(loc_id, source name)` pair first, then falls back
/// to the loc id alone when every entry for it agrees on one English name.
#[derive(Debug, Clone, Default)]
pub struct TranslationLexicon {
    entries: Vec<LexiconEntry>,
    exact: HashMap<(i64, String), String>,
    by_loc: HashMap<i64, Option<String>>,
}

pub const LEXICON_HEADER: &str = "loc_id\tsource_language\tsource_name\tenglish_name";

impl TranslationLexicon {
    pub fn new(mut entries: Vec<LexiconEntry>) -> Self {
        entries.sort();
        entries.dedup();
        let mut exact = HashMap::new();
        let mut by_loc: HashMap<i64, Option<String>> = HashMap::new();
        for e in &entries {
            exact.insert((e.loc_id, e.source_name.clone()), e.english_name.clone());
            by_loc
                .entry(e.loc_id)
                .and_modify(|v| {
                    if v.as_deref() != Some(e.english_name.as_str()) {
                        *v = None;
                    }
                })
                .or_insert_with(|| Some(e.english_name.clone()));
        }
        TranslationLexicon { entries, exact, by_loc }
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn translate(&self, loc_id: i64, name: &str) -> Option<&str> {
        if let Some(en) = self.exact.get(&(loc_id, name.to_string())) {
            return Some(en);
        }
        self.by_loc.get(&loc_id).and_then(|v| v.as_deref())
    }

    /// Loc ids seen with two or more distinct names that the lexicon cannot resolve.
    pub fn missing_entries(&self, sessions: &[Session]) -> Vec<i64> {
        let mut names: BTreeMap<i64, BTreeSet<&str>> = BTreeMap::new();
        for s in sessions {
            for e in &s.events {
                names.entry(e.event.loc_id).or_default().insert(&e.event.name);
            }
        }
        names
            .into_iter()
            .filter(|(loc, ns)| ns.len() >= 2 && ns.iter().any(|n| self.translate(*loc, n).is_none()))
            .map(|(loc, _)| loc)
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (i == 0 && line.starts_with("loc_id")) {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(LexiconError::Fields { line: i + 1 });
            }
            let loc_id = fields[0]
                .trim()
                .parse()
                .map_err(|_| LexiconError::LocId { line: i + 1, value: fields[0].into() })?;
            entries.push(LexiconEntry {
                loc_id,
                language: fields[1].trim().into(),
                source_name: fields[2].trim().into(),
                english_name: fields[3].trim().into(),
            });
        }
        Ok(TranslationLexicon::new(entries))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(LEXICON_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", e.loc_id, e.language, e.source_name, e.english_name);
        }
        out
    }
}

/// Replaces every command name by its canonical English name. Returns the
/// number of events that had no lexicon entry (left unchanged).
pub fn align_languages(session: &Session, lexicon: &TranslationLexicon) -> (Session, usize) {
    let mut unmapped = 0;
    let mut out = session.clone();
    for ev in &mut out.events {
        match lexicon.translate(ev.event.loc_id, &ev.event.name) {
            Some(en) => {
                if en != ev.event.name {
                    ev.event.name = en.to_string();
                }
            }
            None => unmapped += 1,
        }
    }
    (out, unmapped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logs::{Action, CommandEvent, TimedEvent, Timestamp};

    fn entry(loc: i64, lang: &str, src: &str, en: &str) -> LexiconEntry {
        LexiconEntry { loc_id: loc, language: lang.into(), source_name: src.into(), english_name: en.into() }
    }

    fn fixture() -> TranslationLexicon {
        TranslationLexicon::new(vec![
            entry(-350, "de", "Verschieben", "Move"),
            entry(-350, "fr", "Déplacer", "Move"),
            entry(-350, "en", "Move", "Move"),
            entry(58, "de", "Löschen", "Delete"),
        ])
    }

    fn one(name: &str, loc: i64) -> Session {
        Session {
            session_id: "s".into(),
            events: vec![TimedEvent { timestamp: Timestamp(0), event: CommandEvent::undo(Action::EndEvent, name, loc) }],
        }
    }

    #[test]
    fn translates_by_loc_id() {
        let lex = fixture();
        let (out, unmapped) = align_languages(&one("Verschieben", -350), &lex);
        assert_eq!(out.events[0].event.name, "Move");
        assert_eq!(unmapped, 0);
        // Loc-id fallback covers a spelling the lexicon has never seen.
        let (out, _) = align_languages(&one("Verschiebn", -350), &lex);
        assert_eq!(out.events[0].event.name, "Move");
    }

    #[test]
    fn canonical_name_is_identity() {
        let (out, unmapped) = align_languages(&one("Move", -350), &fixture());
        assert_eq!(out, one("Move", -350));
        assert_eq!(unmapped, 0);
    }

    #[test]
    fn unknown_loc_passes_through() {
        let (out, unmapped) = align_languages(&one("Wand", 7), &fixture());
        assert_eq!(out.events[0].event.name, "Wand");
        assert_eq!(unmapped, 1);
    }

    #[test]
    fn ambiguous_loc_needs_exact_match() {
        let lex = TranslationLexicon::new(vec![entry(1, "de", "A", "Alpha"), entry(1, "de", "B", "Beta")]);
        assert_eq!(lex.translate(1, "A"), Some("Alpha"));
        assert_eq!(lex.translate(1, "C"), None);
    }

    #[test]
    fn tsv_round_trip() {
        let lex = fixture();
        let back = TranslationLexicon::parse(&lex.to_tsv()).unwrap();
        assert_eq!(back.entries(), lex.entries());
    }

    #[test]
    fn reports_missing_multilingual_locs() {
        let mut s = one("Wand", 7);
        s.events.extend(one("Wall", 7).events);
        s.events.extend(one("Löschen", 58).events);
        assert_eq!(fixture().missing_entries(&[s]), [7]);
    }
}

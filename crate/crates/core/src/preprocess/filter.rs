use std::collections::BTreeMap;

use super::Denylist;
use crate::logs::{Action, Session};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub removed_by_rule: BTreeMap<String, usize>,
    pub aborted: usize,
}

impl FilterReport {
    pub fn merge(&mut self, other: &FilterReport) {
        for (k, v) in &other.removed_by_rule {
            *self.removed_by_rule.entry(k.clone()).or_default() += v;
        }
        self.aborted += other.aborted;
    }

    pub fn removed(&self) -> usize {
        self.removed_by_rule.values().sum::<usize>() + self.aborted
    }
}

/// Drops denylisted events, then any `Event` that is not closed by its
/// `End Event` before the next `Event` begins or the session ends.
pub fn filter_noise(session: &Session, denylist: &Denylist) -> (Session, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(session.events.len());
    for ev in &session.events {
        match denylist.first_match(&ev.event) {
            Some(rule) => *report.removed_by_rule.entry(rule.label.clone()).or_default() += 1,
            None => kept.push(ev),
        }
    }

    let mut aborted = vec![false; kept.len()];
    let mut open: Option<usize> = None;
    for (i, ev) in kept.iter().enumerate() {
        match ev.event.action {
            Action::Event => {
                if let Some(prev) = open.replace(i) {
                    aborted[prev] = true;
                }
            }
            Action::EndEvent => {
                if open.is_some_and(|o| kept[o].event.loc_id == ev.event.loc_id) {
                    open = None;
                }
            }
            _ => {}
        }
    }
    if let Some(o) = open {
        aborted[o] = true;
    }
    report.aborted = aborted.iter().filter(|a| **a).count();

    let events = kept
        .into_iter()
        .zip(aborted)
        .filter(|(_, a)| !a)
        .map(|(e, _)| e.clone())
        .collect();
    (Session { session_id: session.session_id.clone(), events }, report)
}

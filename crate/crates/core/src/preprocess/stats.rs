use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::CleanSequence;
use crate::logs::Category;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub sessions: usize,
    pub classes: usize,
    pub records: BTreeMap<Category, usize>,
}

impl StatsReport {
    pub fn records_of(&self, category: Category) -> usize {
        self.records.get(&category).copied().unwrap_or(0)
    }
}

/// Distinct classes are distinct `(name, loc_id)` pairs.
pub fn dataset_stats<'a>(sequences: impl IntoIterator<Item = &'a CleanSequence>) -> StatsReport {
    let mut report = StatsReport::default();
    let mut classes = BTreeSet::new();
    for c in Category::ALL {
        report.records.insert(c, 0);
    }
    for s in sequences {
        report.sessions += 1;
        for it in &s.items {
            classes.insert((it.name.as_str(), it.loc_id));
            *report.records.entry(it.category).or_default() += 1;
        }
    }
    report.classes = classes.len();
    report
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>10} {:>10} {:>10} {:>10}", "sessions", "classes", "UNDO", "Tool", "Menu")?;
        write!(
            f,
            "{:>10} {:>10} {:>10} {:>10} {:>10}",
            self.sessions,
            self.classes,
            self.records_of(Category::Undo),
            self.records_of(Category::Tool),
            self.records_of(Category::Menu)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::CleanItem;

    #[test]
    fn empty_is_all_zero() {
        let r = dataset_stats(&[]);
        assert_eq!((r.sessions, r.classes), (0, 0));
        assert!(Category::ALL.iter().all(|c| r.records_of(*c) == 0));
    }

    #[test]
    fn counts_by_category() {
        let item = |n: &str, c, l| CleanItem { name: n.into(), category: c, loc_id: l, dt: 0.0 };
        let seqs = [
            CleanSequence { session_id: "a".into(), items: vec![item("W", Category::Undo, 1), item("T", Category::Tool, -1)] },
            CleanSequence { session_id: "b".into(), items: vec![item("W", Category::Undo, 1), item("M", Category::Menu, -5)] },
        ];
        let r = dataset_stats(&seqs);
        assert_eq!(r.sessions, 2);
        assert_eq!(r.classes, 3);
        assert_eq!(r.records_of(Category::Undo), 2);
        assert!(r.to_string().contains("sessions"));
    }
}

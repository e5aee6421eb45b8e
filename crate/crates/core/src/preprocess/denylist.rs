use serde::{Deserialize, Serialize};

use crate::logs::{Action, Category, CommandEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// Not a user action at all (internal bookkeeping, selection only).
    Semantic,
    /// Frequent but uninformative for recommendation (navigation).
    Statistical,
}

/// Matches when every specified field equals the event's field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRule {
    pub label: String,
    pub kind: RuleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc_id: Option<i64>,
}

impl MatchRule {
    pub fn by_name(label: &str, kind: RuleKind, name: &str) -> Self {
        MatchRule { label: label.into(), kind, category: None, action: None, name: Some(name.into()), loc_id: None }
    }

    pub fn by_loc(label: &str, kind: RuleKind, loc_id: i64) -> Self {
        MatchRule { label: label.into(), kind, category: None, action: None, name: None, loc_id: Some(loc_id) }
    }

    pub fn matches(&self, event: &CommandEvent) -> bool {
        self.category.is_none_or(|c| c == event.category())
            && self.action.is_none_or(|a| a == event.action)
            && self.name.as_ref().is_none_or(|n| *n == event.name)
            && self.loc_id.is_none_or(|l| l == event.loc_id)
    }
}

/// An ordered list of match rules; the first matching rule is credited.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Denylist {
    #[serde(default)]
    pub rules: Vec<MatchRule>,
}

/// Localization ids of the navigation/internal events the default list removes.
pub const ZOOM_LOC: i64 = 242;
pub const PAN_LOC: i64 = 243;
pub const SCROLL_LOC: i64 = 244;
pub const SELECTION_LOC: i64 = 245;
pub const INTERNAL_LOC: i64 = 246;
/// Localization id of the catch-all error entry some third-party plug-ins log.
pub const PLUGIN_ERROR_LOC: i64 = 9001;

impl Denylist {
    pub fn new(rules: Vec<MatchRule>) -> Self {
        Denylist { rules }
    }

    /// Navigation, selection and internal events.
    pub fn default_noise() -> Self {
        use RuleKind::*;
        Denylist::new(vec![
            MatchRule::by_loc("zoom", Statistical, ZOOM_LOC),
            MatchRule::by_name("zoom", Statistical, "Zoom"),
            MatchRule::by_loc("pan", Statistical, PAN_LOC),
            MatchRule::by_name("pan", Statistical, "Pan"),
            MatchRule::by_loc("scroll", Statistical, SCROLL_LOC),
            MatchRule::by_name("scroll", Statistical, "Scroll"),
            MatchRule::by_loc("selection", Semantic, SELECTION_LOC),
            MatchRule::by_name("selection", Semantic, "Selection"),
            MatchRule::by_loc("internal", Semantic, INTERNAL_LOC),
            MatchRule::by_name("internal", Semantic, "Internal Update"),
        ])
    }

    /// Ambiguous commands dropped during substitution.
    pub fn default_ambiguous() -> Self {
        Denylist::new(vec![MatchRule::by_loc("plugin-error", RuleKind::Semantic, PLUGIN_ERROR_LOC)])
    }

    pub fn first_match(&self, event: &CommandEvent) -> Option<&MatchRule> {
        self.rules.iter().find(|r| r.matches(event))
    }

    pub fn matches(&self, event: &CommandEvent) -> bool {
        self.first_match(event).is_some()
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("denylist serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_match_on_all_given_fields() {
        let zoom = CommandEvent::undo(Action::EndEvent, "Zoom", 242);
        let wall = CommandEvent::undo(Action::EndEvent, "Wall", 10);
        let list = Denylist::default_noise();
        assert_eq!(list.first_match(&zoom).unwrap().label, "zoom");
        assert!(!list.matches(&wall));

        let rule = MatchRule {
            label: "tool-zoom".into(),
            kind: RuleKind::Statistical,
            category: Some(Category::Tool),
            action: None,
            name: Some("Zoom".into()),
            loc_id: None,
        };
        assert!(!rule.matches(&CommandEvent::undo(Action::EndEvent, "Zoom", 1)));
        assert!(rule.matches(&CommandEvent::tool("Zoom", -1)));
    }

    #[test]
    fn toml_round_trip() {
        let list = Denylist::default_noise();
        let text = list.to_toml();
        assert_eq!(Denylist::from_toml(&text).unwrap(), list);
        let custom = Denylist::from_toml(
            "[[rules]]\nlabel = \"pan\"\nkind = \"statistical\"\ncategory = \"UNDO\"\nname = \"Pan\"\n",
        )
        .unwrap();
        assert_eq!(custom.rules[0].category, Some(Category::Undo));
    }
}

//! Message grammar for the three retained log categories.
//!
//! ```text
//! UNDO : <Action>: [(<modifier>) ]<name> (<loc_id>)
//! Tool : Tool: <name> (<loc_id>)
//! Menu : Menu: <name> - (<loc_id>) (<sub_id>)
//! ```

use super::{Action, Category, CommandEvent};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("unknown action prefix {0:?}")]
    UnknownActionPrefix(String),
    #[error("missing localization id in {0:?}")]
    MissingLocId(String),
    #[error("empty command name in {0:?}")]
    EmptyName(String),
    #[error("malformed menu message {0:?}")]
    MalformedMenu(String),
}

impl MessageError {
    pub fn reason(&self) -> &'static str {
        match self {
            MessageError::UnknownActionPrefix(_) => "unknown_action",
            MessageError::MissingLocId(_) => "missing_loc_id",
            MessageError::EmptyName(_) => "empty_name",
            MessageError::MalformedMenu(_) => "malformed_menu",
        }
    }
}

const UNDO_ACTIONS: [(&str, Action); 4] = [
    ("End Event", Action::EndEvent),
    ("Undo Event", Action::UndoEvent),
    ("Redo Event", Action::RedoEvent),
    ("Event", Action::Event),
];

/// Splits `"<head> (<int>)"` into `(head, int)`; the integer group must close the text.
fn split_trailing_int(text: &str) -> Option<(&str, i64)> {
    let text = text.trim_end();
    let inner = text.strip_suffix(')')?;
    let open = inner.rfind('(')?;
    let value = inner[open + 1..].trim().parse::<i64>().ok()?;
    Some((inner[..open].trim_end(), value))
}

/// Decodes one message of the given category into a [`CommandEvent`].
pub fn parse_message(category: Category, message: &str) -> Result<CommandEvent, MessageError> {
    let message = message.trim();
    match category {
        Category::Tool => {
            let body = message
                .strip_prefix("Tool:")
                .ok_or_else(|| MessageError::UnknownActionPrefix(message.to_string()))?;
            let (name, loc_id) =
                split_trailing_int(body).ok_or_else(|| MessageError::MissingLocId(message.to_string()))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(MessageError::EmptyName(message.to_string()));
            }
            Ok(CommandEvent::tool(name, loc_id))
        }
        Category::Menu => {
            let body = message
                .strip_prefix("Menu:")
                .ok_or_else(|| MessageError::UnknownActionPrefix(message.to_string()))?;
            let (head, sub_id) =
                split_trailing_int(body).ok_or_else(|| MessageError::MissingLocId(message.to_string()))?;
            let (name, loc_id) =
                split_trailing_int(head).ok_or_else(|| MessageError::MissingLocId(message.to_string()))?;
            let name = name
                .trim_end()
                .strip_suffix('-')
                .ok_or_else(|| MessageError::MalformedMenu(message.to_string()))?
                .trim();
            if name.is_empty() {
                return Err(MessageError::EmptyName(message.to_string()));
            }
            Ok(CommandEvent::menu(name, loc_id, sub_id))
        }
        Category::Undo => {
            let (prefix, body) = message
                .split_once(':')
                .ok_or_else(|| MessageError::UnknownActionPrefix(message.to_string()))?;
            let action = UNDO_ACTIONS
                .iter()
                .find(|(p, _)| *p == prefix.trim())
                .map(|(_, a)| *a)
                .ok_or_else(|| MessageError::UnknownActionPrefix(prefix.trim().to_string()))?;
            let mut body = body.trim_start();
            let mut modifier = None;
            if let Some(rest) = body.strip_prefix('(') {
                // A modifier group is only present when more text follows it.
                if let Some(close) = rest.find(')') {
                    let after = rest[close + 1..].trim_start();
                    if split_trailing_int(after).is_some() {
                        modifier = Some(rest[..close].to_string());
                        body = after;
                    }
                }
            }
            let (name, loc_id) =
                split_trailing_int(body).ok_or_else(|| MessageError::MissingLocId(message.to_string()))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(MessageError::EmptyName(message.to_string()));
            }
            Ok(CommandEvent {
                action,
                name: name.to_string(),
                loc_id,
                modifier,
                menu_sub_id: None,
            })
        }
    }
}

/// Renders an event back into the message grammar; inverse of [`parse_message`].
pub fn format_message(event: &CommandEvent) -> String {
    match event.action {
        Action::ToolInvoke => format!("Tool: {} ({})", event.name, event.loc_id),
        Action::MenuInvoke => format!(
            "Menu: {} - ({}) ({})",
            event.name,
            event.loc_id,
            event.menu_sub_id.unwrap_or(0)
        ),
        action => {
            let prefix = match action {
                Action::Event => "Event",
                Action::EndEvent => "End Event",
                Action::UndoEvent => "Undo Event",
                Action::RedoEvent => "Redo Event",
                Action::ToolInvoke | Action::MenuInvoke => unreachable!(),
            };
            match &event.modifier {
                Some(m) => format!("{prefix}: ({m}) {} ({})", event.name, event.loc_id),
                None => format!("{prefix}: {} ({})", event.name, event.loc_id),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn figure_examples() {
        let ev = parse_message(Category::Undo, "Event: (MAX-20) Reshape (279)").unwrap();
        assert_eq!(ev.action, Action::Event);
        assert_eq!(ev.modifier.as_deref(), Some("MAX-20"));
        assert_eq!(ev.name, "Reshape");
        assert_eq!(ev.loc_id, 279);

        let ev = parse_message(Category::Tool, "Tool: Reshape (-214)").unwrap();
        assert_eq!(ev.action, Action::ToolInvoke);
        assert_eq!((ev.name.as_str(), ev.loc_id), ("Reshape", -214));

        let ev = parse_message(Category::Menu, "Menu: Save - (-5) (0)").unwrap();
        assert_eq!(ev.action, Action::MenuInvoke);
        assert_eq!((ev.name.as_str(), ev.loc_id, ev.menu_sub_id), ("Save", -5, Some(0)));

        let ev = parse_message(Category::Undo, "End Event: Zoom (242)").unwrap();
        assert_eq!((ev.action, ev.loc_id), (Action::EndEvent, 242));
    }

    #[test]
    fn names_with_spaces_and_parentheses() {
        let ev = parse_message(Category::Undo, "End Event: Create Database Worksheet (19)").unwrap();
        assert_eq!(ev.name, "Create Database Worksheet");
        let ev = parse_message(Category::Menu, "Menu: Create Report - (-172) (0)").unwrap();
        assert_eq!(ev.name, "Create Report");
        let ev = parse_message(Category::Tool, "Tool: Move by Points (-352)").unwrap();
        assert_eq!(ev.name, "Move by Points");
    }

    #[test]
    fn error_paths() {
        assert!(matches!(
            parse_message(Category::Undo, "Begin Group: Foo (3)"),
            Err(MessageError::UnknownActionPrefix(_))
        ));
        assert!(matches!(
            parse_message(Category::Undo, "End Event: Zoom"),
            Err(MessageError::MissingLocId(_))
        ));
        assert!(matches!(
            parse_message(Category::Tool, "Tool: Zoom (abc)"),
            Err(MessageError::MissingLocId(_))
        ));
        assert!(matches!(
            parse_message(Category::Menu, "Menu: Save (-5) (0)"),
            Err(MessageError::MalformedMenu(_))
        ));
    }

    fn arb_event() -> impl Strategy<Value = CommandEvent> {
        let name = "[A-Za-z][A-Za-z0-9]{0,6}( [A-Za-z0-9]{1,6}){0,3}";
        let modifier = proptest::option::of("[A-Z]{1,4}-[0-9]{1,3}");
        (0usize..6, name, -2000i64..2000, modifier, 0i64..5).prop_map(|(a, name, loc, modifier, sub)| {
            let action = [
                Action::Event,
                Action::EndEvent,
                Action::UndoEvent,
                Action::RedoEvent,
                Action::ToolInvoke,
                Action::MenuInvoke,
            ][a];
            CommandEvent {
                action,
                name,
                loc_id: loc,
                modifier: if action.category() == Category::Undo { modifier } else { None },
                menu_sub_id: if action == Action::MenuInvoke { Some(sub) } else { None },
            }
        })
    }

    proptest! {
        #[test]
        fn grammar_round_trip(ev in arb_event()) {
            let text = format_message(&ev);
            let back = parse_message(ev.action.category(), &text).unwrap();
            prop_assert_eq!(back, ev);
        }
    }
}

use crate::logs::{Action, Session};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UndoReport {
    pub undos: usize,
    pub redos: usize,
    /// Undo with empty history or Redo with an empty redo stack.
    pub anomalies: usize,
}

impl UndoReport {
    pub fn merge(&mut self, other: &UndoReport) {
        self.undos += other.undos;
        self.redos += other.redos;
        self.anomalies += other.anomalies;
    }
}

/// A completed event: the `End Event` index and its opening `Event`, if logged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub end: usize,
    pub open: Option<usize>,
}

/// Undo/redo stacks over indices into an append-only event list.
///
/// Undo retracts the most recent surviving completion; redo restores the
/// most recently retracted one; a new completion invalidates the redo stack.
#[derive(Debug, Clone, Default)]
pub struct UndoMachine {
    history: Vec<Completion>,
    redo: Vec<Completion>,
    last_open: Option<(usize, i64)>,
    pub report: UndoReport,
}

impl UndoMachine {
    /// Feeds the action at `index`; `alive` is updated for retracted or restored entries.
    pub fn step(&mut self, index: usize, action: Action, loc_id: i64, alive: &mut [bool]) {
        match action {
            Action::Event => self.last_open = Some((index, loc_id)),
            Action::EndEvent => {
                let open = match self.last_open.take() {
                    Some((i, l)) if l == loc_id => Some(i),
                    other => {
                        self.last_open = other;
                        None
                    }
                };
                self.history.push(Completion { end: index, open });
                self.redo.clear();
            }
            Action::UndoEvent => {
                self.report.undos += 1;
                alive[index] = false;
                match self.history.pop() {
                    Some(c) => {
                        set(alive, c, false);
                        self.redo.push(c);
                    }
                    None => self.report.anomalies += 1,
                }
            }
            Action::RedoEvent => {
                self.report.redos += 1;
                alive[index] = false;
                match self.redo.pop() {
                    Some(c) => {
                        set(alive, c, true);
                        self.history.push(c);
                    }
                    None => self.report.anomalies += 1,
                }
            }
            Action::ToolInvoke | Action::MenuInvoke => {}
        }
    }

    /// Shifts every stored index down by `by` after the list's head was dropped.
    /// Completions that referenced dropped entries are forgotten.
    pub fn rebase(&mut self, by: usize) {
        let shift = |c: &Completion| -> Option<Completion> {
            Some(Completion { end: c.end.checked_sub(by)?, open: c.open.and_then(|o| o.checked_sub(by)) })
        };
        self.history = self.history.iter().filter_map(shift).collect();
        self.redo = self.redo.iter().filter_map(shift).collect();
        self.last_open = self.last_open.and_then(|(i, l)| Some((i.checked_sub(by)?, l)));
    }
}

fn set(alive: &mut [bool], c: Completion, value: bool) {
    alive[c.end] = value;
    if let Some(o) = c.open {
        alive[o] = value;
    }
}

/// Replays undo/redo over a filtered session. Undo and Redo records never
/// appear in the output; retracted events disappear together with their
/// opening `Event` record.
pub fn resolve_undo_redo(session: &Session) -> (Session, UndoReport) {
    let mut alive = vec![true; session.events.len()];
    let mut machine = UndoMachine::default();
    for (i, ev) in session.events.iter().enumerate() {
        machine.step(i, ev.event.action, ev.event.loc_id, &mut alive);
    }
    let events = session
        .events
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(e, _)| e.clone())
        .collect();
    (Session { session_id: session.session_id.clone(), events }, machine.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logs::{CommandEvent, TimedEvent, Timestamp};

    #[derive(Clone, Copy, Debug)]
    enum Op {
        E,
        U,
        R,
    }

    /// Document replay: the list of applied events, mutated per action.
    fn replay_oracle(ops: &[Op]) -> Vec<usize> {
        let mut applied = Vec::new();
        let mut undone = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            match op {
                Op::E => {
                    applied.push(i);
                    undone.clear();
                }
                Op::U => {
                    if let Some(e) = applied.pop() {
                        undone.push(e);
                    }
                }
                Op::R => {
                    if let Some(e) = undone.pop() {
                        applied.push(e);
                    }
                }
            }
        }
        applied
    }

    fn session_of(ops: &[Op]) -> Session {
        let events = ops
            .iter()
            .enumerate()
            .map(|(i, op)| {
                let action = match op {
                    Op::E => Action::EndEvent,
                    Op::U => Action::UndoEvent,
                    Op::R => Action::RedoEvent,
                };
                TimedEvent { timestamp: Timestamp(i as i64), event: CommandEvent::undo(action, &format!("E{i}"), i as i64) }
            })
            .collect();
        Session { session_id: "s".into(), events }
    }

    fn resolved(ops: &[Op]) -> Vec<usize> {
        let (out, _) = resolve_undo_redo(&session_of(ops));
        out.events.iter().map(|e| e.event.loc_id as usize).collect()
    }

    #[test]
    fn named_examples() {
        use Op::*;
        assert_eq!(resolved(&[E, U]), Vec::<usize>::new());
        assert_eq!(resolved(&[E, E, U, R]), [0, 1]);
        assert_eq!(resolved(&[E, U, E, R]), [2]);
    }

    #[test]
    fn anomalies_are_counted_not_fatal() {
        use Op::*;
        let (out, report) = resolve_undo_redo(&session_of(&[U, R, E]));
        assert_eq!(out.events.len(), 1);
        assert_eq!(report.anomalies, 2);
    }

    #[test]
    fn exhaustive_against_replay_up_to_length_8() {
        let alphabet = [Op::E, Op::U, Op::R];
        for len in 0..=8u32 {
            for code in 0..3usize.pow(len) {
                let mut c = code;
                let ops: Vec<Op> = (0..len)
                    .map(|_| {
                        let op = alphabet[c % 3];
                        c /= 3;
                        op
                    })
                    .collect();
                assert_eq!(resolved(&ops), replay_oracle(&ops), "{ops:?}");
            }
        }
    }

    #[test]
    fn undo_takes_the_opening_record_along() {
        let mk = |a, n: &str, l| TimedEvent { timestamp: Timestamp(0), event: CommandEvent::undo(a, n, l) };
        let session = Session {
            session_id: "s".into(),
            events: vec![
                mk(Action::Event, "Wall", 1),
                mk(Action::EndEvent, "Wall", 1),
                TimedEvent { timestamp: Timestamp(0), event: CommandEvent::tool("Door", -2) },
                mk(Action::UndoEvent, "Wall", 1),
            ],
        };
        let (out, _) = resolve_undo_redo(&session);
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.events[0].event.action, Action::ToolInvoke);
    }

    #[test]
    fn idempotent() {
        use Op::*;
        let once = resolve_undo_redo(&session_of(&[E, E, U, E, R, U, U, R])).0;
        let twice = resolve_undo_redo(&once).0;
        assert_eq!(once, twice);
    }
}

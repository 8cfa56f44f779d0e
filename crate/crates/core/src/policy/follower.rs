//! Replays what a retrieved successful trajectory of the same task kind did
//! after picking its object up, rewritten for the current object and target.

use super::naive::naive_step;
use super::world::Situation;
use super::{Policy, PolicyError};
use crate::env::{receptacle_type, TaskKind, INVALID_ACTION_OBSERVATION};
use crate::prompt::{FAILURE_HEADER, SUCCESS_HEADER};
use crate::traj::{parse_formatted, Role, TrajFormat, Turn};

#[derive(Debug, Clone)]
pub struct MemoryFollower {
    max_action_chars: usize,
}

impl MemoryFollower {
    pub fn new(max_action_chars: usize) -> Self {
        Self { max_action_chars }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Lit(String),
    /// The retrieved delivery receptacle instance.
    Target,
    /// An instance of the retrieved object type.
    Held,
    /// The bare retrieved object type.
    Object,
}

/// Post-acquisition actions, one segment per take in the source trajectory.
#[derive(Debug, Clone)]
struct Program {
    segments: Vec<Vec<Vec<Tok>>>,
}

fn is_approach(action: &[Tok]) -> bool {
    matches!(action.first(), Some(Tok::Lit(w)) if w == "go" || w == "open")
}

fn tokenize(action: &str, object: &str, target: &str) -> Vec<Tok> {
    let words: Vec<&str> = action.split(' ').collect();
    let target: Vec<&str> = target.split(' ').collect();
    let mut out = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        if words[i..].starts_with(&target) {
            out.push(Tok::Target);
            i += target.len();
        } else if words[i] == object {
            let numbered = words
                .get(i + 1)
                .is_some_and(|w| !w.is_empty() && w.chars().all(|c| c.is_ascii_digit()));
            out.push(if numbered { Tok::Held } else { Tok::Object });
            i += if numbered { 2 } else { 1 };
        } else {
            out.push(Tok::Lit(words[i].to_string()));
            i += 1;
        }
    }
    out
}

impl Program {
    fn compile(example: &[Turn], kind: TaskKind) -> Option<Program> {
        let s = Situation::from_turns(example);
        let task = s.task.as_ref()?;
        if task.kind != kind {
            return None;
        }
        let first = *s.takes.first()?;
        let delivered_to = s.outcomes.iter().find_map(|o| {
            let (object, place) = o
                .strip_prefix("You move the ")?
                .trim_end_matches('.')
                .split_once(" to the ")?;
            (receptacle_type(object) == task.object && receptacle_type(place) == task.receptacle)
                .then(|| place.to_string())
        });
        let target = delivered_to.or_else(|| s.target())?;

        let mut segments: Vec<Vec<Vec<Tok>>> = vec![Vec::new()];
        for i in first + 1..s.actions.len() {
            let seg = segments.last_mut().expect("never empty");
            if s.takes.contains(&i) {
                // The approach to the next pickup belongs to acquisition.
                while seg.last().is_some_and(|a| is_approach(a)) {
                    seg.pop();
                }
                segments.push(Vec::new());
                continue;
            }
            if s.outcomes[i] == INVALID_ACTION_OBSERVATION {
                continue;
            }
            seg.push(tokenize(&s.actions[i], &task.object, &target));
        }
        Some(Program { segments })
    }

    fn render(action: &[Tok], object: &str, held: &str, target: &str) -> String {
        action
            .iter()
            .map(|t| match t {
                Tok::Lit(w) => w.as_str(),
                Tok::Target => target,
                Tok::Held => held,
                Tok::Object => object,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Turn lists of the successful group of the memory block in `system`.
fn successful_examples(system: &str) -> Vec<Vec<Turn>> {
    let Some(at) = system.find(SUCCESS_HEADER) else {
        return Vec::new();
    };
    let region = &system[at + SUCCESS_HEADER.len()..];

    if region.starts_with('[') {
        let mut out = Vec::new();
        let mut stream =
            serde_json::Deserializer::from_str(region).into_iter::<serde::de::IgnoredAny>();
        let mut start = 0;
        while let Some(Ok(_)) = stream.next() {
            let end = stream.byte_offset();
            let text = region[start..end].trim_start();
            let turns = [
                TrajFormat::ChatJson,
                TrajFormat::AgenticJson,
                TrajFormat::CompactJson,
            ]
            .into_iter()
            .find_map(|f| parse_formatted(text, f).ok());
            match turns {
                Some(t) => out.push(t),
                None => break,
            }
            start = end;
        }
        return out;
    }

    let end = region
        .find(&format!(". {FAILURE_HEADER}"))
        .unwrap_or_else(|| region.len() - usize::from(region.ends_with('.')));
    let Ok(turns) = parse_formatted(&region[..end], TrajFormat::Textual) else {
        return Vec::new();
    };
    let mut out: Vec<Vec<Turn>> = Vec::new();
    for turn in turns {
        if turn.role == Role::User && turn.content.contains("Your task is to:") || out.is_empty() {
            out.push(Vec::new());
        }
        out.last_mut().expect("pushed above").push(turn);
    }
    out
}

impl Policy for MemoryFollower {
    fn name(&self) -> &str {
        "memory_follower"
    }

    fn reply(&self, context: &[Turn]) -> Result<String, PolicyError> {
        let s = Situation::from_turns(context);
        let Some(task) = &s.task else {
            return Ok(super::SENTINEL_ACTION.into());
        };
        let program = context
            .iter()
            .find(|t| t.role == Role::System)
            .map(|t| successful_examples(&t.content))
            .unwrap_or_default()
            .iter()
            .find_map(|ex| Program::compile(ex, task.kind));
        let Some(program) = program else {
            return Ok(naive_step(&s));
        };
        let Some(&last_take) = s.takes.last() else {
            return Ok(s.acquire());
        };

        let j = s.takes.len() - 1;
        let issued = s.actions.len() - last_take - 1;
        if let Some(action) = program.segments.get(j).and_then(|seg| seg.get(issued)) {
            let held = s
                .holding
                .clone()
                .or_else(|| s.taken.last().cloned())
                .unwrap_or_default();
            let target = s.target().unwrap_or_default();
            return Ok(Program::render(action, &task.object, &held, &target));
        }
        Ok(match &s.holding {
            Some(held) => s.deliver(held),
            None if j + 1 < program.segments.len() => s.acquire(),
            None => super::SENTINEL_ACTION.into(),
        })
    }

    fn max_action_chars(&self) -> usize {
        self.max_action_chars
    }
}

//! Retrieval queries, the memory block, and the chat context handed to a policy.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::traj::{format_turns, Role, TrajFormat, Trajectory, Turn};

pub const SUCCESS_HEADER: &str = "These are examples of successful trajectories: ";
pub const FAILURE_HEADER: &str = "These are examples of unsuccessful trajectories: ";
/// Separator between formatted trajectories inside one group.
pub const ITEM_SEPARATOR: &str = "\n";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("task description is empty")]
    EmptyDescription,
    #[error("history prefix is empty")]
    EmptyHistory,
    #[error("history must end with a user turn, last turn is {0}")]
    HistoryNotAtObservation(&'static str),
    #[error("no prompt template for environment `{0}`")]
    UnknownTemplate(String),
    #[error("reading template {path}: {source}")]
    Io { path: String, source: io::Error },
}

pub fn build_static_query(task_description: &str) -> Result<String, PromptError> {
    if task_description.trim().is_empty() {
        return Err(PromptError::EmptyDescription);
    }
    Ok(task_description.to_string())
}

/// Chat-JSON serialization of a history prefix (system turns excluded).
pub fn build_dynamic_query(history: &Trajectory) -> Result<String, PromptError> {
    let turns = history.dialogue();
    if turns.is_empty() {
        return Err(PromptError::EmptyHistory);
    }
    Ok(format_turns(turns, TrajFormat::ChatJson))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryBlock {
    pub successful: Vec<String>,
    pub unsuccessful: Vec<String>,
    pub fmt: TrajFormat,
    pub rendered: String,
}

impl MemoryBlock {
    pub fn empty(fmt: TrajFormat) -> Self {
        Self {
            fmt,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rendered.is_empty()
    }
}

/// Partitions retrieved trajectories by outcome, orders each group by
/// descending score, and renders the two-sentence template. A group with no
/// members drops its sentence; no members at all renders the empty string.
pub fn build_memory_block(retrieved: &[(&Trajectory, f64)], fmt: TrajFormat) -> MemoryBlock {
    let mut ordered: Vec<&(&Trajectory, f64)> = retrieved.iter().collect();
    ordered.sort_by(|a, b| b.1.total_cmp(&a.1));

    let (succ, fail): (Vec<_>, Vec<_>) = ordered.into_iter().partition(|(t, _)| t.is_success());
    let successful: Vec<String> = succ
        .iter()
        .map(|(t, _)| format_turns(&t.turns, fmt))
        .collect();
    let unsuccessful: Vec<String> = fail
        .iter()
        .map(|(t, _)| format_turns(&t.turns, fmt))
        .collect();

    let mut sentences = Vec::with_capacity(2);
    if !successful.is_empty() {
        sentences.push(format!(
            "{SUCCESS_HEADER}{}.",
            successful.join(ITEM_SEPARATOR)
        ));
    }
    if !unsuccessful.is_empty() {
        sentences.push(format!(
            "{FAILURE_HEADER}{}.",
            unsuccessful.join(ITEM_SEPARATOR)
        ));
    }
    MemoryBlock {
        successful,
        unsuccessful,
        fmt,
        rendered: sentences.join(" "),
    }
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

const BUILTIN_TEMPLATES: &[(&str, &str)] = &[
    ("alfworld", include_str!("../prompts/alfworld.txt")),
    ("scienceworld", include_str!("../prompts/scienceworld.txt")),
    ("miniworld", include_str!("../prompts/miniworld.txt")),
];

/// Environment system prompt: task setting, action-template grammar, and
/// response format rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub env_name: String,
    pub system_text: String,
}

impl PromptTemplate {
    pub fn new(env_name: impl Into<String>, system_text: impl Into<String>) -> Self {
        Self {
            env_name: env_name.into(),
            system_text: system_text.into(),
        }
    }

    pub fn builtin(env_name: &str) -> Result<Self, PromptError> {
        BUILTIN_TEMPLATES
            .iter()
            .find(|(name, _)| *name == env_name)
            .map(|(name, text)| Self::new(*name, text.trim_end_matches('\n')))
            .ok_or_else(|| PromptError::UnknownTemplate(env_name.to_string()))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_TEMPLATES.iter().map(|(name, _)| *name)
    }

    /// Loads `<dir>/<env_name>.txt`.
    pub fn load(dir: impl AsRef<Path>, env_name: &str) -> Result<Self, PromptError> {
        let path = dir.as_ref().join(format!("{env_name}.txt"));
        let text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(env_name, text.trim_end_matches('\n')))
    }

    pub fn system_message(&self, memory: &MemoryBlock) -> String {
        if memory.is_empty() {
            self.system_text.clone()
        } else {
            format!("{}\n\n{}", self.system_text, memory.rendered)
        }
    }
}

/// One system message (template plus memory) followed by the history turns.
pub fn assemble_context(
    template: &PromptTemplate,
    memory: &MemoryBlock,
    history: &Trajectory,
) -> Result<Vec<Turn>, PromptError> {
    let turns = history.dialogue();
    match turns.last() {
        None => return Err(PromptError::EmptyHistory),
        Some(t) if t.role != Role::User => {
            return Err(PromptError::HistoryNotAtObservation(t.role.as_str()))
        }
        _ => {}
    }
    let mut messages = Vec::with_capacity(turns.len() + 1);
    messages.push(Turn::system(template.system_message(memory)));
    messages.extend(turns.iter().cloned());
    Ok(messages)
}

/// Character count of a context, the prompt-size meter used in episode logs.
pub fn context_chars(messages: &[Turn]) -> usize {
    messages.iter().map(|m| m.content.chars().count()).sum()
}

pub fn context_words(messages: &[Turn]) -> usize {
    messages
        .iter()
        .map(|m| m.content.split_whitespace().count())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{Outcome, OutcomeState, Split, TaskMeta};

    fn traj(id: &str, success: bool, action: &str) -> Trajectory {
        Trajectory {
            id: id.into(),
            meta: TaskMeta {
                env_name: "test".into(),
                task_type: "t".into(),
                split: Split::Easy,
                variation_id: 0,
                seed: 0,
            },
            task_description: "put a candle in drawer.".into(),
            turns: vec![
                Turn::user("Your task is to: put a candle in drawer."),
                Turn::assistant(action),
                Turn::user("ok"),
            ],
            outcome: OutcomeState::Resolved(if success {
                Outcome::success()
            } else {
                Outcome::failure()
            }),
        }
    }

    #[test]
    fn static_query_is_identity() {
        assert_eq!(
            build_static_query("put a candle in drawer.").unwrap(),
            "put a candle in drawer."
        );
        assert_eq!(build_static_query("  padded  ").unwrap(), "  padded  ");
        assert!(matches!(
            build_static_query(""),
            Err(PromptError::EmptyDescription)
        ));
    }

    #[test]
    fn dynamic_query_single_turn() {
        let h = traj("a", true, "look").partial_history(1).unwrap();
        assert_eq!(
            build_dynamic_query(&h).unwrap(),
            r#"[{"role": "user", "content": "Your task is to: put a candle in drawer."}]"#
        );
        let empty = traj("a", true, "look").partial_history(0).unwrap();
        assert!(matches!(
            build_dynamic_query(&empty),
            Err(PromptError::EmptyHistory)
        ));
    }

    #[test]
    fn memory_block_template() {
        let s = traj("s", true, "look");
        let block = build_memory_block(&[(&s, 0.9)], TrajFormat::ChatJson);
        assert!(block
            .rendered
            .starts_with("These are examples of successful trajectories: [{"));
        assert!(block.rendered.ends_with("}]."));
        assert!(!block.rendered.contains("unsuccessful"));
        assert_eq!(build_memory_block(&[], TrajFormat::ChatJson).rendered, "");

        let f = traj("f", false, "look");
        let only_fail = build_memory_block(&[(&f, 0.2)], TrajFormat::Textual);
        assert_eq!(
            only_fail.rendered,
            "These are examples of unsuccessful trajectories: User: Your task is to: put a candle in drawer.\nAssistant: look\nUser: ok."
        );
    }

    #[test]
    fn groups_sorted_by_score() {
        let a = traj("a", true, "go to a");
        let b = traj("b", true, "go to b");
        let c = traj("c", false, "go to c");
        let d = traj("d", false, "go to d");
        let block = build_memory_block(
            &[(&a, 0.1), (&c, 0.3), (&b, 0.8), (&d, 0.5)],
            TrajFormat::CompactJson,
        );
        assert_eq!(block.successful.len(), 2);
        assert_eq!(block.unsuccessful.len(), 2);
        assert!(block.successful[0].contains("go to b"));
        assert!(block.unsuccessful[0].contains("go to d"));
        let expected = format!(
            "{SUCCESS_HEADER}{}\n{}. {FAILURE_HEADER}{}\n{}.",
            block.successful[0], block.successful[1], block.unsuccessful[0], block.unsuccessful[1]
        );
        assert_eq!(block.rendered, expected);
    }

    #[test]
    fn context_layout() {
        let template = PromptTemplate::builtin("miniworld").unwrap();
        let t = traj("a", true, "look");
        let h = t.partial_history(2).unwrap();
        let ctx =
            assemble_context(&template, &MemoryBlock::empty(TrajFormat::ChatJson), &h).unwrap();
        assert_eq!(ctx[0].content, template.system_text);
        assert_eq!(&ctx[1..], &h.turns[..]);

        let block = build_memory_block(&[(&t, 1.0)], TrajFormat::ChatJson);
        let ctx = assemble_context(&template, &block, &h).unwrap();
        assert!(ctx[0].content.ends_with(&block.rendered));
        assert_eq!(
            ctx[0].content,
            format!("{}\n\n{}", template.system_text, block.rendered)
        );

        let mut bad = h.clone();
        bad.turns.push(Turn::assistant("look"));
        assert!(matches!(
            assemble_context(&template, &block, &bad),
            Err(PromptError::HistoryNotAtObservation("assistant"))
        ));
    }

    #[test]
    fn builtin_templates() {
        let alf = PromptTemplate::builtin("alfworld").unwrap();
        assert!(alf
            .system_text
            .starts_with("Interact with a household to solve a task."));
        assert!(alf
            .system_text
            .contains("slice (object) with (object):     slice an object using a sharp object"));
        assert!(alf
            .system_text
            .ends_with("possibly move it to a receptacle later."));
        let sci = PromptTemplate::builtin("scienceworld").unwrap();
        assert!(sci
            .system_text
            .contains("pick up OBJ: move an object to the inventory"));
        assert!(PromptTemplate::builtin("nope").is_err());
    }
}

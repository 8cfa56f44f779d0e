//! Trajectory data model, the JSONL record store, and the four display
//! serializations used when trajectories are shown to a policy.
//!
//! A trajectory is a multi-turn chat: environment observations (including the
//! task description) are `user` turns, actions are `assistant` turns.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid trajectory `{id}`: {reason}")]
    Validation { id: String, reason: String },
    #[error("unsupported trajectory format `{0}`")]
    UnknownFormat(String),
    #[error("step {t} out of range (trajectory has {max} observations)")]
    StepOutOfRange { t: usize, max: usize },
    #[error("{source_name}:{line}: {error}")]
    StoreLine {
        source_name: String,
        line: usize,
        error: Box<TrajError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrajError {
    fn invalid(id: &str, reason: impl Into<String>) -> Self {
        TrajError::Validation {
            id: id.to_string(),
            reason: reason.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Turns
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "system" => Ok(Role::System),
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// One chat message. Also used as the message type of assembled contexts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

// ---------------------------------------------------------------------------
// Outcome and metadata
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub score: f64,
}

impl Outcome {
    pub fn success() -> Self {
        Self {
            success: true,
            score: 1.0,
        }
    }

    pub fn failure() -> Self {
        Self {
            success: false,
            score: 0.0,
        }
    }

    fn check(&self) -> Result<(), String> {
        if !self.score.is_finite() || !(-1.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [-1, 1]", self.score));
        }
        if self.success && self.score != 1.0 {
            return Err(format!(
                "successful outcome must carry score 1, got {}",
                self.score
            ));
        }
        Ok(())
    }
}

/// Outcome of a stored trajectory. Prefixes cut from a running or finished
/// episode carry `Pending` so they never count as failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutcomeState {
    Resolved(Outcome),
    Pending,
}

impl OutcomeState {
    pub fn resolved(&self) -> Option<Outcome> {
        match self {
            OutcomeState::Resolved(o) => Some(*o),
            OutcomeState::Pending => None,
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, OutcomeState::Resolved(o) if o.success)
    }
}

const PENDING_MARKER: &str = "pending";

impl Serialize for OutcomeState {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            OutcomeState::Resolved(o) => o.serialize(serializer),
            OutcomeState::Pending => serializer.serialize_str(PENDING_MARKER),
        }
    }
}

impl<'de> Deserialize<'de> for OutcomeState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Fields {
            success: bool,
            score: f64,
        }

        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Resolved(Fields),
            Marker(String),
        }

        match Raw::deserialize(deserializer)? {
            Raw::Resolved(f) => Ok(OutcomeState::Resolved(Outcome {
                success: f.success,
                score: f.score,
            })),
            Raw::Marker(m) if m == PENDING_MARKER => Ok(OutcomeState::Pending),
            Raw::Marker(m) => Err(de::Error::custom(format!(
                "expected {{success, score}} or \"pending\", got \"{m}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Easy,
    Hard,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Easy, Split::Hard];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Easy => "easy",
            Split::Hard => "hard",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Split::Easy),
            "hard" => Ok(Split::Hard),
            other => Err(format!("unknown split `{other}` (expected easy or hard)")),
        }
    }
}

/// Declared task-type → split assignment per environment.
const SPLIT_TABLE: &[(&str, &str, Split)] = &[
    ("miniworld", "pick_and_place", Split::Easy),
    ("miniworld", "pick_heat_then_place", Split::Hard),
    ("miniworld", "pick_cool_then_place", Split::Hard),
    ("miniworld", "pick_two_and_place", Split::Hard),
    ("alfworld", "look_at_obj_in_light", Split::Easy),
    ("alfworld", "pick_clean_then_place_in_recep", Split::Easy),
    ("alfworld", "pick_and_place_simple", Split::Easy),
    ("alfworld", "pick_cool_then_place_in_recep", Split::Hard),
    ("alfworld", "pick_heat_then_place_in_recep", Split::Hard),
    ("alfworld", "pick_two_obj_and_place", Split::Hard),
    ("scienceworld", "find-plant", Split::Easy),
    ("scienceworld", "freeze", Split::Easy),
    (
        "scienceworld",
        "inclined-plane-friction-unnamed-surfaces",
        Split::Easy,
    ),
    ("scienceworld", "lifespan-longest-lived", Split::Easy),
    (
        "scienceworld",
        "lifespan-longest-lived-then-shortest-lived",
        Split::Easy,
    ),
    (
        "scienceworld",
        "inclined-plane-friction-named-surfaces",
        Split::Easy,
    ),
    ("scienceworld", "boil", Split::Easy),
    ("scienceworld", "change-the-state-of-matter-of", Split::Easy),
    (
        "scienceworld",
        "inclined-plane-determine-angle",
        Split::Easy,
    ),
    (
        "scienceworld",
        "measure-melting-point-known-substance",
        Split::Easy,
    ),
    (
        "scienceworld",
        "measure-melting-point-unknown-substance",
        Split::Easy,
    ),
    ("scienceworld", "use-thermometer", Split::Easy),
    ("scienceworld", "find-non-living-thing", Split::Easy),
    ("scienceworld", "melt", Split::Easy),
    ("scienceworld", "find-animal", Split::Easy),
    ("scienceworld", "lifespan-shortest-lived", Split::Easy),
    ("scienceworld", "find-living-thing", Split::Easy),
    (
        "scienceworld",
        "chemistry-mix-paint-secondary-color",
        Split::Hard,
    ),
    ("scienceworld", "test-conductivity", Split::Hard),
    (
        "scienceworld",
        "power-component-renewable-vs-nonrenewable-energy",
        Split::Hard,
    ),
    (
        "scienceworld",
        "chemistry-mix-paint-tertiary-color",
        Split::Hard,
    ),
    ("scienceworld", "identify-life-stages-1", Split::Hard),
    ("scienceworld", "identify-life-stages-2", Split::Hard),
    (
        "scienceworld",
        "test-conductivity-of-unknown-substances",
        Split::Hard,
    ),
    ("scienceworld", "grow-fruit", Split::Hard),
    (
        "scienceworld",
        "mendelian-genetics-known-plant",
        Split::Hard,
    ),
    ("scienceworld", "power-component", Split::Hard),
    ("scienceworld", "grow-plant", Split::Hard),
    (
        "scienceworld",
        "mendelian-genetics-unknown-plant",
        Split::Hard,
    ),
    ("scienceworld", "chemistry-mix", Split::Hard),
];

/// Looks up the split of a task type. `None` for environments or task types
/// the table does not declare (external engines may use their own names).
pub fn split_for(env_name: &str, task_type: &str) -> Option<Split> {
    SPLIT_TABLE
        .iter()
        .find(|(env, task, _)| *env == env_name && *task == task_type)
        .map(|(_, _, split)| *split)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMeta {
    pub env_name: String,
    pub task_type: String,
    pub split: Split,
    pub variation_id: u32,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// Field order is the on-disk key order of the store format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub id: String,
    pub meta: TaskMeta,
    pub task_description: String,
    #[serde(deserialize_with = "deserialize_turns")]
    pub turns: Vec<Turn>,
    pub outcome: OutcomeState,
}

// Roles are read as plain strings so an unknown role surfaces as a validation
// error rather than a parse error.
fn deserialize_turns<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<Turn>, D::Error> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawTurn {
        role: String,
        content: String,
    }
    let raw = Vec::<RawTurn>::deserialize(deserializer)?;
    raw.into_iter()
        .map(|t| match t.role.parse::<Role>() {
            Ok(role) => Ok(Turn {
                role,
                content: t.content,
            }),
            Err(_) => Err(de::Error::custom(format!("{ROLE_MARKER}{}", t.role))),
        })
        .collect()
}

const ROLE_MARKER: &str = "\u{0}unknown-role:";

impl Trajectory {
    pub fn validate(&self) -> Result<(), TrajError> {
        if self.id.is_empty() {
            return Err(TrajError::invalid("", "empty id"));
        }
        if let OutcomeState::Resolved(o) = &self.outcome {
            o.check().map_err(|r| TrajError::invalid(&self.id, r))?;
        }
        if let Some(split) = split_for(&self.meta.env_name, &self.meta.task_type) {
            if split != self.meta.split {
                return Err(TrajError::invalid(
                    &self.id,
                    format!(
                        "task type `{}` belongs to split {split}, record says {}",
                        self.meta.task_type, self.meta.split
                    ),
                ));
            }
        }
        let mut expected = Role::User;
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.role == Role::System {
                if i != 0 {
                    return Err(TrajError::invalid(
                        &self.id,
                        format!(
                            "system turn at position {i}; only a leading system turn is allowed"
                        ),
                    ));
                }
                continue;
            }
            if turn.role != expected {
                return Err(TrajError::invalid(
                    &self.id,
                    format!(
                        "turn {i} has role {}, expected {}",
                        turn.role.as_str(),
                        expected.as_str()
                    ),
                ));
            }
            if turn.content.is_empty() {
                return Err(TrajError::invalid(
                    &self.id,
                    format!("turn {i} has empty content"),
                ));
            }
            expected = match expected {
                Role::User => Role::Assistant,
                _ => Role::User,
            };
        }
        Ok(())
    }

    /// Turns after the optional leading system turn.
    pub fn dialogue(&self) -> &[Turn] {
        match self.turns.first() {
            Some(t) if t.role == Role::System => &self.turns[1..],
            _ => &self.turns,
        }
    }

    pub fn observation_count(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::User).count()
    }

    pub fn actions(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.role == Role::Assistant)
            .map(|t| t.content.as_str())
    }

    pub fn is_success(&self) -> bool {
        self.outcome.is_success()
    }

    /// The history available before action `t`: every turn up to and including
    /// the `t`-th observation. `t = 0` keeps only the leading system turn, if any.
    pub fn partial_history(&self, t: usize) -> Result<Trajectory, TrajError> {
        let max = self.observation_count();
        if t > max {
            return Err(TrajError::StepOutOfRange { t, max });
        }
        let lead = self.turns.len() - self.dialogue().len();
        let end = if t == 0 {
            lead
        } else {
            self.turns
                .iter()
                .enumerate()
                .filter(|(_, turn)| turn.role == Role::User)
                .nth(t - 1)
                .map(|(i, _)| i + 1)
                .expect("t is within the observation count")
        };
        Ok(Trajectory {
            id: self.id.clone(),
            meta: self.meta.clone(),
            task_description: self.task_description.clone(),
            turns: self.turns[..end].to_vec(),
            outcome: OutcomeState::Pending,
        })
    }

    /// Serializes to one store line (no trailing newline).
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("trajectory serialization is infallible")
    }

    /// Parses and validates one store line.
    pub fn from_record(line: &str) -> Result<Trajectory, TrajError> {
        let mut de = serde_json::Deserializer::from_str(line);
        let traj: Trajectory = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = e.path().to_string();
            let message = e.inner().to_string();
            match message.strip_prefix(ROLE_MARKER) {
                Some(rest) => {
                    let role = rest.split(" at line").next().unwrap_or(rest);
                    TrajError::Validation {
                        id: record_id_hint(line),
                        reason: format!("unknown role `{role}` at `{field}`"),
                    }
                }
                None => TrajError::Parse { field, message },
            }
        })?;
        de.end().map_err(|e| TrajError::Parse {
            field: ".".into(),
            message: e.to_string(),
        })?;
        traj.validate()?;
        Ok(traj)
    }
}

fn record_id_hint(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_string))
        .unwrap_or_default()
}

/// `parse_trajectory_record` under its operation name.
pub fn parse_trajectory_record(line: &str) -> Result<Trajectory, TrajError> {
    Trajectory::from_record(line)
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

/// An in-memory trajectory store plus the name of where it came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryStore {
    pub source: String,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryStore {
    pub fn new(source: impl Into<String>, trajectories: Vec<Trajectory>) -> Self {
        Self {
            source: source.into(),
            trajectories,
        }
    }

    pub fn parse(source: impl Into<String>, text: &str) -> Result<Self, TrajError> {
        let source = source.into();
        let mut trajectories = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let traj = Trajectory::from_record(line).map_err(|e| TrajError::StoreLine {
                source_name: source.clone(),
                line: i + 1,
                error: Box::new(e),
            })?;
            trajectories.push(traj);
        }
        Ok(Self {
            source,
            trajectories,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrajError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(path.display().to_string(), &text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.trajectories {
            out.push_str(&t.to_record());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrajError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for t in &self.trajectories {
            w.write_all(t.to_record().as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Display formats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajFormat {
    #[default]
    ChatJson,
    AgenticJson,
    CompactJson,
    Textual,
}

impl TrajFormat {
    pub const ALL: [TrajFormat; 4] = [
        TrajFormat::ChatJson,
        TrajFormat::AgenticJson,
        TrajFormat::CompactJson,
        TrajFormat::Textual,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrajFormat::ChatJson => "chat_json",
            TrajFormat::AgenticJson => "agentic_json",
            TrajFormat::CompactJson => "compact_json",
            TrajFormat::Textual => "textual",
        }
    }
}

impl fmt::Display for TrajFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrajFormat {
    type Err = TrajError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrajFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s || f.as_str().replace('_', "-") == s)
            .ok_or_else(|| TrajError::UnknownFormat(s.to_string()))
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn agentic_role(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "observation",
        Role::Assistant => "action",
    }
}

fn textual_prefix(role: Role) -> &'static str {
    match role {
        Role::System => "System",
        Role::User => "User",
        Role::Assistant => "Assistant",
    }
}

/// Renders turns in one of the display formats. JSON formats are a single
/// line with `", "` / `": "` separators; textual is one `Role: content` per turn.
pub fn format_turns(turns: &[Turn], fmt: TrajFormat) -> String {
    match fmt {
        TrajFormat::Textual => turns
            .iter()
            .map(|t| format!("{}: {}", textual_prefix(t.role), t.content))
            .collect::<Vec<_>>()
            .join("\n"),
        _ => {
            let items: Vec<String> = turns
                .iter()
                .map(|t| match fmt {
                    TrajFormat::ChatJson => format!(
                        "{{\"role\": {}, \"content\": {}}}",
                        json_str(t.role.as_str()),
                        json_str(&t.content)
                    ),
                    TrajFormat::AgenticJson => format!(
                        "{{\"role\": {}, \"content\": {}}}",
                        json_str(agentic_role(t.role)),
                        json_str(&t.content)
                    ),
                    _ => format!(
                        "{{{}: {}}}",
                        json_str(agentic_role(t.role)),
                        json_str(&t.content)
                    ),
                })
                .collect();
            format!("[{}]", items.join(", "))
        }
    }
}

pub fn format_trajectory(traj: &Trajectory, fmt: TrajFormat) -> String {
    format_turns(&traj.turns, fmt)
}

/// Reads turns back out of a formatted trajectory. JSON formats are parsed
/// exactly; textual is split on the role prefixes, so observation lines that
/// themselves start with `User: ` or `Assistant: ` are ambiguous.
pub fn parse_formatted(text: &str, fmt: TrajFormat) -> Result<Vec<Turn>, TrajError> {
    let bad = |message: String| TrajError::Parse {
        field: fmt.as_str().to_string(),
        message,
    };
    if fmt == TrajFormat::Textual {
        let mut turns: Vec<Turn> = Vec::new();
        for line in text.split('\n') {
            let prefixed = [Role::System, Role::User, Role::Assistant]
                .into_iter()
                .find_map(|r| {
                    line.strip_prefix(textual_prefix(r))
                        .and_then(|rest| rest.strip_prefix(": "))
                        .map(|rest| (r, rest))
                });
            match (prefixed, turns.last_mut()) {
                (Some((role, rest)), _) => turns.push(Turn::new(role, rest)),
                (None, Some(last)) => {
                    last.content.push('\n');
                    last.content.push_str(line);
                }
                (None, None) if line.is_empty() => {}
                (None, None) => return Err(bad(format!("line without role prefix: {line:?}"))),
            }
        }
        return Ok(turns);
    }
    let items: Vec<serde_json::Map<String, serde_json::Value>> =
        serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    items
        .into_iter()
        .map(|obj| {
            let (role_name, content) = match fmt {
                TrajFormat::CompactJson => {
                    let mut it = obj.iter();
                    match (it.next(), it.next()) {
                        (Some((k, v)), None) => (k.clone(), v.clone()),
                        _ => return Err(bad("compact item must have exactly one key".into())),
                    }
                }
                _ => (
                    obj.get("role")
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| bad("missing role".into()))?
                        .to_string(),
                    obj.get("content")
                        .cloned()
                        .ok_or_else(|| bad("missing content".into()))?,
                ),
            };
            let role = match (fmt, role_name.as_str()) {
                (TrajFormat::ChatJson, r) => r.parse::<Role>().map_err(bad)?,
                (_, "system") => Role::System,
                (_, "observation") => Role::User,
                (_, "action") => Role::Assistant,
                (_, r) => return Err(bad(format!("unknown role `{r}`"))),
            };
            let content = content
                .as_str()
                .ok_or_else(|| bad("content must be a string".into()))?
                .to_string();
            Ok(Turn { role, content })
        })
        .collect()
}

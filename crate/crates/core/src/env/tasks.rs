use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::traj::Split;

pub const OBJECTS: [&str; 6] = ["apple", "bowl", "candle", "cup", "mug", "potato"];
pub const TARGET_RECEPTACLES: [&str; 3] = ["countertop", "drawer", "shelf"];
pub const DISTRACTORS: [&str; 6] = [
    "book",
    "cellphone",
    "keychain",
    "pen",
    "pencil",
    "spraybottle",
];

const SPEC_SALT: u64 = 0x5EED_7A5C_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PickAndPlace,
    PickHeatThenPlace,
    PickCoolThenPlace,
    PickTwoAndPlace,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::PickAndPlace,
        TaskKind::PickHeatThenPlace,
        TaskKind::PickCoolThenPlace,
        TaskKind::PickTwoAndPlace,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::PickAndPlace => "pick_and_place",
            TaskKind::PickHeatThenPlace => "pick_heat_then_place",
            TaskKind::PickCoolThenPlace => "pick_cool_then_place",
            TaskKind::PickTwoAndPlace => "pick_two_and_place",
        }
    }

    pub fn split(&self) -> Split {
        match self {
            TaskKind::PickAndPlace => Split::Easy,
            _ => Split::Hard,
        }
    }

    pub fn of_split(split: Split) -> Vec<TaskKind> {
        Self::ALL
            .into_iter()
            .filter(|k| k.split() == split)
            .collect()
    }

    pub fn describe(&self, object: &str, receptacle: &str) -> String {
        match self {
            TaskKind::PickAndPlace => format!("put a {object} in {receptacle}."),
            TaskKind::PickHeatThenPlace => {
                format!("heat some {object} and put it in {receptacle}.")
            }
            TaskKind::PickCoolThenPlace => {
                format!("cool some {object} and put it in {receptacle}.")
            }
            TaskKind::PickTwoAndPlace => format!("find two {object} and put them in {receptacle}."),
        }
    }

    /// Number of target object instances that must end up in the receptacle.
    pub fn target_count(&self) -> usize {
        match self {
            TaskKind::PickTwoAndPlace => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| EnvError::UnknownTaskType(s.to_string()))
    }
}

/// A task instance. `task_type` stays textual so external engines can carry
/// their own task names; the mini-world accepts only [`TaskKind`] names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_type: String,
    pub object: String,
    pub receptacle: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_object: Option<String>,
    pub split: Split,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, object: &str, receptacle: &str, seed: u64) -> Self {
        Self {
            task_type: kind.as_str().to_string(),
            object: object.to_string(),
            receptacle: receptacle.to_string(),
            second_object: (kind == TaskKind::PickTwoAndPlace).then(|| object.to_string()),
            split: kind.split(),
            seed,
        }
    }

    /// Draws object and receptacle for `kind` from `seed`.
    pub fn sample(kind: TaskKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPEC_SALT);
        let object = OBJECTS[(rng.next_u64() % OBJECTS.len() as u64) as usize];
        let receptacle =
            TARGET_RECEPTACLES[(rng.next_u64() % TARGET_RECEPTACLES.len() as u64) as usize];
        Self::new(kind, object, receptacle, seed)
    }

    pub fn kind(&self) -> Result<TaskKind, EnvError> {
        self.task_type.parse()
    }

    /// Checks the spec against the mini-world vocabulary.
    pub fn validate(&self) -> Result<TaskKind, EnvError> {
        let kind = self.kind()?;
        if !OBJECTS.contains(&self.object.as_str()) {
            return Err(EnvError::InvalidSpec(format!(
                "unknown object `{}`",
                self.object
            )));
        }
        if !TARGET_RECEPTACLES.contains(&self.receptacle.as_str()) {
            return Err(EnvError::InvalidSpec(format!(
                "unknown receptacle `{}`",
                self.receptacle
            )));
        }
        if self.split != kind.split() {
            return Err(EnvError::InvalidSpec(format!(
                "{kind} belongs to split {}, spec says {}",
                kind.split(),
                self.split
            )));
        }
        match (kind, &self.second_object) {
            (TaskKind::PickTwoAndPlace, Some(o)) if *o == self.object => {}
            (TaskKind::PickTwoAndPlace, _) => {
                return Err(EnvError::InvalidSpec(
                    "pick_two_and_place needs second_object equal to object".into(),
                ))
            }
            (_, Some(_)) => {
                return Err(EnvError::InvalidSpec(format!(
                    "{kind} takes no second object"
                )))
            }
            (_, None) => {}
        }
        Ok(kind)
    }

    pub fn description(&self) -> String {
        match self.kind() {
            Ok(kind) => kind.describe(&self.object, &self.receptacle),
            Err(_) => format!("{} {} in {}.", self.task_type, self.object, self.receptacle),
        }
    }

    /// Stable index of (task type, object, receptacle) in the combination table.
    pub fn variation_id(&self) -> u32 {
        let k = TaskKind::ALL
            .iter()
            .position(|k| k.as_str() == self.task_type)
            .unwrap_or(TaskKind::ALL.len());
        let o = OBJECTS.iter().position(|o| *o == self.object).unwrap_or(0);
        let r = TARGET_RECEPTACLES
            .iter()
            .position(|r| *r == self.receptacle)
            .unwrap_or(0);
        (k * OBJECTS.len() * TARGET_RECEPTACLES.len() + o * TARGET_RECEPTACLES.len() + r) as u32
    }
}

/// Every (task type, object, receptacle) combination of a split, in table
/// order, with seeds `base_seed, base_seed + 1, …`.
pub fn enumerate_specs(split: Split, base_seed: u64) -> Vec<TaskSpec> {
    let mut out = Vec::new();
    for kind in TaskKind::of_split(split) {
        for object in OBJECTS {
            for receptacle in TARGET_RECEPTACLES {
                let seed = base_seed + out.len() as u64;
                out.push(TaskSpec::new(kind, object, receptacle, seed));
            }
        }
    }
    out
}

/// `n` specs cycling through the split's task types; each spec's seed is
/// derived from `seed` and its position.
pub fn sample_specs(split: Split, n: usize, seed: u64) -> Vec<TaskSpec> {
    let kinds = TaskKind::of_split(split);
    (0..n)
        .map(|i| {
            let spec_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            TaskSpec::sample(kinds[i % kinds.len()], spec_seed)
        })
        .collect()
}

/// `"drawer 2"` → `"drawer"`.
pub fn receptacle_type(name: &str) -> &str {
    match name.rsplit_once(' ') {
        Some((head, tail)) if tail.chars().all(|c| c.is_ascii_digit()) => head,
        _ => name,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTask {
    pub kind: TaskKind,
    pub object: String,
    pub receptacle: String,
}

/// Recognizes the mini-world task phrasings.
pub fn parse_description(description: &str) -> Option<ParsedTask> {
    let d = description.trim();
    let d = d.strip_suffix('.').unwrap_or(d);
    let split_tail = |rest: &str, sep: &str| -> Option<(String, String)> {
        let (o, r) = rest.split_once(sep)?;
        Some((o.trim().to_string(), r.trim().to_string()))
    };
    let (kind, (object, receptacle)) = if let Some(rest) = d.strip_prefix("put a ") {
        (TaskKind::PickAndPlace, split_tail(rest, " in ")?)
    } else if let Some(rest) = d.strip_prefix("heat some ") {
        (
            TaskKind::PickHeatThenPlace,
            split_tail(rest, " and put it in ")?,
        )
    } else if let Some(rest) = d.strip_prefix("cool some ") {
        (
            TaskKind::PickCoolThenPlace,
            split_tail(rest, " and put it in ")?,
        )
    } else {
        let rest = d.strip_prefix("find two ")?;
        (
            TaskKind::PickTwoAndPlace,
            split_tail(rest, " and put them in ")?,
        )
    };
    if object.is_empty() || receptacle.is_empty() {
        return None;
    }
    Some(ParsedTask {
        kind,
        object,
        receptacle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptions_parse_back() {
        for kind in TaskKind::ALL {
            for object in OBJECTS {
                for receptacle in TARGET_RECEPTACLES {
                    let parsed = parse_description(&kind.describe(object, receptacle)).unwrap();
                    assert_eq!(
                        parsed,
                        ParsedTask {
                            kind,
                            object: object.into(),
                            receptacle: receptacle.into()
                        }
                    );
                }
            }
        }
        assert!(parse_description("dance wildly").is_none());
    }

    #[test]
    fn enumerate_covers_split() {
        assert_eq!(enumerate_specs(Split::Easy, 0).len(), 18);
        let hard = enumerate_specs(Split::Hard, 100);
        assert_eq!(hard.len(), 54);
        assert!(hard.iter().all(|s| s.validate().is_ok()));
        let ids: std::collections::BTreeSet<u32> =
            hard.iter().map(TaskSpec::variation_id).collect();
        assert_eq!(ids.len(), 54);
    }

    #[test]
    fn sampling_is_deterministic_and_cycles_kinds() {
        let a = sample_specs(Split::Hard, 9, 7);
        assert_eq!(a, sample_specs(Split::Hard, 9, 7));
        assert_eq!(a[0].task_type, "pick_heat_then_place");
        assert_eq!(a[1].task_type, "pick_cool_then_place");
        assert_eq!(a[2].task_type, "pick_two_and_place");
        assert!(a.iter().all(|s| s.validate().is_ok()));
    }

    #[test]
    fn invalid_specs() {
        let mut s = TaskSpec::new(TaskKind::PickAndPlace, "mug", "shelf", 0);
        s.task_type = "juggle".into();
        assert!(matches!(s.validate(), Err(EnvError::UnknownTaskType(_))));
        let mut s = TaskSpec::new(TaskKind::PickTwoAndPlace, "mug", "shelf", 0);
        s.second_object = None;
        assert!(s.validate().is_err());
        let mut s = TaskSpec::new(TaskKind::PickAndPlace, "mug", "shelf", 0);
        s.split = Split::Hard;
        assert!(s.validate().is_err());
    }

    #[test]
    fn receptacle_types() {
        assert_eq!(receptacle_type("drawer 2"), "drawer");
        assert_eq!(receptacle_type("countertop 1"), "countertop");
        assert_eq!(receptacle_type("shelf"), "shelf");
    }
}

//! A small ALFWorld-style household: eight receptacles, one-slot inventory,
//! heat/cool/clean appliances, and a scripted expert.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tasks::{receptacle_type, TaskKind, TaskSpec, DISTRACTORS};
use super::{EnvError, Environment, StepResult};

/// Placement generator: ChaCha8 stream seeded with `seed_from_u64(spec.seed)`,
/// draws reduced modulo the candidate count. Bump the suffix if the placement
/// procedure ever changes.
pub const PLACEMENT_RNG: &str = "chacha8-mod/v1";

/// Receptacles in the order the room description lists them.
pub const RECEPTACLES: [&str; 8] = [
    "countertop 1",
    "drawer 1",
    "drawer 2",
    "shelf 1",
    "fridge 1",
    "microwave 1",
    "sinkbasin 1",
    "garbagecan 1",
];

const OPENABLE: [&str; 4] = ["drawer 1", "drawer 2", "fridge 1", "microwave 1"];
const START_LOCATION: &str = "countertop 1";
const TARGET_HOSTS: [&str; 5] = [
    "countertop 1",
    "drawer 1",
    "drawer 2",
    "shelf 1",
    "garbagecan 1",
];

const HEATER: &str = "microwave 1";
const COOLER: &str = "fridge 1";
const CLEANER: &str = "sinkbasin 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Look,
    Inventory,
    GoTo(String),
    Open(String),
    Close(String),
    Take { object: String, from: String },
    Move { object: String, to: String },
    Heat { object: String, with: String },
    Cool { object: String, with: String },
    Clean { object: String, with: String },
    Examine(String),
    Use(String),
}

impl Command {
    pub fn parse(action: &str) -> Option<Command> {
        let a = action
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        let pair = |rest: &str, sep: &str| -> Option<(String, String)> {
            let (x, y) = rest.rsplit_once(sep)?;
            (!x.is_empty() && !y.is_empty()).then(|| (x.to_string(), y.to_string()))
        };
        let cmd = match a.as_str() {
            "look" => Command::Look,
            "inventory" => Command::Inventory,
            _ => {
                if let Some(r) = a.strip_prefix("go to ") {
                    Command::GoTo(r.to_string())
                } else if let Some(r) = a.strip_prefix("open ") {
                    Command::Open(r.to_string())
                } else if let Some(r) = a.strip_prefix("close ") {
                    Command::Close(r.to_string())
                } else if let Some(r) = a.strip_prefix("take ") {
                    let (object, from) = pair(r, " from ")?;
                    Command::Take { object, from }
                } else if let Some(r) = a.strip_prefix("move ") {
                    let (object, to) = pair(r, " to ")?;
                    Command::Move { object, to }
                } else if let Some(r) = a.strip_prefix("heat ") {
                    let (object, with) = pair(r, " with ")?;
                    Command::Heat { object, with }
                } else if let Some(r) = a.strip_prefix("cool ") {
                    let (object, with) = pair(r, " with ")?;
                    Command::Cool { object, with }
                } else if let Some(r) = a.strip_prefix("clean ") {
                    let (object, with) = pair(r, " with ")?;
                    Command::Clean { object, with }
                } else if let Some(r) = a.strip_prefix("examine ") {
                    Command::Examine(r.to_string())
                } else {
                    Command::Use(a.strip_prefix("use ")?.to_string())
                }
            }
        };
        Some(cmd)
    }
}

/// ALFWorld-style enumeration: "a x", "a x, and a y", "nothing".
pub(crate) fn list_items(items: &[String]) -> String {
    match items {
        [] => "nothing".to_string(),
        [one] => format!("a {one}"),
        [init @ .., last] => {
            let head: Vec<String> = init.iter().map(|i| format!("a {i}")).collect();
            format!("{}, and a {last}", head.join(", "))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EnvState {
    pub contents: BTreeMap<String, Vec<String>>,
    pub opened: BTreeSet<String>,
    pub location: String,
    pub inventory: Option<String>,
    pub heated: BTreeSet<String>,
    pub cooled: BTreeSet<String>,
    pub cleaned: BTreeSet<String>,
    pub steps: usize,
    pub done: bool,
    pub success: bool,
}

impl EnvState {
    fn place(spec: &TaskSpec, kind: TaskKind) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut pick = |n: usize| (rng.next_u64() % n as u64) as usize;

        let mut contents: BTreeMap<String, Vec<String>> = RECEPTACLES
            .iter()
            .map(|r| (r.to_string(), Vec::new()))
            .collect();
        let hosts: Vec<&str> = TARGET_HOSTS
            .iter()
            .copied()
            .filter(|r| receptacle_type(r) != spec.receptacle)
            .collect();
        for n in 1..=kind.target_count() {
            let host = hosts[pick(hosts.len())];
            contents
                .get_mut(host)
                .expect("known host")
                .push(format!("{} {n}", spec.object));
        }
        let distractors = 3 + pick(3);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for _ in 0..distractors {
            let kind = DISTRACTORS[pick(DISTRACTORS.len())];
            let n = counts.entry(kind).or_default();
            *n += 1;
            let host = RECEPTACLES[pick(RECEPTACLES.len())];
            contents
                .get_mut(host)
                .expect("known host")
                .push(format!("{kind} {n}"));
        }
        Self {
            contents,
            location: START_LOCATION.to_string(),
            ..Self::default()
        }
    }

    pub fn is_openable(receptacle: &str) -> bool {
        OPENABLE.contains(&receptacle)
    }

    pub fn is_accessible(&self, receptacle: &str) -> bool {
        !Self::is_openable(receptacle) || self.opened.contains(receptacle)
    }

    pub fn where_is(&self, object: &str) -> Option<&str> {
        self.contents
            .iter()
            .find(|(_, items)| items.iter().any(|i| i == object))
            .map(|(r, _)| r.as_str())
    }

    fn describe(&self, receptacle: &str) -> String {
        list_items(&self.contents[receptacle])
    }

    /// Target instances that sit in a receptacle of the target type.
    fn delivered(&self, spec: &TaskSpec) -> Vec<&String> {
        self.contents
            .iter()
            .filter(|(r, _)| receptacle_type(r) == spec.receptacle)
            .flat_map(|(_, items)| items.iter())
            .filter(|i| receptacle_type(i) == spec.object)
            .collect()
    }

    fn satisfied(&self, spec: &TaskSpec, kind: TaskKind) -> bool {
        let delivered = self.delivered(spec);
        match kind {
            TaskKind::PickAndPlace => !delivered.is_empty(),
            TaskKind::PickHeatThenPlace => delivered.iter().any(|o| self.heated.contains(*o)),
            TaskKind::PickCoolThenPlace => delivered.iter().any(|o| self.cooled.contains(*o)),
            TaskKind::PickTwoAndPlace => delivered.len() >= 2,
        }
    }
}

/// Target receptacle instance the expert delivers to: first of the target
/// type in lexicographic order.
pub(crate) fn target_instance(receptacle: &str) -> String {
    let mut candidates: Vec<&str> = RECEPTACLES
        .iter()
        .copied()
        .filter(|r| receptacle_type(r) == receptacle)
        .collect();
    candidates.sort();
    candidates
        .first()
        .map(|r| r.to_string())
        .unwrap_or_else(|| format!("{receptacle} 1"))
}

/// Shortest scripted next action from ground truth. `None` once done.
pub fn expert_action(state: &EnvState, spec: &TaskSpec) -> Option<String> {
    if state.done {
        return None;
    }
    let kind = spec.kind().ok()?;
    let target = target_instance(&spec.receptacle);
    let reach = |place: &str, then: String| -> String {
        if state.location != place {
            format!("go to {place}")
        } else if !state.is_accessible(place) {
            format!("open {place}")
        } else {
            then
        }
    };

    if let Some(held) = &state.inventory {
        if kind == TaskKind::PickHeatThenPlace && !state.heated.contains(held) {
            return Some(if state.location != HEATER {
                format!("go to {HEATER}")
            } else {
                format!("heat {held} with {HEATER}")
            });
        }
        if kind == TaskKind::PickCoolThenPlace && !state.cooled.contains(held) {
            return Some(if state.location != COOLER {
                format!("go to {COOLER}")
            } else {
                format!("cool {held} with {COOLER}")
            });
        }
        return Some(reach(&target, format!("move {held} to {target}")));
    }

    let delivered = state.delivered(spec);
    let next = (1..=kind.target_count())
        .map(|n| format!("{} {n}", spec.object))
        .find(|o| !delivered.contains(&o))?;
    let host = state.where_is(&next)?.to_string();
    Some(reach(&host, format!("take {next} from {host}")))
}

/// The built-in environment.
#[derive(Debug, Default)]
pub struct MiniWorld {
    spec: Option<(TaskSpec, TaskKind)>,
    state: EnvState,
}

impl MiniWorld {
    pub const NAME: &'static str = "miniworld";

    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn spec(&self) -> Option<&TaskSpec> {
        self.spec.as_ref().map(|(s, _)| s)
    }

    fn initial_observation(&self, spec: &TaskSpec) -> String {
        let rooms: Vec<String> = RECEPTACLES.iter().map(|r| r.to_string()).collect();
        format!(
            "-= Welcome to TextWorld, ALFRED! =-\n\nYou are in the middle of a room. Looking quickly around you, you see {}. You are standing at the {START_LOCATION}. On the {START_LOCATION}, you see {}.\n\nYour task is to: {}",
            list_items(&rooms),
            self.state.describe(START_LOCATION),
            spec.description()
        )
    }

    fn apply(&mut self, cmd: Command) -> Option<String> {
        let st = &mut self.state;
        let known = |r: &str| st.contents.contains_key(r);
        match cmd {
            Command::Look => Some(format!(
                "You are facing the {}. Next to it, you see nothing.",
                st.location
            )),
            Command::Inventory => Some(match &st.inventory {
                Some(o) => format!("You are carrying: a {o}."),
                None => "You are not carrying anything.".to_string(),
            }),
            Command::GoTo(r) if known(&r) => {
                st.location = r.clone();
                Some(if st.is_accessible(&r) {
                    format!(
                        "You arrive at {r}. On the {r}, you see {}.",
                        st.describe(&r)
                    )
                } else {
                    format!("You arrive at {r}. The {r} is closed.")
                })
            }
            Command::Open(r)
                if st.location == r && EnvState::is_openable(&r) && !st.opened.contains(&r) =>
            {
                st.opened.insert(r.clone());
                Some(format!(
                    "You open the {r}. The {r} is open. In it, you see {}.",
                    st.describe(&r)
                ))
            }
            Command::Close(r) if st.location == r && st.opened.contains(&r) => {
                st.opened.remove(&r);
                Some(format!("You close the {r}."))
            }
            Command::Take { object, from }
                if st.location == from
                    && st.inventory.is_none()
                    && st.is_accessible(&from)
                    && st.contents.get(&from).is_some_and(|c| c.contains(&object)) =>
            {
                st.contents
                    .get_mut(&from)
                    .expect("checked")
                    .retain(|o| *o != object);
                st.inventory = Some(object.clone());
                Some(format!("You pick up the {object} from the {from}."))
            }
            Command::Move { object, to }
                if st.location == to
                    && st.inventory.as_ref() == Some(&object)
                    && st.is_accessible(&to) =>
            {
                st.contents
                    .get_mut(&to)
                    .expect("location is known")
                    .push(object.clone());
                st.inventory = None;
                Some(format!("You move the {object} to the {to}."))
            }
            Command::Heat { object, with }
                if with == HEATER
                    && st.location == with
                    && st.inventory.as_ref() == Some(&object) =>
            {
                st.heated.insert(object.clone());
                Some(format!("You heat the {object} using the {with}."))
            }
            Command::Cool { object, with }
                if with == COOLER
                    && st.location == with
                    && st.inventory.as_ref() == Some(&object) =>
            {
                st.cooled.insert(object.clone());
                Some(format!("You cool the {object} using the {with}."))
            }
            Command::Clean { object, with }
                if with == CLEANER
                    && st.location == with
                    && st.inventory.as_ref() == Some(&object) =>
            {
                st.cleaned.insert(object.clone());
                Some(format!("You clean the {object} using the {with}."))
            }
            Command::Examine(x) if x == st.location => Some(if st.is_accessible(&x) {
                format!("On the {x}, you see {}.", st.describe(&x))
            } else {
                format!("The {x} is closed.")
            }),
            Command::Examine(x) if st.inventory.as_ref() == Some(&x) || visible(st, &x) => {
                let mut traits = Vec::new();
                if st.heated.contains(&x) {
                    traits.push("hot");
                }
                if st.cooled.contains(&x) {
                    traits.push("cool");
                }
                if st.cleaned.contains(&x) {
                    traits.push("clean");
                }
                Some(if traits.is_empty() {
                    format!("There's nothing special about {x}.")
                } else {
                    format!("This is a {} {x}.", traits.join(" and "))
                })
            }
            Command::Use(x) if st.inventory.as_ref() == Some(&x) || visible(st, &x) => {
                Some(format!("You use the {x}. Nothing seems to change."))
            }
            _ => None,
        }
    }
}

fn visible(st: &EnvState, object: &str) -> bool {
    st.is_accessible(&st.location)
        && st
            .contents
            .get(&st.location)
            .is_some_and(|c| c.iter().any(|o| o == object))
}

impl Environment for MiniWorld {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn reset(&mut self, spec: &TaskSpec) -> Result<String, EnvError> {
        let kind = spec.validate()?;
        self.state = EnvState::place(spec, kind);
        self.spec = Some((spec.clone(), kind));
        Ok(self.initial_observation(spec))
    }

    fn step(&mut self, action: &str) -> Result<StepResult, EnvError> {
        let (spec, kind) = self.spec.clone().ok_or(EnvError::NotReset)?;
        if self.state.done {
            return Err(EnvError::EpisodeDone);
        }
        self.state.steps += 1;
        let observation = match Command::parse(action) {
            Some(cmd) => self.apply(cmd),
            None => None,
        };
        let Some(observation) = observation else {
            return Ok(StepResult::invalid());
        };
        if self.state.satisfied(&spec, kind) {
            self.state.done = true;
            self.state.success = true;
            return Ok(StepResult {
                observation,
                done: true,
                success: true,
                score: 1.0,
            });
        }
        Ok(StepResult::ongoing(observation))
    }

    fn expert_action(&self) -> Option<String> {
        let (spec, _) = self.spec.as_ref()?;
        expert_action(&self.state, spec)
    }
}

//! What a local policy can infer from the chat context alone: the task, the
//! room layout, where it stands, what it holds, and what it has seen.

use std::collections::{BTreeMap, BTreeSet};

use crate::env::{parse_description, receptacle_type, ParsedTask};
use crate::traj::{Role, Turn};

const TASK_MARKER: &str = "Your task is to: ";
const ROOM_MARKER: &str = "Looking quickly around you, you see ";
const STANDING_MARKER: &str = "You are standing at the ";

/// Splits an ALFWorld-style list ("a x, a y, and a z" / "nothing").
pub(crate) fn parse_items(list: &str) -> Vec<String> {
    let list = list.trim().trim_end_matches('.');
    if list == "nothing" || list.is_empty() {
        return Vec::new();
    }
    list.split(", ")
        .map(|item| {
            let item = item.strip_prefix("and ").unwrap_or(item);
            item.strip_prefix("a ").unwrap_or(item).to_string()
        })
        .collect()
}

/// Extracts the task description from an initial observation.
pub(crate) fn task_description_of(observation: &str) -> Option<&str> {
    let at = observation.rfind(TASK_MARKER)?;
    observation[at + TASK_MARKER.len()..]
        .lines()
        .next()
        .map(str::trim)
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Situation {
    pub task: Option<ParsedTask>,
    /// Receptacles from the room description, sorted lexicographically.
    pub receptacles: Vec<String>,
    pub location: Option<String>,
    pub holding: Option<String>,
    pub known: BTreeMap<String, Vec<String>>,
    pub closed: BTreeSet<String>,
    pub visited: BTreeSet<String>,
    /// Target objects moved into a receptacle of the target type.
    pub delivered: usize,
    /// Positions (in `actions`) of successful take actions.
    pub takes: Vec<usize>,
    /// Objects picked up, in order.
    pub taken: Vec<String>,
    pub actions: Vec<String>,
    /// Observation that followed each action.
    pub outcomes: Vec<String>,
}

impl Situation {
    /// Rebuilds the situation from a dialogue (system turns are skipped).
    pub fn from_turns(turns: &[Turn]) -> Self {
        let mut dialogue = turns.iter().filter(|t| t.role != Role::System);
        let mut s = Situation::default();
        let Some(first) = dialogue.next() else {
            return s;
        };
        s.read_initial(&first.content);

        let rest: Vec<&Turn> = dialogue.collect();
        for pair in rest.chunks(2) {
            let action = &pair[0];
            if action.role != Role::Assistant {
                break;
            }
            let observation = pair.get(1).map(|t| t.content.as_str()).unwrap_or("");
            s.read_step(&action.content, observation);
        }
        s
    }

    fn read_initial(&mut self, obs: &str) {
        self.task = task_description_of(obs).and_then(parse_description);
        if let Some(at) = obs.find(ROOM_MARKER) {
            let tail = &obs[at + ROOM_MARKER.len()..];
            let end = tail
                .find(". ")
                .or_else(|| tail.find(".\n"))
                .unwrap_or(tail.len());
            let mut rooms = parse_items(&tail[..end]);
            rooms.sort();
            self.receptacles = rooms;
        }
        if let Some(at) = obs.find(STANDING_MARKER) {
            let tail = &obs[at + STANDING_MARKER.len()..];
            if let Some(end) = tail.find(". ") {
                let here = tail[..end].to_string();
                let listing = format!("On the {here}, you see ");
                if let Some(l) = tail.find(&listing) {
                    let items = &tail[l + listing.len()..];
                    let items = items.split(".\n").next().unwrap_or(items);
                    self.known.insert(here.clone(), parse_items(items));
                    self.visited.insert(here.clone());
                }
                self.location = Some(here);
            }
        }
    }

    fn read_step(&mut self, action: &str, obs: &str) {
        let step = self.actions.len();
        self.actions.push(action.to_string());
        self.outcomes.push(obs.to_string());

        if let Some(rest) = obs.strip_prefix("You arrive at ") {
            let Some((place, after)) = rest.split_once(". ") else {
                return;
            };
            let place = place.to_string();
            if after.starts_with(&format!("The {place} is closed")) {
                self.closed.insert(place.clone());
            } else if let Some(items) = after.strip_prefix(&format!("On the {place}, you see ")) {
                self.known.insert(place.clone(), parse_items(items));
                self.visited.insert(place.clone());
            }
            self.location = Some(place);
        } else if let Some(rest) = obs.strip_prefix("You open the ") {
            let Some((place, after)) = rest.split_once(". ") else {
                return;
            };
            self.closed.remove(place);
            if let Some(items) = after.split("In it, you see ").nth(1) {
                self.known.insert(place.to_string(), parse_items(items));
            }
            self.visited.insert(place.to_string());
        } else if let Some(rest) = obs.strip_prefix("You close the ") {
            self.closed.insert(rest.trim_end_matches('.').to_string());
        } else if let Some(rest) = obs.strip_prefix("You pick up the ") {
            if let Some((object, place)) = rest.trim_end_matches('.').split_once(" from the ") {
                if let Some(items) = self.known.get_mut(place) {
                    items.retain(|i| i != object);
                }
                self.holding = Some(object.to_string());
                self.takes.push(step);
                self.taken.push(object.to_string());
            }
        } else if let Some(rest) = obs.strip_prefix("You move the ") {
            if let Some((object, place)) = rest.trim_end_matches('.').split_once(" to the ") {
                self.known
                    .entry(place.to_string())
                    .or_default()
                    .push(object.to_string());
                self.holding = None;
                if let Some(task) = &self.task {
                    if receptacle_type(object) == task.object
                        && receptacle_type(place) == task.receptacle
                    {
                        self.delivered += 1;
                    }
                }
            }
        }
    }

    /// Delivery receptacle: first instance of the target type.
    pub fn target(&self) -> Option<String> {
        let task = self.task.as_ref()?;
        Some(
            self.receptacles
                .iter()
                .find(|r| receptacle_type(r) == task.receptacle)
                .cloned()
                .unwrap_or_else(|| format!("{} 1", task.receptacle)),
        )
    }

    fn is_target_type(&self, place: &str) -> bool {
        self.task
            .as_ref()
            .is_some_and(|t| receptacle_type(place) == t.receptacle)
    }

    /// Next step of the search-and-take loop.
    pub fn acquire(&self) -> String {
        let Some(task) = &self.task else {
            return "look".into();
        };
        let wanted = |items: &Vec<String>| {
            items
                .iter()
                .find(|i| receptacle_type(i) == task.object)
                .cloned()
        };

        if let Some(here) = &self.location {
            if !self.is_target_type(here) && !self.closed.contains(here) {
                if let Some(obj) = self.known.get(here).and_then(wanted) {
                    return format!("take {obj} from {here}");
                }
            }
            if self.closed.contains(here) {
                return format!("open {here}");
            }
        }
        if let Some(place) = self
            .receptacles
            .iter()
            .find(|r| !self.is_target_type(r) && self.known.get(*r).and_then(wanted).is_some())
        {
            return format!("go to {place}");
        }
        if let Some(place) = self
            .receptacles
            .iter()
            .find(|r| !self.visited.contains(*r) && self.location.as_ref() != Some(*r))
        {
            return format!("go to {place}");
        }
        "look".into()
    }

    /// Next step of carrying the held object to the target and putting it there.
    pub fn deliver(&self, held: &str) -> String {
        let Some(target) = self.target() else {
            return "look".into();
        };
        if self.location.as_deref() != Some(target.as_str()) {
            format!("go to {target}")
        } else if self.closed.contains(&target) {
            format!("open {target}")
        } else {
            format!("move {held} to {target}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn items() {
        assert_eq!(parse_items("nothing"), Vec::<String>::new());
        assert_eq!(parse_items("a mug 1"), vec!["mug 1"]);
        assert_eq!(parse_items("a mug 1, and a pen 2."), vec!["mug 1", "pen 2"]);
        assert_eq!(
            parse_items("a a 1, a b 1, and a c 1"),
            vec!["a 1", "b 1", "c 1"]
        );
    }

    #[test]
    fn reads_initial_observation() {
        let obs = "-= Welcome to TextWorld, ALFRED! =-\n\nYou are in the middle of a room. Looking quickly around you, you see a countertop 1, a drawer 1, a shelf 1, and a fridge 1. You are standing at the countertop 1. On the countertop 1, you see a pen 1, and a mug 2.\n\nYour task is to: put a mug in shelf.";
        let s = Situation::from_turns(&[Turn::user(obs)]);
        assert_eq!(
            s.receptacles,
            ["countertop 1", "drawer 1", "fridge 1", "shelf 1"]
        );
        assert_eq!(s.location.as_deref(), Some("countertop 1"));
        assert_eq!(s.known["countertop 1"], ["pen 1", "mug 2"]);
        assert_eq!(s.target().as_deref(), Some("shelf 1"));
        assert_eq!(s.acquire(), "take mug 2 from countertop 1");
    }
}

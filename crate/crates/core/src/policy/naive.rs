use super::world::Situation;
use super::{Policy, PolicyError};
use crate::traj::Turn;

/// Search loop over receptacles in lexicographic order, take the first target
/// object seen, carry it to the target receptacle, put it there. One delivery
/// only; it has no notion of heating, cooling, or a second object.
#[derive(Debug, Clone)]
pub struct NaivePlacer {
    max_action_chars: usize,
}

impl NaivePlacer {
    pub fn new(max_action_chars: usize) -> Self {
        Self { max_action_chars }
    }
}

pub(super) fn naive_step(s: &Situation) -> String {
    match &s.holding {
        Some(held) => s.deliver(held),
        None if s.delivered > 0 => super::SENTINEL_ACTION.to_string(),
        None => s.acquire(),
    }
}

impl Policy for NaivePlacer {
    fn name(&self) -> &str {
        "naive_placer"
    }

    fn reply(&self, context: &[Turn]) -> Result<String, PolicyError> {
        Ok(naive_step(&Situation::from_turns(context)))
    }

    fn max_action_chars(&self) -> usize {
        self.max_action_chars
    }
}

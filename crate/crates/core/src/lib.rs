//! Experience-retrieval-augmented agents.
//!
//! Trajectories go into a store, a store is embedded into an exact top-K
//! index, retrieved trajectories become a memory block in the policy's system
//! prompt, and episodes are run against the built-in mini-world or an external
//! engine. Sweeps aggregate success over seeds; the SFT exporter turns a store
//! into chat datasets with assistant-only loss masks.

pub mod embed;
pub mod env;
pub mod experiment;
pub mod http;
pub mod index;
pub mod policy;
pub mod prompt;
pub mod registry;
pub mod rollout;
pub mod sft;
pub mod traj;

pub use embed::{Embedder, EmbeddingVector, LocalHashEmbedder};
pub use env::{Environment, MiniWorld, StepResult, TaskSpec};
pub use index::{build_index, ExperienceIndex, Hit, IndexFilter, KeyMode};
pub use policy::{decide_action, Policy, PolicyConfig, PolicyKind};
pub use prompt::{assemble_context, build_memory_block, MemoryBlock, PromptTemplate};
pub use rollout::{run_episode, EpisodeConfig, EpisodeResult, RetrievalMode, Retriever};
pub use traj::{Role, TrajFormat, Trajectory, TrajectoryStore, Turn};

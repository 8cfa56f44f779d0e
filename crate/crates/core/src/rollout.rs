//! The episode loop, expert collection, and the parallel episode runner.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::Embedder;
use crate::env::{EnvError, Environment, StepBudget, TaskSpec};
use crate::index::{ExperienceIndex, IndexError, TieBreak};
use crate::policy::{decide_action, Policy, SENTINEL_ACTION};
use crate::prompt::{
    assemble_context, build_dynamic_query, build_memory_block, build_static_query, context_chars,
    MemoryBlock, PromptError, PromptTemplate,
};
use crate::traj::{Outcome, OutcomeState, TaskMeta, TrajFormat, Trajectory, TrajectoryStore, Turn};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("building worker pool: {0}")]
    Pool(String),
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    None,
    Static,
    Dynamic,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] = [
        RetrievalMode::None,
        RetrievalMode::Static,
        RetrievalMode::Dynamic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RetrievalMode::None => "none",
            RetrievalMode::Static => "static",
            RetrievalMode::Dynamic => "dynamic",
        }
    }
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RetrievalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown retrieval mode `{s}` (expected none, static or dynamic)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub retrieval_mode: RetrievalMode,
    pub k: usize,
    pub fmt: TrajFormat,
    pub max_steps: usize,
    pub tie_seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            retrieval_mode: RetrievalMode::None,
            k: 0,
            fmt: TrajFormat::ChatJson,
            max_steps: crate::env::DEFAULT_MAX_STEPS,
            tie_seed: 0,
        }
    }
}

impl EpisodeConfig {
    /// Collapses to no retrieval when `k = 0` or there is no index, and
    /// zeroes `k` when retrieval is off.
    pub fn normalized(mut self, has_index: bool) -> Self {
        if self.k == 0 || !has_index || self.retrieval_mode == RetrievalMode::None {
            self.retrieval_mode = RetrievalMode::None;
            self.k = 0;
        }
        self
    }

    pub fn validate(&self, has_index: bool) -> Result<(), RolloutError> {
        let off = self.retrieval_mode == RetrievalMode::None;
        if off != (self.k == 0 || !has_index) {
            return Err(RolloutError::Config(format!(
                "retrieval mode {} with k={} and {} index",
                self.retrieval_mode,
                self.k,
                if has_index { "an" } else { "no" }
            )));
        }
        if self.max_steps == 0 {
            return Err(RolloutError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// What the episode loop retrieves from.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub index: &'a ExperienceIndex,
    pub embedder: &'a dyn Embedder,
    pub ties: &'a dyn TieBreak,
}

impl Retriever<'_> {
    fn memory(
        &self,
        query: &str,
        cfg: &EpisodeConfig,
    ) -> Result<(MemoryBlock, Vec<String>), RolloutError> {
        let hits =
            self.index
                .retrieve_top_k(query, cfg.k, self.embedder, self.ties, cfg.tie_seed)?;
        let entries = self.index.entries();
        let retrieved: Vec<(&Trajectory, f64)> = hits
            .iter()
            .map(|h| (&entries[h.entry].trajectory, h.score))
            .collect();
        let ids = hits.into_iter().map(|h| h.traj_id).collect();
        Ok((build_memory_block(&retrieved, cfg.fmt), ids))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub spec: TaskSpec,
    pub config: EpisodeConfig,
    pub trajectory: Trajectory,
    pub success: bool,
    pub score: f64,
    pub steps: usize,
    pub retrieval_calls: usize,
    pub retrieved_ids_per_call: Vec<Vec<String>>,
    pub prompt_chars_per_step: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<StepError>,
    /// Not logged, so logs stay reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl EpisodeResult {
    pub fn mean_prompt_chars(&self) -> f64 {
        if self.prompt_chars_per_step.is_empty() {
            return 0.0;
        }
        self.prompt_chars_per_step.iter().sum::<usize>() as f64
            / self.prompt_chars_per_step.len() as f64
    }

    /// One episode-log line (no trailing newline).
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("episode result serializes")
    }
}

pub fn episode_id(env_name: &str, spec: &TaskSpec) -> String {
    format!(
        "{env_name}-{}-{}-{}-s{}",
        spec.task_type, spec.object, spec.receptacle, spec.seed
    )
}

fn new_trajectory(id: String, env_name: &str, spec: &TaskSpec) -> Trajectory {
    Trajectory {
        id,
        meta: TaskMeta {
            env_name: env_name.to_string(),
            task_type: spec.task_type.clone(),
            split: spec.split,
            variation_id: spec.variation_id(),
            seed: spec.seed,
        },
        task_description: spec.description(),
        turns: Vec::new(),
        outcome: OutcomeState::Pending,
    }
}

/// External engines may report scores on their own scale; the store keeps
/// success at 1 and clamps the rest into [-1, 1].
fn final_outcome(success: bool, score: f64) -> Outcome {
    if success {
        Outcome::success()
    } else {
        Outcome {
            success: false,
            score: if score.is_finite() {
                score.clamp(-1.0, 1.0)
            } else {
                0.0
            },
        }
    }
}

/// Runs one episode from reset to done or budget exhaustion.
pub fn run_episode(
    env: &mut dyn Environment,
    policy: &dyn Policy,
    template: &PromptTemplate,
    retriever: Option<Retriever<'_>>,
    spec: &TaskSpec,
    cfg: &EpisodeConfig,
) -> Result<EpisodeResult, RolloutError> {
    run_episode_observed(env, policy, template, retriever, spec, cfg, &mut |_, _| {})
}

/// [`run_episode`] with a callback that sees every assembled context.
pub fn run_episode_observed(
    env: &mut dyn Environment,
    policy: &dyn Policy,
    template: &PromptTemplate,
    retriever: Option<Retriever<'_>>,
    spec: &TaskSpec,
    cfg: &EpisodeConfig,
    observe: &mut dyn FnMut(usize, &[Turn]),
) -> Result<EpisodeResult, RolloutError> {
    cfg.validate(retriever.is_some())?;
    let started = Instant::now();
    let env_name = env.name().to_string();
    let mut traj = new_trajectory(episode_id(&env_name, spec), &env_name, spec);
    let mut result = EpisodeResult {
        spec: spec.clone(),
        config: cfg.clone(),
        trajectory: traj.clone(),
        success: false,
        score: 0.0,
        steps: 0,
        retrieval_calls: 0,
        retrieved_ids_per_call: Vec::new(),
        prompt_chars_per_step: Vec::new(),
        errors: Vec::new(),
        wall_time: Duration::ZERO,
    };

    let initial = match env.reset(spec) {
        Ok(obs) => obs,
        Err(e) => {
            result.errors.push(StepError {
                step: 0,
                message: format!("reset failed: {e}"),
            });
            traj.outcome = OutcomeState::Resolved(Outcome::failure());
            result.trajectory = traj;
            result.wall_time = started.elapsed();
            return Ok(result);
        }
    };
    traj.turns.push(Turn::user(initial));

    let retriever = match cfg.retrieval_mode {
        RetrievalMode::None => None,
        _ => retriever,
    };
    let mut memory = MemoryBlock::empty(cfg.fmt);
    if let (RetrievalMode::Static, Some(r)) = (cfg.retrieval_mode, &retriever) {
        let (block, ids) = r.memory(&build_static_query(&traj.task_description)?, cfg)?;
        memory = block;
        result.retrieval_calls += 1;
        result.retrieved_ids_per_call.push(ids);
    }

    let mut outcome = Outcome::failure();
    for step in 0..cfg.max_steps {
        if let (RetrievalMode::Dynamic, Some(r)) = (cfg.retrieval_mode, &retriever) {
            let (block, ids) = r.memory(&build_dynamic_query(&traj)?, cfg)?;
            memory = block;
            result.retrieval_calls += 1;
            result.retrieved_ids_per_call.push(ids);
        }
        let context = assemble_context(template, &memory, &traj)?;
        observe(step, &context);
        result.prompt_chars_per_step.push(context_chars(&context));

        let action = decide_action(policy, &context).unwrap_or_else(|e| {
            log::warn!("{}: step {step}: policy failed: {e}", traj.id);
            result.errors.push(StepError {
                step,
                message: format!("policy: {e}"),
            });
            SENTINEL_ACTION.to_string()
        });
        let reply = match env.step(&action) {
            Ok(r) => r,
            Err(e) => {
                result.errors.push(StepError {
                    step,
                    message: format!("environment: {e}"),
                });
                break;
            }
        };
        traj.turns.push(Turn::assistant(action));
        traj.turns.push(Turn::user(reply.observation));
        result.steps += 1;
        if reply.done {
            outcome = final_outcome(reply.success, reply.score);
            break;
        }
    }

    result.success = outcome.success;
    result.score = outcome.score;
    traj.outcome = OutcomeState::Resolved(outcome);
    result.trajectory = traj;
    result.wall_time = started.elapsed();
    Ok(result)
}

/// Everything the runner needs besides the spec list.
pub struct RunPlan<'a> {
    pub make_env: &'a (dyn Fn() -> Result<Box<dyn Environment>, String> + Sync),
    pub policy: &'a dyn Policy,
    pub template: &'a PromptTemplate,
    pub retriever: Option<Retriever<'a>>,
    pub config: EpisodeConfig,
    pub budget: Option<&'a StepBudget>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, RolloutError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RolloutError::Pool(e.to_string()))
}

/// Runs one episode per spec on up to `workers` threads. Output order follows
/// `specs`. Episodes that cannot start are returned as failures, not errors.
pub fn run_episodes(
    specs: &[TaskSpec],
    plan: &RunPlan<'_>,
    workers: usize,
) -> Result<Vec<EpisodeResult>, RolloutError> {
    plan.config.validate(plan.retriever.is_some())?;
    let run_one = |spec: &TaskSpec| -> Result<EpisodeResult, RolloutError> {
        let mut cfg = plan.config.clone();
        if let Some(b) = plan.budget {
            cfg.max_steps = b.for_task(&spec.task_type);
        }
        match (plan.make_env)() {
            Ok(mut env) => run_episode(
                env.as_mut(),
                plan.policy,
                plan.template,
                plan.retriever,
                spec,
                &cfg,
            ),
            Err(e) => {
                let mut traj = new_trajectory(episode_id("unavailable", spec), "unavailable", spec);
                traj.outcome = OutcomeState::Resolved(Outcome::failure());
                Ok(EpisodeResult {
                    spec: spec.clone(),
                    config: cfg,
                    trajectory: traj,
                    success: false,
                    score: 0.0,
                    steps: 0,
                    retrieval_calls: 0,
                    retrieved_ids_per_call: Vec::new(),
                    prompt_chars_per_step: Vec::new(),
                    errors: vec![StepError {
                        step: 0,
                        message: format!("environment unavailable: {e}"),
                    }],
                    wall_time: Duration::ZERO,
                })
            }
        }
    };
    pool(workers)?.install(|| specs.par_iter().map(run_one).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectFailure {
    pub spec: TaskSpec,
    pub reason: String,
}

/// Plays the environment's scripted expert on every spec and stores the
/// successful runs. Specs the expert cannot solve are reported and skipped.
pub fn collect_trajectories(
    make_env: &(dyn Fn() -> Result<Box<dyn Environment>, String> + Sync),
    specs: &[TaskSpec],
    max_steps: usize,
    workers: usize,
) -> Result<(TrajectoryStore, Vec<CollectFailure>), RolloutError> {
    let play = |spec: &TaskSpec| -> Result<Trajectory, String> {
        let mut env = make_env()?;
        let env_name = env.name().to_string();
        let mut traj = new_trajectory(episode_id(&env_name, spec), &env_name, spec);
        traj.turns
            .push(Turn::user(env.reset(spec).map_err(|e| e.to_string())?));
        for _ in 0..max_steps {
            let action = env
                .expert_action()
                .ok_or("environment has no expert action")?;
            let reply = env.step(&action).map_err(|e| e.to_string())?;
            traj.turns.push(Turn::assistant(action));
            traj.turns.push(Turn::user(reply.observation));
            if reply.done {
                if !reply.success {
                    return Err("expert finished without success".into());
                }
                traj.outcome = OutcomeState::Resolved(Outcome::success());
                return Ok(traj);
            }
        }
        Err(format!("expert did not finish within {max_steps} steps"))
    };
    let played: Vec<Result<Trajectory, String>> =
        pool(workers)?.install(|| specs.par_iter().map(play).collect());

    let mut trajectories = Vec::new();
    let mut failures = Vec::new();
    let mut seen = BTreeSet::new();
    for (spec, r) in specs.iter().zip(played) {
        match r {
            Ok(t) if !seen.insert(t.id.clone()) => failures.push(CollectFailure {
                spec: spec.clone(),
                reason: format!("duplicate trajectory id `{}`", t.id),
            }),
            Ok(t) => trajectories.push(t),
            Err(reason) => {
                log::warn!("expert failed on {}: {reason}", spec.description());
                failures.push(CollectFailure {
                    spec: spec.clone(),
                    reason,
                })
            }
        }
    }
    Ok((TrajectoryStore::new("collected", trajectories), failures))
}

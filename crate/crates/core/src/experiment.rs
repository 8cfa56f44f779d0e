//! Sweeps over (retrieval mode, k, index composition) with seed aggregation,
//! plus CSV / Markdown rendering of the result table.
//!
//! Config schema (TOML):
//!
//! ```toml
//! store = "expert.jsonl"        # optional; collected from the mini-world expert if absent
//! env = "miniworld"             # or "external" with env_command = ["prog", "arg", ...]
//! policy = "memory_follower"    # naive_placer | memory_follower | remote_chat
//! ks = [0, 1, 2, 4]
//! modes = ["static", "dynamic"]
//! compositions = ["all", "easy", "hard", "empty", "mismatched"]
//! seeds = [1, 2, 3]
//! eval_split = "all"            # easy | hard | all
//! episodes_per_seed = 20
//! max_steps = 50
//! fmt = "chat_json"
//! embedder = "local_hash:256"
//! tie_policy = "lexicographic"
//! tie_seed = 0                  # optional; defaults to each run's seed
//! workers = 4
//! ```
//!
//! Standard deviations use the population formula over per-seed success rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::Embedder;
use crate::env::{
    enumerate_specs, sample_specs, Environment, StepBudget, TaskSpec, DEFAULT_MAX_STEPS,
};
use crate::index::{build_index, ExperienceIndex, IndexError, IndexFilter, KeyMode, TieBreak};
use crate::policy::{PolicyConfig, PolicyKind};
use crate::prompt::PromptTemplate;
use crate::registry::{self, EnvOptions, RegistryError};
use crate::rollout::{
    collect_trajectories, run_episodes, EpisodeConfig, EpisodeResult, RetrievalMode, Retriever,
    RolloutError, RunPlan,
};
use crate::traj::{Split, TrajError, TrajFormat, TrajectoryStore};

/// Base seeds of the expert collection used when a sweep names no store.
pub const EXPERT_EASY_BASE_SEED: u64 = 10_000;
pub const EXPERT_HARD_BASE_SEED: u64 = 20_000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("reading sweep config {path}: {message}")]
    Config { path: String, message: String },
    #[error("invalid sweep: {0}")]
    Invalid(String),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    All,
    Easy,
    Hard,
    Empty,
    Mismatched,
}

impl Composition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Composition::All => "all",
            Composition::Easy => "easy",
            Composition::Hard => "hard",
            Composition::Empty => "empty",
            Composition::Mismatched => "mismatched",
        }
    }

    fn filter(&self) -> Option<IndexFilter> {
        match self {
            Composition::All => Some(IndexFilter::all()),
            Composition::Easy | Composition::Mismatched => Some(IndexFilter::splits([Split::Easy])),
            Composition::Hard => Some(IndexFilter::splits([Split::Hard])),
            Composition::Empty => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Easy,
    Hard,
    All,
}

impl EvalSplit {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalSplit::Easy => "easy",
            EvalSplit::Hard => "hard",
            EvalSplit::All => "all",
        }
    }
}

fn default_ks() -> Vec<usize> {
    vec![0, 1, 2, 4]
}
fn default_modes() -> Vec<RetrievalMode> {
    vec![RetrievalMode::Static]
}
fn default_compositions() -> Vec<Composition> {
    vec![Composition::All]
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_eval_split() -> EvalSplit {
    EvalSplit::All
}
fn default_episodes() -> usize {
    20
}
fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}
fn default_env() -> String {
    "miniworld".into()
}
fn default_embedder() -> String {
    format!("local_hash:{}", crate::embed::DEFAULT_LOCAL_DIM)
}
fn default_tie_policy() -> String {
    "lexicographic".into()
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub store: Option<PathBuf>,
    #[serde(default = "default_env")]
    pub env: String,
    #[serde(default)]
    pub env_command: Vec<String>,
    #[serde(default)]
    pub env_timeout_secs: Option<u64>,
    #[serde(default)]
    pub policy: PolicyKind,
    #[serde(default)]
    pub policy_endpoint: Option<String>,
    #[serde(default)]
    pub policy_model: Option<String>,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_modes")]
    pub modes: Vec<RetrievalMode>,
    #[serde(default = "default_compositions")]
    pub compositions: Vec<Composition>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_split")]
    pub eval_split: EvalSplit,
    #[serde(default = "default_episodes")]
    pub episodes_per_seed: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub max_steps_per_task: BTreeMap<String, usize>,
    #[serde(default)]
    pub fmt: TrajFormat,
    #[serde(default = "default_embedder")]
    pub embedder: String,
    #[serde(default = "default_tie_policy")]
    pub tie_policy: String,
    /// Fixed tie seed; when absent each seed also seeds tie-breaking.
    #[serde(default)]
    pub tie_seed: Option<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    /// Loads a config file; a relative `store` path is resolved against the
    /// config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut spec: SweepSpec = toml::from_str(&text).map_err(|e| ExperimentError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if let (Some(store), Some(dir)) = (&spec.store, path.parent()) {
            if store.is_relative() {
                spec.store = Some(dir.join(store));
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.to_string()));
        if self.ks.is_empty() || self.seeds.is_empty() || self.compositions.is_empty() {
            return bad("ks, seeds and compositions must be non-empty");
        }
        if self.modes.is_empty() && self.ks.iter().any(|&k| k > 0) {
            return bad("modes must be non-empty when some k > 0");
        }
        if self.episodes_per_seed == 0 || self.max_steps == 0 {
            return bad("episodes_per_seed and max_steps must be positive");
        }
        Ok(())
    }

    fn budget(&self) -> StepBudget {
        StepBudget {
            default: self.max_steps,
            per_task: self.max_steps_per_task.clone(),
        }
    }
}

/// Splits evaluated for a composition, in column order.
fn splits_for(eval: EvalSplit, composition: Composition) -> Vec<EvalSplit> {
    match (composition, eval) {
        (Composition::Mismatched, _) => vec![EvalSplit::Hard],
        (_, EvalSplit::All) => vec![EvalSplit::Easy, EvalSplit::Hard, EvalSplit::All],
        (_, s) => vec![s],
    }
}

/// The shared evaluation specs for one seed. `all` is the easy list followed
/// by the hard list, so its success rate is the episode-weighted combination.
pub fn eval_specs(split: EvalSplit, n: usize, seed: u64) -> Vec<TaskSpec> {
    match split {
        EvalSplit::Easy => sample_specs(Split::Easy, n, seed),
        EvalSplit::Hard => sample_specs(Split::Hard, n, seed),
        EvalSplit::All => {
            let mut v = sample_specs(Split::Easy, n, seed);
            v.extend(sample_specs(Split::Hard, n, seed));
            v
        }
    }
}

/// Expert trajectories over every easy and hard task combination.
pub fn default_expert_store(workers: usize) -> Result<TrajectoryStore, ExperimentError> {
    let mut specs = enumerate_specs(Split::Easy, EXPERT_EASY_BASE_SEED);
    specs.extend(enumerate_specs(Split::Hard, EXPERT_HARD_BASE_SEED));
    let make = || {
        registry::environments()
            .build("miniworld", &EnvOptions::default())
            .map_err(|e| e.to_string())
    };
    let (mut store, failures) = collect_trajectories(&make, &specs, DEFAULT_MAX_STEPS, workers)?;
    if let Some(f) = failures.first() {
        return Err(ExperimentError::Invalid(format!(
            "expert failed on {}: {}",
            f.spec.description(),
            f.reason
        )));
    }
    store.source = "miniworld-expert".into();
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub mode: RetrievalMode,
    pub k: usize,
    pub composition: Composition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultCell {
    pub mode: RetrievalMode,
    pub k: usize,
    pub composition: Composition,
    pub eval_split: EvalSplit,
    /// Percentages.
    pub mean_success: f64,
    pub std_success: f64,
    pub per_seed_success: Vec<f64>,
    pub n_seeds: usize,
    pub n_episodes: usize,
    pub mean_steps: f64,
    pub mean_prompt_chars: f64,
    pub failed_episodes_with_errors: usize,
}

impl ResultCell {
    fn row(&self) -> RowKey {
        RowKey {
            mode: self.mode,
            k: self.k,
            composition: self.composition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub cells: Vec<ResultCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub mode: RetrievalMode,
    pub k: usize,
    pub composition: Composition,
    pub seed: u64,
    pub episode: EpisodeResult,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    pub table: ResultTable,
    pub episodes: Vec<EpisodeRecord>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn success_rate(episodes: &[&EpisodeResult]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    100.0 * episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64
}

fn in_split(spec: &TaskSpec, split: EvalSplit) -> bool {
    match split {
        EvalSplit::All => true,
        EvalSplit::Easy => spec.split == Split::Easy,
        EvalSplit::Hard => spec.split == Split::Hard,
    }
}

struct Indices {
    embedder: Box<dyn Embedder>,
    store: TrajectoryStore,
    built: BTreeMap<(Composition, KeyMode), ExperienceIndex>,
}

impl Indices {
    fn get(
        &mut self,
        composition: Composition,
        key: KeyMode,
    ) -> Result<&ExperienceIndex, ExperimentError> {
        if !self.built.contains_key(&(composition, key)) {
            let index = match composition.filter() {
                Some(filter) => build_index(&self.store, &filter, key, self.embedder.as_ref())?,
                None => build_index(
                    &TrajectoryStore::new("empty", Vec::new()),
                    &IndexFilter::all(),
                    key,
                    self.embedder.as_ref(),
                )?,
            };
            self.built.insert((composition, key), index);
        }
        Ok(&self.built[&(composition, key)])
    }
}

/// Evaluates every (mode, k, composition) row on the same spec list per seed.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutput, ExperimentError> {
    spec.validate()?;
    let store = match &spec.store {
        Some(path) => TrajectoryStore::load(path)?,
        None => default_expert_store(spec.workers)?,
    };
    let embedder = registry::embedder(&spec.embedder)?;
    let ties: Box<dyn TieBreak> = registry::tie_break(&spec.tie_policy)?;
    let mut policy_cfg = PolicyConfig::local(spec.policy);
    policy_cfg.endpoint = spec.policy_endpoint.clone();
    policy_cfg.model = spec.policy_model.clone();
    let policy = registry::policies().build(spec.policy.as_str(), &policy_cfg)?;
    let env_options = EnvOptions {
        command: spec.env_command.clone(),
        env_name: None,
        timeout: spec.env_timeout_secs.map(Duration::from_secs),
    };
    let env_registry = registry::environments();
    if !env_registry.contains(&spec.env) {
        return Err(env_registry
            .build(&spec.env, &env_options)
            .err()
            .expect("unknown name")
            .into());
    }
    let make_env = |/* per episode */| -> Result<Box<dyn Environment>, String> {
        env_registry.build(&spec.env, &env_options).map_err(|e| e.to_string())
    };
    let template_name = if spec.env == "external" {
        "alfworld"
    } else {
        "miniworld"
    };
    let template = PromptTemplate::builtin(template_name)
        .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    let budget = spec.budget();

    let mut indices = Indices {
        embedder,
        store,
        built: BTreeMap::new(),
    };

    // Grid rows; every k = 0 row collapses to the no-retrieval baseline.
    let mut rows: Vec<RowKey> = Vec::new();
    for &composition in &spec.compositions {
        for &k in &spec.ks {
            let modes: Vec<RetrievalMode> = if k == 0 {
                vec![RetrievalMode::None]
            } else {
                spec.modes
                    .iter()
                    .copied()
                    .filter(|m| *m != RetrievalMode::None)
                    .collect()
            };
            for mode in modes {
                let row = RowKey {
                    mode,
                    k,
                    composition,
                };
                if !rows.contains(&row) {
                    rows.push(row);
                }
            }
        }
    }
    rows.sort();

    let mut out = SweepOutput::default();
    for row in rows {
        let eval = if row.composition == Composition::Mismatched {
            EvalSplit::Hard
        } else {
            spec.eval_split
        };
        let key_mode = match row.mode {
            RetrievalMode::Dynamic => KeyMode::FullTrajectoryJson,
            _ => KeyMode::TaskDescription,
        };
        let index = if row.mode == RetrievalMode::None {
            None
        } else {
            Some(indices.get(row.composition, key_mode)?.clone())
        };
        let retriever = index.as_ref().map(|index| Retriever {
            index,
            embedder: indices.embedder.as_ref(),
            ties: ties.as_ref(),
        });

        let mut per_seed: Vec<(u64, Vec<EpisodeResult>)> = Vec::new();
        for &seed in &spec.seeds {
            let config = EpisodeConfig {
                retrieval_mode: row.mode,
                k: row.k,
                fmt: spec.fmt,
                max_steps: spec.max_steps,
                tie_seed: spec.tie_seed.unwrap_or(seed),
            }
            .normalized(retriever.is_some());
            let plan = RunPlan {
                make_env: &make_env,
                policy: policy.as_ref(),
                template: &template,
                retriever: if config.retrieval_mode == RetrievalMode::None {
                    None
                } else {
                    retriever
                },
                config,
                budget: Some(&budget),
            };
            let specs = eval_specs(eval, spec.episodes_per_seed, seed);
            per_seed.push((seed, run_episodes(&specs, &plan, spec.workers)?));
        }

        for split in splits_for(spec.eval_split, row.composition) {
            let mut rates = Vec::new();
            let mut all: Vec<&EpisodeResult> = Vec::new();
            for (_, episodes) in &per_seed {
                let chosen: Vec<&EpisodeResult> = episodes
                    .iter()
                    .filter(|e| in_split(&e.spec, split))
                    .collect();
                rates.push(success_rate(&chosen));
                all.extend(chosen);
            }
            let (mean, std) = mean_std(&rates);
            let n = all.len().max(1) as f64;
            out.table.cells.push(ResultCell {
                mode: row.mode,
                k: row.k,
                composition: row.composition,
                eval_split: split,
                mean_success: mean,
                std_success: std,
                per_seed_success: rates,
                n_seeds: spec.seeds.len(),
                n_episodes: all.len(),
                mean_steps: all.iter().map(|e| e.steps as f64).sum::<f64>() / n,
                mean_prompt_chars: all.iter().map(|e| e.mean_prompt_chars()).sum::<f64>() / n,
                failed_episodes_with_errors: all.iter().filter(|e| !e.errors.is_empty()).count(),
            });
        }
        for (seed, episodes) in per_seed {
            out.episodes
                .extend(episodes.into_iter().map(|episode| EpisodeRecord {
                    mode: row.mode,
                    k: row.k,
                    composition: row.composition,
                    seed,
                    episode,
                }));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStyle {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportStyle::Csv),
            "md" | "markdown" => Ok(ReportStyle::Markdown),
            other => Err(format!(
                "unknown report style `{other}` (expected csv or md)"
            )),
        }
    }
}

pub fn format_cell(cell: &ResultCell) -> String {
    format!("{:.2} ± {:.2}", cell.mean_success, cell.std_success)
}

/// Rows keyed by (mode, k, composition) with one column per evaluated split.
pub fn report(table: &ResultTable, style: ReportStyle) -> String {
    let mut splits: Vec<EvalSplit> = table.cells.iter().map(|c| c.eval_split).collect();
    splits.sort();
    splits.dedup();
    let mut rows: BTreeMap<RowKey, BTreeMap<EvalSplit, &ResultCell>> = BTreeMap::new();
    for cell in &table.cells {
        rows.entry(cell.row())
            .or_default()
            .insert(cell.eval_split, cell);
    }

    let mut header = vec!["mode".to_string(), "k".into(), "composition".into()];
    header.extend(splits.iter().map(|s| s.as_str().to_string()));
    let lines: Vec<Vec<String>> = rows
        .iter()
        .map(|(row, cells)| {
            let mut line = vec![
                row.mode.to_string(),
                row.k.to_string(),
                row.composition.as_str().to_string(),
            ];
            line.extend(
                splits
                    .iter()
                    .map(|s| cells.get(s).map(|c| format_cell(c)).unwrap_or_default()),
            );
            line
        })
        .collect();

    let mut out = String::new();
    match style {
        ReportStyle::Csv => {
            writeln!(out, "{}", header.join(",")).ok();
            for line in lines {
                writeln!(out, "{}", line.join(",")).ok();
            }
        }
        ReportStyle::Markdown => {
            writeln!(out, "| {} |", header.join(" | ")).ok();
            writeln!(out, "|{}", "---|".repeat(header.len())).ok();
            for line in lines {
                let line: Vec<String> = line
                    .into_iter()
                    .map(|c| if c.is_empty() { "-".into() } else { c })
                    .collect();
                writeln!(out, "| {} |", line.join(" | ")).ok();
            }
        }
    }
    out
}

/// Writes table.csv, table.md, cells.jsonl and episodes.jsonl into `dir`.
pub fn write_outputs(output: &SweepOutput, dir: impl AsRef<Path>) -> Result<(), ExperimentError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| ExperimentError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut cells = String::new();
    for c in &output.table.cells {
        cells.push_str(&serde_json::to_string(c).expect("cell serializes"));
        cells.push('\n');
    }
    let mut episodes = String::new();
    for e in &output.episodes {
        episodes.push_str(&serde_json::to_string(e).expect("episode serializes"));
        episodes.push('\n');
    }
    for (name, text) in [
        ("table.csv", report(&output.table, ReportStyle::Csv)),
        ("table.md", report(&output.table, ReportStyle::Markdown)),
        ("cells.jsonl", cells),
        ("episodes.jsonl", episodes),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io(&path))?;
    }
    Ok(())
}

/// Reads a `cells.jsonl` back into a table.
pub fn read_cells(path: impl AsRef<Path>) -> Result<ResultTable, ExperimentError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let cells = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| ExperimentError::Config {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(ResultTable { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[100.0, 50.0]);
        assert_eq!(m, 75.0);
        assert_eq!(s, 25.0);
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let s = SweepSpec::default();
        assert_eq!(s.ks, [0, 1, 2, 4]);
        assert_eq!(s.policy, PolicyKind::MemoryFollower);
        assert!(SweepSpec::parse("bogus = 1").is_err());
        let s =
            SweepSpec::parse("ks = [2]\nmodes = [\"dynamic\"]\ncompositions = [\"mismatched\"]")
                .unwrap();
        assert_eq!(s.modes, [RetrievalMode::Dynamic]);
        assert_eq!(s.compositions, [Composition::Mismatched]);
    }

    #[test]
    fn mismatched_evaluates_hard_only() {
        assert_eq!(
            splits_for(EvalSplit::All, Composition::Mismatched),
            [EvalSplit::Hard]
        );
        assert_eq!(
            splits_for(EvalSplit::Easy, Composition::All),
            [EvalSplit::Easy]
        );
    }
}

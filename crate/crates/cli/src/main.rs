use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use exprag_core::env::{enumerate_specs, sample_specs, Environment, StepBudget, DEFAULT_MAX_STEPS};
use exprag_core::experiment::{
    read_cells, report, run_sweep, write_outputs, ReportStyle, SweepSpec, EXPERT_EASY_BASE_SEED,
    EXPERT_HARD_BASE_SEED,
};
use exprag_core::index::{build_index, ExperienceIndex, IndexFilter, KeyMode, OutcomeClass};
use exprag_core::policy::{PolicyConfig, PolicyKind};
use exprag_core::prompt::PromptTemplate;
use exprag_core::registry::{self, EnvOptions};
use exprag_core::rollout::{
    collect_trajectories, run_episodes, EpisodeConfig, RetrievalMode, Retriever, RunPlan,
};
use exprag_core::sft::{export_sft, manifest_path, write_sft, SftMode, SftOptions, SftRetrieval};
use exprag_core::traj::{Split, TrajFormat, TrajectoryStore};

#[derive(Parser)]
#[command(
    name = "exprag",
    version,
    about = "Experience retrieval for text-world agents"
)]
struct Cli {
    /// Worker threads for episode execution.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Play the scripted expert and write a trajectory store.
    Collect(CollectArgs),
    /// Build experience indices.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Print the top-k trajectories for a query as JSONL.
    Retrieve(RetrieveArgs),
    /// Run episodes with a policy and write per-episode JSONL.
    Rollout(RolloutArgs),
    /// Run a configured sweep and write tables and logs.
    Sweep(SweepArgs),
    /// Export a fine-tuning dataset from a store.
    ExportSft(ExportArgs),
    /// Render a table from a sweep's cells.jsonl.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum IndexCommand {
    Build(IndexBuildArgs),
}

/// `all`, `easy` or `hard`.
#[derive(Clone, Copy, Debug)]
struct SplitArg(Option<Split>);

impl std::str::FromStr for SplitArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(SplitArg(None)),
            other => other
                .parse()
                .map(|s| SplitArg(Some(s)))
                .map_err(|e: String| e),
        }
    }
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self.0 {
            Some(s) => vec![s],
            None => vec![Split::Easy, Split::Hard],
        }
    }
}

#[derive(Args, Clone)]
struct EnvArgs {
    /// Environment name: miniworld or external.
    #[arg(long, default_value = "miniworld")]
    env: String,
    /// Program and arguments for the external environment.
    #[arg(long = "env-command", num_args = 1.., allow_hyphen_values = true)]
    env_command: Vec<String>,
    #[arg(long = "env-timeout-secs")]
    env_timeout_secs: Option<u64>,
}

impl EnvArgs {
    fn options(&self) -> EnvOptions {
        EnvOptions {
            command: self.env_command.clone(),
            env_name: None,
            timeout: self.env_timeout_secs.map(Duration::from_secs),
        }
    }
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "all")]
    split: SplitArg,
    #[arg(long = "max-steps", default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
    #[command(flatten)]
    env: EnvArgs,
}

#[derive(Args)]
struct IndexBuildArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "all")]
    split: SplitArg,
    /// `all` or `success`.
    #[arg(long, default_value = "all")]
    outcomes: String,
    #[arg(long = "key-mode", default_value = "task")]
    key_mode: KeyMode,
    #[arg(long, default_value = "local_hash")]
    embedder: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Defaults to the embedder recorded in the index.
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long = "tie-policy", default_value = "lexicographic")]
    tie_policy: String,
    #[arg(long = "tie-seed", default_value_t = 0)]
    tie_seed: u64,
    #[arg(long)]
    exclude: Vec<String>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long, default_value = "memory_follower")]
    policy: PolicyKind,
    #[arg(long = "policy-endpoint")]
    policy_endpoint: Option<String>,
    #[arg(long = "policy-model")]
    policy_model: Option<String>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value = "static")]
    mode: RetrievalMode,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value = "chat_json")]
    fmt: TrajFormat,
    #[arg(long, default_value = "all")]
    split: SplitArg,
    /// Episodes per split.
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long = "max-steps", default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long = "tie-policy", default_value = "lexicographic")]
    tie_policy: String,
    /// Defaults to --seed.
    #[arg(long = "tie-seed")]
    tie_seed: Option<u64>,
    #[arg(long)]
    template: Option<String>,
    /// Output JSONL path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    env: EnvArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "sweep-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "plain")]
    mode: SftMode,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value = "chat_json")]
    fmt: TrajFormat,
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long = "tie-policy", default_value = "lexicographic")]
    tie_policy: String,
    #[arg(long = "tie-seed", default_value_t = 0)]
    tie_seed: u64,
    #[arg(long, default_value = "miniworld")]
    template: String,
}

#[derive(Args)]
struct ReportArgs {
    /// A cells.jsonl file or a sweep output directory.
    #[arg(long)]
    cells: PathBuf,
    #[arg(long, default_value = "csv")]
    format: ReportStyle,
}

/// Post-parse flag problems; these exit like clap's own usage errors.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e:#}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let workers = cli.workers.max(1);
    match cli.command {
        Command::Collect(a) => collect(a, workers),
        Command::Index(IndexCommand::Build(a)) => index_build(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Rollout(a) => rollout(a, workers),
        Command::Sweep(a) => sweep(a, workers),
        Command::ExportSft(a) => export(a),
        Command::Report(a) => show_report(a),
    }
}

fn env_factory(
    env: &EnvArgs,
) -> Result<impl Fn() -> Result<Box<dyn Environment>, String> + Sync + '_> {
    let environments = registry::environments();
    if !environments.contains(&env.env) {
        let known: Vec<&str> = environments.names().collect();
        return Err(usage(format!(
            "unknown environment `{}` (known: {})",
            env.env,
            known.join(", ")
        )));
    }
    let options = env.options();
    Ok(move || {
        environments
            .build(&env.env, &options)
            .map_err(|e| e.to_string())
    })
}

fn collect(a: CollectArgs, workers: usize) -> Result<ExitCode> {
    let mut specs = Vec::new();
    for split in a.split.splits() {
        let base = if split == Split::Easy {
            EXPERT_EASY_BASE_SEED
        } else {
            EXPERT_HARD_BASE_SEED
        };
        specs.extend(enumerate_specs(split, base));
    }
    let make = env_factory(&a.env)?;
    let (mut store, failures) = collect_trajectories(&make, &specs, a.max_steps, workers)?;
    store.source = format!("{}-expert", a.env.env);
    store
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    for f in &failures {
        log::warn!("skipped {}: {}", f.spec.description(), f.reason);
    }
    log::info!("wrote {} trajectories to {}", store.len(), a.out.display());
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn index_build(a: IndexBuildArgs) -> Result<ExitCode> {
    let mut filter = IndexFilter::splits(a.split.0);
    filter = match a.outcomes.as_str() {
        "all" => filter,
        "success" => filter.with_outcomes([OutcomeClass::Success]),
        other => {
            return Err(usage(format!(
                "unknown --outcomes `{other}` (expected all or success)"
            )))
        }
    };
    let store = TrajectoryStore::load(&a.store)?;
    let embedder = registry::embedder(&a.embedder).map_err(|e| usage(e.to_string()))?;
    let index = build_index(&store, &filter, a.key_mode, embedder.as_ref())?;
    index.save(&a.out)?;
    log::info!(
        "indexed {} of {} trajectories into {}",
        index.len(),
        store.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_index(
    path: &Path,
    embedder: Option<&str>,
) -> Result<(ExperienceIndex, Box<dyn exprag_core::Embedder>)> {
    let index = ExperienceIndex::load(path)?;
    let id = embedder.unwrap_or(&index.manifest().embedder).to_string();
    let embedder = registry::embedder(&id).map_err(|e| usage(e.to_string()))?;
    Ok((index, embedder))
}

fn retrieve(a: RetrieveArgs) -> Result<ExitCode> {
    let (index, embedder) = load_index(&a.index, a.embedder.as_deref())?;
    let ties = registry::tie_break(&a.tie_policy).map_err(|e| usage(e.to_string()))?;
    let exclude: BTreeSet<String> = a.exclude.into_iter().collect();
    let hits = index.retrieve_excluding(
        &a.query,
        a.k,
        embedder.as_ref(),
        ties.as_ref(),
        a.tie_seed,
        &exclude,
    )?;
    let mut out = std::io::stdout().lock();
    for h in hits {
        writeln!(
            out,
            "{}",
            serde_json::json!({"id": h.traj_id, "score": h.score})
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn rollout(a: RolloutArgs, workers: usize) -> Result<ExitCode> {
    let loaded = match &a.index {
        Some(p) => Some(load_index(p, a.embedder.as_deref())?),
        None => None,
    };
    let ties = registry::tie_break(&a.tie_policy).map_err(|e| usage(e.to_string()))?;
    let retriever = loaded.as_ref().map(|(index, embedder)| Retriever {
        index,
        embedder: embedder.as_ref(),
        ties: ties.as_ref(),
    });
    let config = EpisodeConfig {
        retrieval_mode: a.mode,
        k: a.k,
        fmt: a.fmt,
        max_steps: a.max_steps,
        tie_seed: a.tie_seed.unwrap_or(a.seed),
    }
    .normalized(retriever.is_some());
    if a.mode != RetrievalMode::None && a.k > 0 && retriever.is_none() {
        log::warn!("no --index given; running without retrieval");
    }

    let mut policy_cfg = PolicyConfig::local(a.policy);
    policy_cfg.endpoint = a.policy_endpoint.clone();
    policy_cfg.model = a.policy_model.clone();
    let policy = registry::policies().build(a.policy.as_str(), &policy_cfg)?;
    let template_name = a.template.clone().unwrap_or_else(|| {
        if a.env.env == "external" {
            "alfworld"
        } else {
            "miniworld"
        }
        .to_string()
    });
    let template = PromptTemplate::builtin(&template_name).map_err(|e| usage(e.to_string()))?;
    let make = env_factory(&a.env)?;

    let mut specs = Vec::new();
    for split in a.split.splits() {
        specs.extend(sample_specs(split, a.episodes, a.seed));
    }
    let budget = StepBudget::uniform(a.max_steps);
    let plan = RunPlan {
        make_env: &make,
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
    let results = run_episodes(&specs, &plan, workers)?;

    let mut text = String::new();
    for r in &results {
        text.push_str(&r.to_log_line());
        text.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    let ok = results.iter().filter(|r| r.success).count();
    let troubled = results.iter().filter(|r| !r.errors.is_empty()).count();
    log::info!("{ok}/{} episodes succeeded", results.len());
    if troubled > 0 {
        log::error!("{troubled} episode(s) reported errors");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs, workers: usize) -> Result<ExitCode> {
    let mut spec = SweepSpec::load(&a.config).map_err(|e| usage(e.to_string()))?;
    if workers > 1 {
        spec.workers = workers;
    }
    let output = run_sweep(&spec)?;
    write_outputs(&output, &a.out)?;
    let troubled: usize = output
        .table
        .cells
        .iter()
        .map(|c| c.failed_episodes_with_errors)
        .sum();
    log::info!(
        "wrote {} cells to {}",
        output.table.cells.len(),
        a.out.display()
    );
    if troubled > 0 {
        log::error!("{troubled} episode(s) reported errors");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn export(a: ExportArgs) -> Result<ExitCode> {
    if a.mode == SftMode::Exprag && (a.index.is_none() || a.k == 0) {
        bail!(usage("--mode exprag needs --index and --k >= 1"));
    }
    let template = PromptTemplate::builtin(&a.template).map_err(|e| usage(e.to_string()))?;
    let ties = registry::tie_break(&a.tie_policy).map_err(|e| usage(e.to_string()))?;
    let store = TrajectoryStore::load(&a.store)?;
    let loaded = match (&a.mode, &a.index) {
        (SftMode::Exprag, Some(p)) => Some(load_index(p, a.embedder.as_deref())?),
        _ => None,
    };
    let retrieval = loaded.as_ref().map(|(index, embedder)| SftRetrieval {
        index,
        embedder: embedder.as_ref(),
        ties: ties.as_ref(),
    });
    let opts = SftOptions {
        mode: a.mode,
        k: a.k,
        fmt: a.fmt,
        tie_seed: a.tie_seed,
        template,
    };
    let export = export_sft(&store, &opts, retrieval)?;
    let n = write_sft(&export, &a.out)?;
    log::info!(
        "wrote {n} samples to {} ({})",
        a.out.display(),
        manifest_path(&a.out).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn show_report(a: ReportArgs) -> Result<ExitCode> {
    let path = if a.cells.is_dir() {
        a.cells.join("cells.jsonl")
    } else {
        a.cells
    };
    let table = read_cells(&path)?;
    print!("{}", report(&table, a.format));
    Ok(ExitCode::SUCCESS)
}

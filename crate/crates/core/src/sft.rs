//! Supervised fine-tuning datasets: plain chat samples, or samples whose
//! system message carries a retrieved memory block.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::Embedder;
use crate::index::{ExperienceIndex, IndexError, TieBreak};
use crate::prompt::{
    build_memory_block, build_static_query, MemoryBlock, PromptError, PromptTemplate,
};
use crate::traj::{Role, TrajFormat, Trajectory, TrajectoryStore, Turn};

#[derive(Debug, Error)]
pub enum SftError {
    #[error("exprag export needs an index and k >= 1")]
    MissingRetrieval,
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftMode {
    #[default]
    Plain,
    Exprag,
}

impl std::str::FromStr for SftMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(SftMode::Plain),
            "exprag" => Ok(SftMode::Exprag),
            other => Err(format!(
                "unknown sft mode `{other}` (expected plain or exprag)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub retrieved_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSample {
    pub messages: Vec<Turn>,
    pub loss_mask: Vec<bool>,
    pub provenance: Provenance,
}

impl SftSample {
    fn new(system: String, traj: &Trajectory, retrieved_ids: Vec<String>) -> Self {
        let mut messages = vec![Turn::system(system)];
        messages.extend(traj.dialogue().iter().cloned());
        let loss_mask = messages.iter().map(|m| m.role == Role::Assistant).collect();
        Self {
            messages,
            loss_mask,
            provenance: Provenance {
                source_id: traj.id.clone(),
                retrieved_ids,
            },
        }
    }
}

/// Replaces the system message with the bare template text.
pub fn strip_memory(sample: &SftSample, template: &PromptTemplate) -> SftSample {
    let mut out = sample.clone();
    if let Some(first) = out.messages.first_mut() {
        if first.role == Role::System {
            first.content = template.system_text.clone();
        }
    }
    out.provenance.retrieved_ids.clear();
    out
}

/// Training recipe passed through to downstream trainers untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: String,
    pub lora_target_modules: Vec<String>,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
    pub precision: String,
    pub decoding_temperature: f64,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            optimizer: "PagedAdamW8bit".into(),
            learning_rate: 5e-5,
            weight_decay: 0.0,
            lr_schedule: "constant".into(),
            lora_target_modules: ["q_proj", "v_proj", "k_proj", "output_proj"]
                .map(String::from)
                .to_vec(),
            lora_rank: 8,
            lora_alpha: 16,
            lora_dropout: 0.1,
            precision: "bf16".into(),
            decoding_temperature: 0.0,
            seed: 2025,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftManifest {
    pub mode: SftMode,
    pub k: usize,
    pub fmt: TrajFormat,
    pub tie_policy: Option<String>,
    pub tie_seed: u64,
    pub query: String,
    /// A sample never retrieves its own source trajectory.
    pub self_exclusion: String,
    pub source: String,
    pub samples: usize,
    pub skipped_unsuccessful: usize,
    pub empty_memory_warnings: usize,
    pub hyperparameters: Hyperparameters,
}

#[derive(Debug, Clone)]
pub struct SftExport {
    pub samples: Vec<SftSample>,
    pub manifest: SftManifest,
}

#[derive(Clone, Copy)]
pub struct SftRetrieval<'a> {
    pub index: &'a ExperienceIndex,
    pub embedder: &'a dyn Embedder,
    pub ties: &'a dyn TieBreak,
}

#[derive(Debug, Clone)]
pub struct SftOptions {
    pub mode: SftMode,
    pub k: usize,
    pub fmt: TrajFormat,
    pub tie_seed: u64,
    pub template: PromptTemplate,
}

/// One sample per successful trajectory of `store`, in store order.
pub fn export_sft(
    store: &TrajectoryStore,
    opts: &SftOptions,
    retrieval: Option<SftRetrieval<'_>>,
) -> Result<SftExport, SftError> {
    let retrieval = match opts.mode {
        SftMode::Plain => None,
        SftMode::Exprag => match retrieval {
            Some(r) if opts.k >= 1 => Some(r),
            _ => return Err(SftError::MissingRetrieval),
        },
    };
    let sources: Vec<&Trajectory> = store
        .trajectories
        .iter()
        .filter(|t| t.is_success())
        .collect();

    let build = |traj: &&Trajectory| -> Result<(SftSample, bool), SftError> {
        let Some(r) = retrieval else {
            return Ok((
                SftSample::new(opts.template.system_text.clone(), traj, Vec::new()),
                false,
            ));
        };
        let exclude: BTreeSet<String> = [traj.id.clone()].into();
        let query = build_static_query(&traj.task_description)?;
        let hits = r.index.retrieve_excluding(
            &query,
            opts.k,
            r.embedder,
            r.ties,
            opts.tie_seed,
            &exclude,
        )?;
        let entries = r.index.entries();
        let retrieved: Vec<(&Trajectory, f64)> = hits
            .iter()
            .map(|h| (&entries[h.entry].trajectory, h.score))
            .collect();
        let memory = if retrieved.is_empty() {
            MemoryBlock::empty(opts.fmt)
        } else {
            build_memory_block(&retrieved, opts.fmt)
        };
        let ids = hits.into_iter().map(|h| h.traj_id).collect();
        let sample = SftSample::new(opts.template.system_message(&memory), traj, ids);
        Ok((sample, memory.is_empty()))
    };
    let built: Vec<(SftSample, bool)> = sources.par_iter().map(build).collect::<Result<_, _>>()?;

    let warnings = built.iter().filter(|(_, empty)| *empty).count();
    if retrieval.is_some() && warnings > 0 {
        log::warn!("{warnings} sample(s) exported with an empty memory block");
    }
    let manifest = SftManifest {
        mode: opts.mode,
        k: if retrieval.is_some() { opts.k } else { 0 },
        fmt: opts.fmt,
        tie_policy: retrieval.map(|r| r.ties.name().to_string()),
        tie_seed: opts.tie_seed,
        query: if retrieval.is_some() {
            "static"
        } else {
            "none"
        }
        .into(),
        self_exclusion: "leave_one_out".into(),
        source: store.source.clone(),
        samples: built.len(),
        skipped_unsuccessful: store.len() - sources.len(),
        empty_memory_warnings: if retrieval.is_some() { warnings } else { 0 },
        hyperparameters: Hyperparameters::default(),
    };
    Ok(SftExport {
        samples: built.into_iter().map(|(s, _)| s).collect(),
        manifest,
    })
}

/// Manifest path that accompanies a dataset path.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Writes the JSONL dataset to `out` and its manifest next to it.
pub fn write_sft(export: &SftExport, out: impl AsRef<Path>) -> Result<usize, SftError> {
    let out = out.as_ref();
    let mut text = String::new();
    for s in &export.samples {
        text.push_str(&serde_json::to_string(s).expect("sample serializes"));
        text.push('\n');
    }
    let write = |path: &Path, body: &str| {
        fs::write(path, body).map_err(|source| SftError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(out, &text)?;
    let manifest = serde_json::to_string_pretty(&export.manifest).expect("manifest serializes");
    write(&manifest_path(out), &(manifest + "\n"))?;
    Ok(export.samples.len())
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<SftSample>, SftError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SftError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| SftError::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_next_to_dataset() {
        assert_eq!(
            manifest_path(Path::new("/x/sft.jsonl")),
            Path::new("/x/sft.manifest.json")
        );
    }

    #[test]
    fn recipe_passthrough() {
        let h = Hyperparameters::default();
        assert_eq!((h.lora_rank, h.lora_alpha), (8, 16));
        assert_eq!(h.learning_rate, 5e-5);
    }
}

//! Stage plans for the three pretraining strategies and the shuffled, checksummed
//! manifests that feed them.

use crate::datagen::{InstructionSample, TaskKind};
use crate::jsonl::{write_jsonl, JsonlError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

/// Published size of the full pretraining set, used as an informational reference.
pub const REFERENCE_TOTAL: usize = 920_000;

#[derive(Debug, thiserror::Error)]
pub enum MixtureError {
    #[error("no eligible samples for stage `{stage_id}`")]
    EmptyMixture { stage_id: String },
    #[error("manifest checksum mismatch: header says {expected}, entries hash to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("manifest counts sum to {counted} but it lists {entries} entries")]
    CountMismatch { counted: usize, entries: usize },
    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),
    #[error("unknown strategy `{0}` (expected caption_only, mix_all or two_stage)")]
    UnknownStrategy(String),
    #[error("epochs must be positive")]
    ZeroEpochs,
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("cannot read or write {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CaptionOnly,
    MixAll,
    TwoStage,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::CaptionOnly, Strategy::MixAll, Strategy::TwoStage];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::CaptionOnly => "caption_only",
            Strategy::MixAll => "mix_all",
            Strategy::TwoStage => "two_stage",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = MixtureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| MixtureError::UnknownStrategy(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    LanguageModel,
    VisionEncoder,
    Projector,
}

/// Which checkpoint of a stage the trainer should keep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    Last,
    BestByValidation { metric: String, higher_is_better: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub stage_id: String,
    pub task_filter: BTreeSet<TaskKind>,
    pub trainable_components: BTreeSet<Component>,
    pub dataset_ref: String,
    pub epochs: u32,
    pub selection: Selection,
}

impl Stage {
    /// Captions only; the language model stays frozen.
    pub fn caption() -> Self {
        Stage {
            stage_id: "caption".into(),
            task_filter: [TaskKind::Caption].into(),
            trainable_components: [Component::VisionEncoder, Component::Projector].into(),
            dataset_ref: "manifests/caption.json".into(),
            epochs: 1,
            selection: Selection::BestByValidation {
                metric: "val_auc".into(),
                higher_is_better: true,
            },
        }
    }

    /// Every task kind, every component trainable.
    pub fn mix_all() -> Self {
        Stage {
            stage_id: "mix_all".into(),
            task_filter: TaskKind::ALL.into(),
            trainable_components: [Component::LanguageModel, Component::VisionEncoder, Component::Projector].into(),
            dataset_ref: "manifests/mix_all.json".into(),
            epochs: 1,
            selection: Selection::Last,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub strategy: Strategy,
    pub stages: Vec<Stage>,
}

impl StagePlan {
    /// Sets the epoch count of every stage.
    pub fn with_epochs(mut self, epochs: u32) -> Result<Self, MixtureError> {
        if epochs == 0 {
            return Err(MixtureError::ZeroEpochs);
        }
        for s in &mut self.stages {
            s.epochs = epochs;
        }
        Ok(self)
    }
}

pub fn build_stage_plan(strategy: Strategy) -> StagePlan {
    let stages = match strategy {
        Strategy::CaptionOnly => vec![Stage::caption()],
        Strategy::MixAll => vec![Stage::mix_all()],
        Strategy::TwoStage => vec![Stage::caption(), Stage::mix_all()],
    };
    StagePlan { strategy, stages }
}

/// Generated samples sorted by id, with each sample's byte offset in its JSONL file.
#[derive(Debug, Clone, Default)]
pub struct SampleStore {
    samples: Vec<InstructionSample>,
    offsets: Vec<u64>,
}

impl SampleStore {
    /// Offsets are those the samples would have in the file [`SampleStore::store`] writes.
    pub fn from_samples(mut samples: Vec<InstructionSample>) -> Result<Self, MixtureError> {
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if let Some(w) = samples.windows(2).find(|w| w[0].sample_id == w[1].sample_id) {
            return Err(MixtureError::DuplicateSample(w[0].sample_id.clone()));
        }
        let mut offsets = Vec::with_capacity(samples.len());
        let mut pos = 0u64;
        for s in &samples {
            offsets.push(pos);
            pos += serde_json::to_string(s).expect("sample serializes").len() as u64 + 1;
        }
        Ok(SampleStore { samples, offsets })
    }

    /// Reads a sample JSONL file, recording where each line starts.
    pub fn load(path: &Path) -> Result<Self, MixtureError> {
        let io = |e: std::io::Error| MixtureError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut reader = BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut rows = Vec::new();
        let mut line = String::new();
        let (mut pos, mut number) = (0u64, 0usize);
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io)?;
            if n == 0 {
                break;
            }
            number += 1;
            if !line.trim().is_empty() {
                let sample: InstructionSample = serde_json::from_str(&line).map_err(|e| {
                    MixtureError::Jsonl(JsonlError::Schema {
                        line: number,
                        message: e.to_string(),
                    })
                })?;
                rows.push((sample, pos));
            }
            pos += n as u64;
        }
        rows.sort_by(|a, b| a.0.sample_id.cmp(&b.0.sample_id));
        if let Some(w) = rows.windows(2).find(|w| w[0].0.sample_id == w[1].0.sample_id) {
            return Err(MixtureError::DuplicateSample(w[0].0.sample_id.clone()));
        }
        let (samples, offsets) = rows.into_iter().unzip();
        Ok(SampleStore { samples, offsets })
    }

    pub fn store(&self, path: &Path) -> Result<(), MixtureError> {
        Ok(write_jsonl(path, &self.samples)?)
    }

    pub fn samples(&self) -> &[InstructionSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&InstructionSample> {
        let i = self
            .samples
            .binary_search_by(|s| s.sample_id.as_str().cmp(sample_id))
            .ok()?;
        Some(&self.samples[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub offset: u64,
}

pub type CountTable = BTreeMap<String, BTreeMap<TaskKind, usize>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub strategy: Strategy,
    pub stage: Stage,
    pub seed: u64,
    /// Entry counts per issue per task.
    pub counts: CountTable,
    /// SHA-256 over the entry ids in order, each followed by `\n`.
    pub checksum: String,
    pub entries: Vec<ManifestEntry>,
}

/// Hash of the ordered id list.
pub fn entries_checksum(entries: &[ManifestEntry]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.sample_id.as_bytes());
        h.update(b"\n");
    }
    format!("{:x}", h.finalize())
}

/// Seeded uniform shuffle of every unfiltered sample whose task the stage trains on.
pub fn pack_mixture(
    store: &SampleStore,
    strategy: Strategy,
    stage: &Stage,
    seed: u64,
) -> Result<MixtureManifest, MixtureError> {
    let mut counts = CountTable::new();
    let mut entries: Vec<ManifestEntry> = store
        .samples
        .iter()
        .zip(&store.offsets)
        .filter(|(s, _)| !s.filtered && stage.task_filter.contains(&s.task))
        .map(|(s, off)| {
            *counts.entry(s.issue_id.clone()).or_default().entry(s.task).or_default() += 1;
            ManifestEntry {
                sample_id: s.sample_id.clone(),
                offset: *off,
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(MixtureError::EmptyMixture {
            stage_id: stage.stage_id.clone(),
        });
    }
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(MixtureManifest {
        strategy,
        stage: stage.clone(),
        seed,
        counts,
        checksum: entries_checksum(&entries),
        entries,
    })
}

/// Packs one manifest per distinct stage of `plan`.
pub fn pack_plan(store: &SampleStore, plan: &StagePlan, seed: u64) -> Result<Vec<MixtureManifest>, MixtureError> {
    use rayon::prelude::*;
    plan.stages
        .par_iter()
        .map(|stage| pack_mixture(store, plan.strategy, stage, seed))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryOptions {
    /// Treat an empty manifest as an error instead of a zero-count report.
    pub require_nonempty: bool,
    /// Compare the grand total against [`REFERENCE_TOTAL`].
    pub compare_to_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDelta {
    pub reference_total: usize,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSummary {
    pub strategy: Strategy,
    pub stage_id: String,
    pub per_issue: CountTable,
    pub per_task: BTreeMap<TaskKind, usize>,
    pub grand_total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceDelta>,
}

/// Verifies a manifest's checksum and counts and tabulates it.
pub fn summarize_mixture(manifest: &MixtureManifest, options: SummaryOptions) -> Result<MixtureSummary, MixtureError> {
    let actual = entries_checksum(&manifest.entries);
    if actual != manifest.checksum {
        return Err(MixtureError::ChecksumMismatch {
            expected: manifest.checksum.clone(),
            actual,
        });
    }
    let counted: usize = manifest.counts.values().flat_map(|t| t.values()).sum();
    if counted != manifest.entries.len() {
        return Err(MixtureError::CountMismatch {
            counted,
            entries: manifest.entries.len(),
        });
    }
    if options.require_nonempty && manifest.entries.is_empty() {
        return Err(MixtureError::EmptyMixture {
            stage_id: manifest.stage.stage_id.clone(),
        });
    }
    let mut per_task = BTreeMap::new();
    for (task, n) in manifest.counts.values().flat_map(|t| t.iter()) {
        *per_task.entry(*task).or_default() += n;
    }
    Ok(MixtureSummary {
        strategy: manifest.strategy,
        stage_id: manifest.stage.stage_id.clone(),
        per_issue: manifest.counts.clone(),
        per_task,
        grand_total: counted,
        reference: options.compare_to_reference.then(|| ReferenceDelta {
            reference_total: REFERENCE_TOTAL,
            delta: counted as i64 - REFERENCE_TOTAL as i64,
        }),
    })
}

pub fn write_manifest(manifest: &MixtureManifest, path: &Path) -> Result<(), MixtureError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| MixtureError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_manifest(path: &Path) -> Result<MixtureManifest, MixtureError> {
    let text = std::fs::read_to_string(path).map_err(|e| MixtureError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| MixtureError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

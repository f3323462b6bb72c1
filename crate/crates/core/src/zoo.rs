//! Desk-scale model zoos: one seeded training run per [`DatasetSpec`], the
//! trailing per-epoch checkpoints kept as [`ZooRecord`]s.
//!
//! On disk a zoo is `manifest.json` plus `weights/<record_id>.bin` files in
//! the flat-weights format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{self, Architecture, TrainerConfig};
use crate::codec::{FlatWeights, LayoutManifest};
use crate::data::{self, DataStore, TaskSplits};
use crate::error::{Error, Result};
use crate::nn;

fn raw_pixel() -> String {
    "raw-pixel".into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: String,
    pub class_ids: Vec<usize>,
    pub samples_per_class_train: usize,
    /// Held-out split used for candidate selection during refinement.
    #[serde(default)]
    pub samples_per_class_val: usize,
    pub samples_per_class_eval: usize,
    #[serde(default = "raw_pixel")]
    pub featurizer_id: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooRecord {
    pub record_id: String,
    pub dataset_id: String,
    pub epoch: usize,
    /// Path relative to the zoo directory; absent for invalid records.
    pub weights: Option<String>,
    pub sha256: Option<String>,
    pub metrics: Metrics,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub architecture: Architecture,
    pub layout: LayoutManifest,
    pub trainer: TrainerConfig,
    pub specs: Vec<DatasetSpec>,
    pub records: Vec<ZooRecord>,
}

impl ZooManifest {
    pub fn spec(&self, dataset_id: &str) -> Option<&DatasetSpec> {
        self.specs.iter().find(|s| s.dataset_id == dataset_id)
    }

    pub fn valid_records(&self) -> impl Iterator<Item = &ZooRecord> {
        self.records.iter().filter(|r| r.valid)
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.dataset_id.clone()).collect()
    }
}

/// Featurized splits of one dataset spec.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: DatasetSpec,
    pub splits: TaskSplits,
}

impl Task {
    pub fn load(spec: &DatasetSpec, store: &DataStore) -> Result<Self> {
        let dataset = store.load(&spec.dataset_id)?;
        Ok(Self {
            spec: spec.clone(),
            splits: data::split(&dataset, spec)?,
        })
    }
}

/// Accuracy on the task's eval split. Pure: same inputs, same result.
pub fn evaluate(weights: &FlatWeights, arch: &Architecture, task: &Task) -> Result<f64> {
    arch.accuracy(weights, &task.splits.eval)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Trains one run per spec and stores its last `trainer.keep_last`
/// checkpoints under `out_dir`. A run whose loss goes non-finite keeps the
/// checkpoints taken before that and adds an invalid marker record.
pub fn build_zoo(
    specs: &[DatasetSpec],
    arch: &Architecture,
    trainer: &TrainerConfig,
    store: &DataStore,
    out_dir: &Path,
) -> Result<ZooManifest> {
    if specs.is_empty() {
        return Err(Error::Empty("no dataset specs".into()));
    }
    let weights_dir = out_dir.join("weights");
    fs::create_dir_all(&weights_dir)?;
    let mut records = Vec::new();
    for spec in specs {
        let task = Task::load(spec, store)?;
        if task.splits.train.dim != arch.input_dim() || spec.class_ids.len() != arch.classes() {
            return Err(Error::Config(format!(
                "{}: data has dim {} and {} classes, architecture `{}` expects {} and {}",
                spec.dataset_id,
                task.splits.train.dim,
                spec.class_ids.len(),
                arch.id(),
                arch.input_dim(),
                arch.classes()
            )));
        }
        let init = arch.random_init(nn::derive_seed(trainer.seed, &format!("init/{}", spec.dataset_id)));
        let cfg = TrainerConfig {
            seed: nn::derive_seed(trainer.seed, &format!("train/{}", spec.dataset_id)),
            ..trainer.clone()
        };
        let outcome = classifier::train(arch, &init, &task.splits.train, &cfg, |_, _| Ok(()))?;
        for ckpt in &outcome.checkpoints {
            let record_id = format!("{}-e{:03}", spec.dataset_id, ckpt.epoch);
            let rel = format!("weights/{record_id}.bin");
            let path = out_dir.join(&rel);
            let provenance = serde_json::json!({ "dataset_id": spec.dataset_id, "epoch": ckpt.epoch });
            ckpt.weights.write(&path, Some(&provenance))?;
            let metrics = Metrics {
                train_acc: arch.accuracy(&ckpt.weights, &task.splits.train)?,
                eval_acc: evaluate(&ckpt.weights, arch, &task)?,
            };
            records.push(ZooRecord {
                record_id,
                dataset_id: spec.dataset_id.clone(),
                epoch: ckpt.epoch,
                sha256: Some(sha256_file(&path)?),
                weights: Some(rel),
                metrics,
                valid: true,
            });
        }
        if let Some(epoch) = outcome.diverged_at {
            records.push(ZooRecord {
                record_id: format!("{}-e{epoch:03}-diverged", spec.dataset_id),
                dataset_id: spec.dataset_id.clone(),
                epoch,
                weights: None,
                sha256: None,
                metrics: Metrics::default(),
                valid: false,
            });
        }
    }
    let manifest = ZooManifest {
        architecture: arch.clone(),
        layout: arch.manifest(),
        trainer: trainer.clone(),
        specs: specs.to_vec(),
        records,
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A zoo loaded from disk.
#[derive(Clone, Debug)]
pub struct Zoo {
    pub dir: PathBuf,
    pub manifest: ZooManifest,
}

impl Zoo {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let manifest: ZooManifest = serde_json::from_slice(&fs::read(&path)?)?;
        manifest.layout.validate()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn weights(&self, record: &ZooRecord) -> Result<FlatWeights> {
        let rel = record
            .weights
            .as_ref()
            .ok_or_else(|| Error::Corrupt(format!("record {} has no weights", record.record_id)))?;
        let path = self.dir.join(rel);
        if let Some(expected) = &record.sha256 {
            let actual = sha256_file(&path)?;
            if &actual != expected {
                return Err(Error::Corrupt(format!("{}: hash mismatch", path.display())));
            }
        }
        Ok(FlatWeights::read(&path)?.0)
    }

    /// `(record, weights)` for every valid record, in manifest order.
    pub fn load_valid(&self) -> Result<Vec<(ZooRecord, FlatWeights)>> {
        self.manifest
            .valid_records()
            .map(|r| Ok((r.clone(), self.weights(r)?)))
            .collect()
    }
}

/// Candidates ranked by `score` descending, ties kept in candidate order.
pub fn topk_select(
    candidates: Vec<FlatWeights>,
    k: usize,
    mut score: impl FnMut(&FlatWeights) -> Result<f64>,
) -> Result<Vec<(FlatWeights, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidates to select from".into()));
    }
    if k > candidates.len() {
        return Err(Error::Config(format!("k = {k} exceeds {} candidates", candidates.len())));
    }
    let mut scored = candidates
        .into_iter()
        .map(|c| {
            let s = score(&c)?;
            Ok((c, s))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored)
}

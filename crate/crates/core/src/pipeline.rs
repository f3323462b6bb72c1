//! Experiment driver: zoo → autoencoder → set encoder → diffusion → sampling
//! → refinement → fine-tuning → report, all under one output directory.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! config.json            resolved config (per-stage seeds filled in)
//! status.json            completed stages and the failure, if any
//! data/                  synthetic datasets, when the config defines any
//! zoo/                   zoo manifest and checkpoints
//! vae/                   autoencoder, loss curve, reconstruction report
//! encoder/               set encoder and alignment losses
//! diffusion/             diffusion model and loss curve
//! samples/               sampled weights per conditioning dataset, eval.json
//! refine/                per-dataset spectrum report, log and weights
//! finetune.json/.csv     fine-tuning curves
//! report.json/.md        comparison tables; curves.csv
//! hashes.json            sha256 of every other file
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{self, Architecture, TrainerConfig};
use crate::codec::FlatWeights;
use crate::data::{DataStore, SyntheticImages};
use crate::diffusion::{self, Conditioning, DiffusionConfig, LatentDiffusion, SamplerConfig};
use crate::encoder::{EncoderConfig, SampleSetBatch, SetEncoder};
use crate::error::{Error, Result};
use crate::nn;
use crate::refine::{self, DiffusionGenerator, LayerOrder};
use crate::spectrum::{self, SelectConfig};
use crate::vae::{self, ReconEntry, ReconReport, VaeConfig, WeightVae};
use crate::zoo::{self, DatasetSpec, Task, Zoo};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Zoo,
    Vae,
    Encoder,
    Diffusion,
    Sample,
    Refine,
    Finetune,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Zoo,
        Stage::Vae,
        Stage::Encoder,
        Stage::Diffusion,
        Stage::Sample,
        Stage::Refine,
        Stage::Finetune,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Zoo => "zoo",
            Stage::Vae => "vae",
            Stage::Encoder => "encoder",
            Stage::Diffusion => "diffusion",
            Stage::Sample => "sample",
            Stage::Refine => "refine",
            Stage::Finetune => "finetune",
            Stage::Report => "report",
        }
    }
}

/// A dataset generated into the data store before the zoo is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub id: String,
    #[serde(flatten)]
    pub images: SyntheticImages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZooStage {
    pub architecture: Architecture,
    pub trainer: TrainerConfig,
    pub specs: Vec<DatasetSpec>,
}

impl Default for ZooStage {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            trainer: TrainerConfig::default(),
            specs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleStage {
    /// Samples per conditioning dataset.
    pub n: usize,
    /// Size of the top-k selection.
    pub top_k: usize,
    /// Random initializations evaluated as the baseline row.
    pub random_inits: usize,
}

impl Default for SampleStage {
    fn default() -> Self {
        Self {
            n: 20,
            top_k: 3,
            random_inits: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineStage {
    pub k: usize,
    pub fraction: f64,
    pub order: LayerOrder,
}

impl Default for RefineStage {
    fn default() -> Self {
        Self {
            k: 10,
            fraction: 0.25,
            order: LayerOrder::Snr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneStage {
    pub epochs: usize,
    pub seeds: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneStage {
    fn default() -> Self {
        Self {
            epochs: 5,
            seeds: 5,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root of every stage seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset root; falls back to `<out_dir>/data` when `synthetic` is
    /// non-empty and to `WG_DATA_DIR` otherwise.
    pub data_dir: Option<PathBuf>,
    pub synthetic: Vec<SyntheticSource>,
    pub stages: Vec<Stage>,
    pub zoo: ZooStage,
    pub vae: VaeConfig,
    pub encoder: EncoderConfig,
    pub diffusion: DiffusionConfig,
    /// Condition the diffusion model on set-encoder embeddings.
    pub conditional: bool,
    pub sampler: SamplerConfig,
    pub samples: SampleStage,
    pub refine: RefineStage,
    pub finetune: FinetuneStage,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            out_dir: PathBuf::from("experiment"),
            data_dir: None,
            synthetic: Vec::new(),
            stages: Stage::ALL.to_vec(),
            zoo: ZooStage::default(),
            vae: VaeConfig::default(),
            encoder: EncoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            conditional: true,
            sampler: SamplerConfig::default(),
            samples: SampleStage::default(),
            refine: RefineStage::default(),
            finetune: FinetuneStage::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let cfg: Self = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.zoo.specs.is_empty() {
            return Err(Error::Config("zoo.specs is empty".into()));
        }
        for spec in &self.zoo.specs {
            if spec.class_ids.len() != self.zoo.architecture.classes() {
                return Err(Error::Config(format!(
                    "{} has {} classes, the architecture has {}",
                    spec.dataset_id,
                    spec.class_ids.len(),
                    self.zoo.architecture.classes()
                )));
            }
        }
        let [c, h, w] = self.vae.latent_shape()?;
        if self.diffusion.latent_shape != [c, h, w] {
            return Err(Error::Config(format!(
                "diffusion latent_shape {:?} differs from the autoencoder's {:?}",
                self.diffusion.latent_shape,
                [c, h, w]
            )));
        }
        if self.conditional {
            if self.encoder.d_z != self.vae.d_z {
                return Err(Error::Config("encoder.d_z must equal vae.d_z".into()));
            }
            if self.diffusion.cond_dim != self.encoder.d_z {
                return Err(Error::Config("diffusion.cond_dim must equal encoder.d_z".into()));
            }
        }
        if self.samples.n == 0 {
            return Err(Error::Config("samples.n must be positive".into()));
        }
        Ok(())
    }

    /// Copy with every stage seed derived from the root seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = |name: &str| nn::derive_seed(self.seed, name);
        c.zoo.trainer.seed = s("zoo");
        c.vae.seed = s("vae");
        c.encoder.seed = s("encoder");
        c.diffusion.seed = s("diffusion");
        c.sampler.seed = s("sample");
        c
    }

    pub fn store(&self) -> DataStore {
        match (&self.data_dir, self.synthetic.is_empty()) {
            (Some(dir), _) => DataStore::new(dir),
            (None, false) => DataStore::new(self.out_dir.join("data")),
            (None, true) => DataStore::from_env(),
        }
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(require(path.to_path_buf())?)?)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub completed: Vec<Stage>,
    pub failed: Option<StageFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: String,
}

/// Per-dataset accuracies of the sampling stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    pub pretrained: Vec<f64>,
    pub random_init: Vec<f64>,
    /// Eval accuracy of samples conditioned on this dataset (or all samples
    /// when unconditional).
    pub sampled: Vec<f64>,
    /// Validation accuracy of the same samples; drives top-k selection.
    pub sampled_val: Vec<f64>,
    /// Eval accuracy on this dataset of samples conditioned on another one.
    pub cross: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub conditional: bool,
    pub datasets: BTreeMap<String, DatasetEval>,
}

/// Fine-tuning curves per dataset, per init method, per seed. `None` marks
/// epochs after divergence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResults {
    pub epochs: usize,
    pub curves: BTreeMap<String, BTreeMap<String, Vec<Vec<Option<f64>>>>>,
}

/// Accuracy after `0..=epochs` epochs of fine-tuning on the task's train
/// split, evaluated on its eval split. Entries from a diverged epoch on are
/// NaN.
pub fn finetune_eval(
    weights: &FlatWeights,
    arch: &Architecture,
    task: &Task,
    epochs: usize,
    trainer: &TrainerConfig,
) -> Result<Vec<f64>> {
    let mut curve = vec![zoo::evaluate(weights, arch, task)?];
    if epochs == 0 {
        return Ok(curve);
    }
    let cfg = TrainerConfig {
        epochs,
        keep_last: 0,
        ..trainer.clone()
    };
    let outcome = classifier::train(arch, weights, &task.splits.train, &cfg, |_, w| {
        curve.push(zoo::evaluate(w, arch, task)?);
        Ok(())
    })?;
    if outcome.diverged_at.is_some() {
        curve.resize(epochs + 1, f64::NAN);
    }
    Ok(curve)
}

/// One experiment directory and its resolved config.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(&dir)?;
        Ok(Self { cfg, dir })
    }

    /// Reopens a directory using its stored `config.json`.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = read_json(&dir.join("config.json"))?;
        cfg.out_dir = dir.to_path_buf();
        Ok(Self {
            cfg,
            dir: dir.to_path_buf(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn zoo(&self) -> Result<Zoo> {
        Zoo::load(&self.path("zoo"))
    }

    pub fn vae(&self) -> Result<WeightVae> {
        WeightVae::load(&self.path("vae"))
    }

    pub fn encoder(&self) -> Result<SetEncoder> {
        SetEncoder::load(&self.path("encoder"))
    }

    pub fn diffusion(&self) -> Result<LatentDiffusion> {
        LatentDiffusion::load(&self.path("diffusion"))
    }

    pub fn tasks(&self) -> Result<BTreeMap<String, Task>> {
        let store = self.cfg.store();
        self.cfg
            .zoo
            .specs
            .iter()
            .map(|s| Ok((s.dataset_id.clone(), Task::load(s, &store)?)))
            .collect()
    }

    /// Set-encoder embedding of a fresh sample set from `task`'s train split.
    pub fn dataset_embedding(&self, encoder: &SetEncoder, task: &Task, seed: u64) -> Result<Vec<f32>> {
        let mut rng = nn::rng(seed);
        let batch = SampleSetBatch::draw(&task.splits.train, encoder.config().samples_per_class, &mut rng)?;
        Ok(encoder.encode_set(&batch)?.values)
    }

    fn posterior_means(&self, vae: &WeightVae, weights: &[FlatWeights]) -> Result<Vec<Vec<f32>>> {
        let rows: Vec<&[f32]> = weights.iter().map(|w| w.values()).collect();
        Ok(vae.encode_batch(&rows)?.into_iter().map(|p| p.mean).collect())
    }

    fn status(&self) -> Status {
        read_json(&self.path("status.json")).unwrap_or_default()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        let result = match stage {
            Stage::Zoo => self.stage_zoo(),
            Stage::Vae => self.stage_vae(),
            Stage::Encoder => self.stage_encoder(),
            Stage::Diffusion => self.stage_diffusion(),
            Stage::Sample => self.stage_sample(),
            Stage::Refine => self.stage_refine(),
            Stage::Finetune => self.stage_finetune(),
            Stage::Report => report(&self.dir).map(|_| ()),
        };
        let mut status = self.status();
        status.completed.retain(|s| *s != stage);
        match result {
            Ok(()) => {
                status.completed.push(stage);
                status.failed = None;
                write_json(&self.path("status.json"), &status)?;
                Ok(())
            }
            Err(e) => {
                status.failed = Some(StageFailure {
                    stage,
                    error: e.to_string(),
                });
                write_json(&self.path("status.json"), &status)?;
                Err(Error::Stage {
                    stage: stage.name().into(),
                    source: Box::new(e),
                })
            }
        }
    }

    fn stage_zoo(&self) -> Result<()> {
        let store = self.cfg.store();
        for s in &self.cfg.synthetic {
            store.save(&s.images.generate(&s.id))?;
        }
        let z = &self.cfg.zoo;
        zoo::build_zoo(&z.specs, &z.architecture, &z.trainer, &store, &self.path("zoo"))?;
        Ok(())
    }

    fn stage_vae(&self) -> Result<()> {
        let zoo = self.zoo()?;
        let records = zoo.load_valid()?;
        if records.is_empty() {
            return Err(Error::Empty("zoo has no valid records".into()));
        }
        let data: Vec<Vec<f32>> = records.iter().map(|(_, w)| w.values().to_vec()).collect();
        let mut vae = WeightVae::new(data[0].len(), self.cfg.vae.clone())?;
        let losses = vae.train(&data)?;
        vae.save(&self.path("vae"))?;
        write_json(&self.path("vae/loss.json"), &losses)?;

        let tasks = self.tasks()?;
        let arch = &zoo.manifest.architecture;
        let weights: Vec<FlatWeights> = records.iter().map(|(_, w)| w.clone()).collect();
        let means = self.posterior_means(&vae, &weights)?;
        let refs: Vec<&[f32]> = means.iter().map(|m| m.as_slice()).collect();
        let decoded = vae.decode_batch(&refs)?;
        let mut entries = Vec::with_capacity(records.len());
        for ((rec, w), d) in records.iter().zip(&decoded) {
            let recon = FlatWeights::from_decoded(d, w.manifest().clone())?;
            entries.push(ReconEntry {
                record_id: rec.record_id.clone(),
                dataset_id: rec.dataset_id.clone(),
                original_acc: rec.metrics.eval_acc,
                reconstructed_acc: zoo::evaluate(&recon, arch, &tasks[&rec.dataset_id])?,
                relative_l2: vae::relative_l2(w.active(), recon.active()),
            });
        }
        write_json(&self.path("vae/recon.json"), &ReconReport::from_entries(entries))
    }

    fn stage_encoder(&self) -> Result<()> {
        let zoo = self.zoo()?;
        require(self.path("vae/vae.json"))?;
        let vae = self.vae()?;
        let records = zoo.load_valid()?;
        let weights: Vec<FlatWeights> = records.iter().map(|(_, w)| w.clone()).collect();
        let latents: Vec<(String, Vec<f32>)> = records
            .iter()
            .map(|(r, _)| r.dataset_id.clone())
            .zip(self.posterior_means(&vae, &weights)?)
            .collect();
        let sources = self
            .tasks()?
            .into_iter()
            .map(|(id, t)| (id, t.splits.train))
            .collect();
        let mut encoder = SetEncoder::new(self.cfg.encoder.clone())?;
        let report = encoder.align(&latents, &sources)?;
        encoder.save(&self.path("encoder"))?;
        write_json(&self.path("encoder/align.json"), &report)
    }

    fn stage_diffusion(&self) -> Result<()> {
        let zoo = self.zoo()?;
        require(self.path("vae/vae.json"))?;
        let vae = self.vae()?;
        let records = zoo.load_valid()?;
        let weights: Vec<FlatWeights> = records.iter().map(|(_, w)| w.clone()).collect();
        let latents = self.posterior_means(&vae, &weights)?;
        let mut model = LatentDiffusion::new(self.cfg.diffusion.clone())?;
        let losses = if self.cfg.conditional {
            require(self.path("encoder/encoder.json"))?;
            let encoder = self.encoder()?;
            let tasks = self.tasks()?;
            let embeddings = records
                .iter()
                .enumerate()
                .map(|(i, (r, _))| {
                    let seed = nn::derive_seed(self.cfg.diffusion.seed, &format!("cond/{i}"));
                    self.dataset_embedding(&encoder, &tasks[&r.dataset_id], seed)
                })
                .collect::<Result<Vec<_>>>()?;
            model.train(&latents, &Conditioning::Embeddings(embeddings))?
        } else {
            model.train(&latents, &Conditioning::None)?
        };
        model.save(&self.path("diffusion"))?;
        write_json(&self.path("diffusion/loss.json"), &losses)
    }

    /// Conditioning vector per conditioning dataset; a single `None` entry
    /// keyed `"*"` when unconditional.
    fn conditions(&self, tasks: &BTreeMap<String, Task>) -> Result<Vec<(String, Option<Vec<f32>>)>> {
        if !self.cfg.conditional {
            return Ok(vec![("*".into(), None)]);
        }
        require(self.path("encoder/encoder.json"))?;
        let encoder = self.encoder()?;
        tasks
            .iter()
            .map(|(id, t)| {
                let seed = nn::derive_seed(self.cfg.sampler.seed, &format!("cond/{id}"));
                Ok((id.clone(), Some(self.dataset_embedding(&encoder, t, seed)?)))
            })
            .collect()
    }

    /// Sampled weights per conditioning key, read from `samples/`.
    pub fn samples(&self) -> Result<BTreeMap<String, Vec<FlatWeights>>> {
        let index: BTreeMap<String, usize> = read_json(&self.path("samples/index.json"))?;
        index
            .into_iter()
            .map(|(key, n)| {
                let ws = (0..n)
                    .map(|i| Ok(FlatWeights::read(&self.path(&format!("samples/{key}/{i:03}.bin")))?.0))
                    .collect::<Result<Vec<_>>>()?;
                Ok((key, ws))
            })
            .collect()
    }

    fn stage_sample(&self) -> Result<()> {
        let zoo = self.zoo()?;
        require(self.path("vae/vae.json"))?;
        require(self.path("diffusion/diffusion.json"))?;
        let vae = self.vae()?;
        let model = self.diffusion()?;
        let tasks = self.tasks()?;
        let arch = &zoo.manifest.architecture;
        let manifest = arch.shared_manifest();
        let mut index = BTreeMap::new();
        let mut pools = BTreeMap::new();
        for (key, cond) in self.conditions(&tasks)? {
            let sampler = SamplerConfig {
                seed: nn::derive_seed(self.cfg.sampler.seed, &format!("draw/{key}")),
                ..self.cfg.sampler.clone()
            };
            let ws = diffusion::sample_weights(&vae, &model, cond.as_deref(), self.cfg.samples.n, &sampler, &manifest)?;
            for (i, w) in ws.iter().enumerate() {
                let provenance = serde_json::json!({ "conditioned_on": key, "index": i });
                w.write(&self.path(&format!("samples/{key}/{i:03}.bin")), Some(&provenance))?;
            }
            index.insert(key.clone(), ws.len());
            pools.insert(key, ws);
        }
        write_json(&self.path("samples/index.json"), &index)?;

        let mut eval = SampleEval {
            conditional: self.cfg.conditional,
            datasets: BTreeMap::new(),
        };
        for (id, task) in &tasks {
            let acc = |w: &FlatWeights| zoo::evaluate(w, arch, task);
            let own = if self.cfg.conditional { id.as_str() } else { "*" };
            let mut row = DatasetEval {
                pretrained: zoo
                    .manifest
                    .valid_records()
                    .filter(|r| &r.dataset_id == id)
                    .map(|r| r.metrics.eval_acc)
                    .collect(),
                random_init: (0..self.cfg.samples.random_inits)
                    .map(|i| acc(&arch.random_init(nn::derive_seed(self.cfg.seed, &format!("random/{id}/{i}")))))
                    .collect::<Result<_>>()?,
                sampled: pools[own].iter().map(acc).collect::<Result<_>>()?,
                sampled_val: if task.splits.val.is_empty() {
                    Vec::new()
                } else {
                    pools[own]
                        .iter()
                        .map(|w| arch.accuracy(w, &task.splits.val))
                        .collect::<Result<_>>()?
                },
                cross: BTreeMap::new(),
            };
            for (other, pool) in &pools {
                if other != own {
                    row.cross.insert(other.clone(), pool.iter().map(acc).collect::<Result<_>>()?);
                }
            }
            eval.datasets.insert(id.clone(), row);
        }
        write_json(&self.path("samples/eval.json"), &eval)
    }

    fn stage_refine(&self) -> Result<()> {
        let zoo = self.zoo()?;
        require(self.path("samples/eval.json"))?;
        let eval: SampleEval = read_json(&self.path("samples/eval.json"))?;
        let vae = self.vae()?;
        let model = self.diffusion()?;
        let tasks = self.tasks()?;
        let conds: BTreeMap<String, Option<Vec<f32>>> = self.conditions(&tasks)?.into_iter().collect();
        let samples = self.samples()?;
        let arch = &zoo.manifest.architecture;
        fs::create_dir_all(self.path("refine"))?;
        for (id, task) in &tasks {
            if task.splits.val.is_empty() {
                return Err(Error::Config(format!("{id}: refinement needs a validation split")));
            }
            let key = if self.cfg.conditional { id.as_str() } else { "*" };
            let row = &eval.datasets[id];
            let scores = if row.sampled_val.is_empty() { &row.sampled } else { &row.sampled_val };
            let start = scores
                .iter()
                .enumerate()
                .fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
            let init = &samples[key][start];
            let select = SelectConfig {
                fraction: self.cfg.refine.fraction,
                ..Default::default()
            };
            let report = spectrum::rank_and_select(init, &select)?;
            report.write_json(&self.path(&format!("refine/{id}.spectrum.json")))?;
            let layers = refine::layer_order(&report, init, self.cfg.refine.order);
            let sampler = SamplerConfig {
                seed: nn::derive_seed(self.cfg.seed, &format!("refine/{id}")),
                ..self.cfg.sampler.clone()
            };
            let mut generator = DiffusionGenerator::new(&vae, &model, conds[key].clone(), sampler);
            let mut evaluator = |w: &FlatWeights| arch.accuracy(w, &task.splits.val);
            let state = refine::sequential_refine(init, &layers, &mut generator, &mut evaluator, self.cfg.refine.k)?;
            state.log.write_json(&self.path(&format!("refine/{id}.json")))?;
            let final_eval = zoo::evaluate(&state.weights, arch, task)?;
            state.weights.write(
                &self.path(&format!("refine/{id}.bin")),
                Some(&serde_json::json!({ "dataset_id": id, "eval_acc": final_eval })),
            )?;
        }
        Ok(())
    }

    fn stage_finetune(&self) -> Result<()> {
        let zoo = self.zoo()?;
        require(self.path("samples/index.json"))?;
        let samples = self.samples()?;
        let tasks = self.tasks()?;
        let arch = &zoo.manifest.architecture;
        let ft = &self.cfg.finetune;
        let mut results = FinetuneResults {
            epochs: ft.epochs,
            curves: BTreeMap::new(),
        };
        let mut csv = String::from("dataset,method,seed,epoch,accuracy\n");
        for (id, task) in &tasks {
            let key = if self.cfg.conditional { id.as_str() } else { "*" };
            let pool = &samples[key];
            let pretrained = zoo
                .manifest
                .valid_records()
                .find(|r| &r.dataset_id == id)
                .map(|r| zoo.weights(r))
                .transpose()?;
            let mut methods: BTreeMap<String, Vec<Vec<Option<f64>>>> = BTreeMap::new();
            for s in 0..ft.seeds {
                let trainer = TrainerConfig {
                    epochs: ft.epochs,
                    lr: ft.lr,
                    batch_size: ft.batch_size,
                    keep_last: 0,
                    seed: nn::derive_seed(self.cfg.seed, &format!("finetune/{id}/{s}")),
                };
                let mut inits = vec![
                    ("random".to_string(), arch.random_init(nn::derive_seed(trainer.seed, "init"))),
                    ("sampled".to_string(), pool[s % pool.len()].clone()),
                ];
                if let Some(p) = &pretrained {
                    inits.push(("pretrained".to_string(), p.clone()));
                }
                for (method, w) in inits {
                    let curve = finetune_eval(&w, arch, task, ft.epochs, &trainer)?;
                    for (e, a) in curve.iter().enumerate() {
                        let _ = writeln!(csv, "{id},{method},{s},{e},{a}");
                    }
                    let curve = curve.into_iter().map(|a| a.is_finite().then_some(a)).collect();
                    methods.entry(method).or_default().push(curve);
                }
            }
            results.curves.insert(id.clone(), methods);
        }
        write_json(&self.path("finetune.json"), &results)?;
        fs::write(self.path("finetune.csv"), csv)?;
        Ok(())
    }
}

/// Creates the experiment directory and writes the resolved `config.json`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Experiment> {
    let exp = Experiment::new(cfg)?;
    write_json(&exp.path("config.json"), &exp.cfg)?;
    Ok(exp)
}

/// Runs the configured stages in order and writes `hashes.json`. A failing
/// stage stops the run; its error is recorded in `status.json`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let exp = prepare(cfg)?;
    let mut stages = exp.cfg.stages.clone();
    stages.sort();
    stages.dedup();
    for stage in stages {
        exp.run_stage(stage)?;
    }
    write_hashes(&exp.dir)?;
    Ok(exp.dir)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).is_ok_and(|p| p != Path::new("hashes.json")) {
            out.push(path);
        }
    }
    Ok(())
}

/// sha256 of every file under `dir`, keyed by relative path.
pub fn write_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut hashes = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(dir).expect("collected under dir").to_string_lossy().replace('\\', "/");
        hashes.insert(rel, hex::encode(Sha256::digest(fs::read(&f)?)));
    }
    write_json(&dir.join("hashes.json"), &hashes)?;
    Ok(hashes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return None;
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let std = (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self {
            mean,
            std,
            n: finite.len(),
        })
    }

    fn cell(s: &Option<Self>) -> String {
        match s {
            Some(s) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std),
            None => "n/a".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    /// Split the candidates were ranked on.
    pub selected_by: String,
    /// Eval accuracy of the selected candidates, best first.
    pub eval_accs: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub initial_val: f64,
    pub final_val: f64,
    pub accepted_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub dataset_id: String,
    /// `"ok"` or `"no samples"`.
    pub status: String,
    pub pretrained: Option<Summary>,
    pub random_init: Option<Summary>,
    /// Mean ± std over all samples.
    pub sampled: Option<Summary>,
    pub top_k: Option<TopK>,
    pub cross: BTreeMap<String, Summary>,
    pub refine: Option<RefineSummary>,
}

/// Median fine-tune accuracy of one init method at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub epoch: usize,
    pub accuracy: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub conditional: bool,
    pub datasets: Vec<DatasetRow>,
    pub finetune: Vec<CurveRow>,
    /// Missing inputs, one line each.
    pub gaps: Vec<String>,
}

fn top_k(row: &DatasetEval, k: usize) -> Option<TopK> {
    if row.sampled.is_empty() || k == 0 {
        return None;
    }
    let (scores, selected_by) = if row.sampled_val.len() == row.sampled.len() {
        (&row.sampled_val, "validation")
    } else {
        (&row.sampled, "eval")
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let eval_accs: Vec<f64> = order.iter().take(k).map(|&i| row.sampled[i]).collect();
    Some(TopK {
        k: eval_accs.len(),
        selected_by: selected_by.into(),
        mean: eval_accs.iter().sum::<f64>() / eval_accs.len() as f64,
        eval_accs,
    })
}

/// Reads whatever results `dir` holds and writes `report.json`,
/// `report.md` and, with fine-tune results, `curves.csv`.
pub fn report(dir: &Path) -> Result<Report> {
    let exp = Experiment::open(dir)?;
    let mut gaps = Vec::new();
    let eval: Option<SampleEval> = match read_json(&dir.join("samples/eval.json")) {
        Ok(e) => Some(e),
        Err(Error::MissingArtifact(_)) => {
            gaps.push("samples/eval.json missing: no sampling results".into());
            None
        }
        Err(e) => return Err(e),
    };
    let ids: Vec<String> = exp.cfg.zoo.specs.iter().map(|s| s.dataset_id.clone()).collect();
    let mut datasets = Vec::new();
    for id in &ids {
        let row = eval.as_ref().and_then(|e| e.datasets.get(id));
        let refine = match read_json::<refine::RefineLog>(&dir.join(format!("refine/{id}.json"))) {
            Ok(log) => Some(RefineSummary {
                initial_val: log.initial_accuracy,
                final_val: log.current_accuracy,
                accepted_layers: log.layers.iter().filter(|l| l.accepted).count(),
            }),
            Err(_) => None,
        };
        let (status, sampled) = match row.map(|r| Summary::of(&r.sampled)) {
            Some(Some(s)) => ("ok", Some(s)),
            _ => ("no samples", None),
        };
        datasets.push(DatasetRow {
            dataset_id: id.clone(),
            status: status.into(),
            pretrained: row.and_then(|r| Summary::of(&r.pretrained)),
            random_init: row.and_then(|r| Summary::of(&r.random_init)),
            sampled,
            top_k: row.and_then(|r| top_k(r, exp.cfg.samples.top_k)),
            cross: row
                .map(|r| r.cross.iter().filter_map(|(k, v)| Some((k.clone(), Summary::of(v)?))).collect())
                .unwrap_or_default(),
            refine,
        });
    }

    let mut finetune = Vec::new();
    match read_json::<FinetuneResults>(&dir.join("finetune.json")) {
        Ok(ft) => {
            let mut methods: Vec<String> = ft.curves.values().flat_map(|m| m.keys().cloned()).collect();
            methods.sort();
            methods.dedup();
            for method in &methods {
                for epoch in 0..=ft.epochs {
                    let accuracy = ids
                        .iter()
                        .map(|id| {
                            let mut at: Vec<f64> = ft
                                .curves
                                .get(id)
                                .and_then(|m| m.get(method))
                                .map(|runs| runs.iter().filter_map(|c| c.get(epoch).copied().flatten()).collect())
                                .unwrap_or_default();
                            let v = vae::median(&mut at);
                            (id.clone(), v.is_finite().then_some(v))
                        })
                        .collect();
                    finetune.push(CurveRow {
                        method: method.clone(),
                        epoch,
                        accuracy,
                    });
                }
            }
        }
        Err(_) => gaps.push("finetune.json missing: no fine-tune curves".into()),
    }

    let report = Report {
        experiment: exp.cfg.name.clone(),
        conditional: exp.cfg.conditional,
        datasets,
        finetune,
        gaps,
    };
    write_json(&dir.join("report.json"), &report)?;
    fs::write(dir.join("report.md"), render_markdown(&report))?;
    if !report.finetune.is_empty() {
        let mut csv = String::from("method,epoch,dataset,median_accuracy\n");
        for row in &report.finetune {
            for (id, a) in &row.accuracy {
                let a = a.map_or("nan".to_string(), |v| v.to_string());
                let _ = writeln!(csv, "{},{},{id},{a}", row.method, row.epoch);
            }
        }
        fs::write(dir.join("curves.csv"), csv)?;
    }
    Ok(report)
}

pub fn render_markdown(r: &Report) -> String {
    let mut md = format!("# {}\n\n", r.experiment);
    let _ = writeln!(
        md,
        "Accuracy in percent on each dataset's eval split, mean ± std over candidates. \
         Top-k ranks samples on the split named in its column and reports their eval mean.\n"
    );
    md.push_str("| Dataset | Pretrained | RandomInit | Sampled | Top-k | Refined (val) |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for d in &r.datasets {
        let sampled = if d.status == "ok" { Summary::cell(&d.sampled) } else { d.status.clone() };
        let top = d.top_k.as_ref().map_or("n/a".into(), |t| {
            format!("{:.2} (top-{} by {})", 100.0 * t.mean, t.k, t.selected_by)
        });
        let refined = d.refine.as_ref().map_or("n/a".into(), |f| {
            format!("{:.2} → {:.2}", 100.0 * f.initial_val, 100.0 * f.final_val)
        });
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            d.dataset_id,
            Summary::cell(&d.pretrained),
            Summary::cell(&d.random_init),
            sampled,
            top,
            refined
        );
    }
    if r.datasets.iter().any(|d| !d.cross.is_empty()) {
        md.push_str("\n## Cross-conditioning\n\n| Target | Conditioned on | Accuracy |\n|---|---|---|\n");
        for d in &r.datasets {
            for (other, s) in &d.cross {
                let _ = writeln!(md, "| {} | {other} | {} |", d.dataset_id, Summary::cell(&Some(s.clone())));
            }
        }
    }
    if !r.finetune.is_empty() {
        let ids: Vec<&String> = r.finetune[0].accuracy.keys().collect();
        md.push_str("\n## Fine-tuning (median over seeds)\n\n| Epoch | Method |");
        for id in &ids {
            let _ = write!(md, " {id} |");
        }
        md.push_str("\n|---|---|");
        md.push_str(&"---|".repeat(ids.len()));
        md.push('\n');
        for row in &r.finetune {
            let _ = write!(md, "| {} | {} |", row.epoch, row.method);
            for id in &ids {
                let cell = row.accuracy[*id].map_or("NaN".to_string(), |v| format!("{:.2}", 100.0 * v));
                let _ = write!(md, " {cell} |");
            }
            md.push('\n');
        }
    }
    if !r.gaps.is_empty() {
        md.push_str("\n## Gaps\n\n");
        for g in &r.gaps {
            let _ = writeln!(md, "- {g}");
        }
    }
    md
}

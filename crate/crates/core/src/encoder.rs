//! Dataset conditioning embeddings.
//!
//! Three sources produce a [`DatasetEmbedding`]: a permutation-invariant
//! [`SetEncoder`] over class-grouped sample sets (trained contrastively
//! against frozen weight latents), a [`TextEncoder`] wrapping an external
//! text-embedding hook, and a [`ChunkIndexEmbedding`] table for chunk-index
//! conditioning.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{Tensor, Var, D};
use candle_nn::{ops, LayerNorm, Linear, Module, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, TensorInfo};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SetEncoder,
    TextHook,
    ChunkIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEmbedding {
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

/// Unlabelled samples grouped by class: `sets[c][k]` is the feature vector
/// of sample `k` of class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSetBatch {
    pub sets: Vec<Vec<Vec<f32>>>,
}

impl SampleSetBatch {
    pub fn new(sets: Vec<Vec<Vec<f32>>>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::Empty("sample set batch has no classes".into()));
        }
        if let Some(c) = sets.iter().position(|s| s.is_empty()) {
            return Err(Error::Empty(format!("class set {c} is empty")));
        }
        let dim = sets[0][0].len();
        for s in sets.iter().flatten() {
            if s.len() != dim {
                return Err(Error::Dimension {
                    context: "sample features",
                    expected: dim,
                    got: s.len(),
                });
            }
        }
        Ok(Self { sets })
    }

    /// `n_per_class` random samples of every class of `split`.
    pub fn draw(split: &Split, n_per_class: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(split.class_sets(n_per_class, rng)?)
    }

    pub fn classes(&self) -> usize {
        self.sets.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.sets[0][0].len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    SetTransformer,
    DynamicMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Input feature size; for the dynamic MLP this is the maximum size and
    /// shorter inputs are zero-padded.
    pub feature_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub d_z: usize,
    pub tau: f64,
    pub learn_tau: bool,
    pub steps: usize,
    pub lr: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::SetTransformer,
            feature_dim: 64,
            hidden: 64,
            heads: 4,
            d_z: 1024,
            tau: 0.07,
            learn_tau: false,
            steps: 300,
            lr: 1e-3,
            samples_per_class: 5,
            seed: 0,
        }
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, h: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            q: store.linear(&format!("{name}.q"), h, h, rng)?,
            k: store.linear(&format!("{name}.k"), h, h, rng)?,
            v: store.linear(&format!("{name}.v"), h, h, rng)?,
            o: store.linear(&format!("{name}.o"), h, h, rng)?,
            heads,
        })
    }

    /// `queries: (m, h)`, `keys: (n, h)` → `(m, h)`.
    fn forward(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let (m, h) = queries.dims2()?;
        let n = keys.dim(0)?;
        let dh = h / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((len, self.heads, dh))?.transpose(0, 1)?.contiguous()?)
        };
        let q = split(self.q.forward(queries)?, m)?;
        let k = split(self.k.forward(keys)?, n)?;
        let v = split(self.v.forward(keys)?, n)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = ops::softmax_last_dim(&scores)?;
        let out = attn.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((m, h))?;
        Ok(self.o.forward(&out)?)
    }
}

fn layer_norm(store: &mut ParamStore, name: &str, h: usize) -> Result<LayerNorm> {
    let w = store.constant(format!("{name}.weight"), &[h], 1.0)?;
    let b = store.constant(format!("{name}.bias"), &[h], 0.0)?;
    Ok(LayerNorm::new(w, b, 1e-5))
}

/// Multihead attention block with residual, layer norm and a feed-forward
/// residual; used both as self-attention and as attention pooling.
struct Block {
    attn: Attention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, h: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(store, &format!("{name}.attn"), h, heads, rng)?,
            ln1: layer_norm(store, &format!("{name}.ln1"), h)?,
            ff1: store.linear(&format!("{name}.ff1"), h, h, rng)?,
            ff2: store.linear(&format!("{name}.ff2"), h, h, rng)?,
            ln2: layer_norm(store, &format!("{name}.ln2"), h)?,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(&(queries + self.attn.forward(queries, keys)?)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&h)?.relu()?)?;
        Ok(self.ln2.forward(&(h + ff)?)?)
    }
}

/// Self-attention over a set followed by attention pooling with one learned
/// seed vector.
struct SetStage {
    sab: Block,
    seed: Tensor,
    pma: Block,
}

impl SetStage {
    fn new(store: &mut ParamStore, name: &str, h: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            sab: Block::new(store, &format!("{name}.sab"), h, heads, rng)?,
            seed: store.normal(format!("{name}.seed"), &[1, h], 1.0 / (h as f32).sqrt(), rng)?,
            pma: Block::new(store, &format!("{name}.pma"), h, heads, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.sab.forward(x, x)?;
        self.pma.forward(&self.seed, &h)
    }
}

enum Net {
    SetTransformer {
        input: Linear,
        intra: SetStage,
        inter: SetStage,
        out: Linear,
    },
    DynamicMlp {
        sample: [Linear; 2],
        class: Linear,
        out: Linear,
    },
}

fn lex_cmp(a: &[f32], b: &[f32]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Rows sorted lexicographically, so reductions run in a fixed order no
/// matter how the caller ordered the set.
fn canonical_rows(rows: &[Vec<f32>]) -> Vec<&[f32]> {
    let mut sorted: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
    sorted.sort_by(|a, b| lex_cmp(a, b));
    sorted
}

fn stack(rows: &[&[f32]]) -> Result<Tensor> {
    let dim = rows[0].len();
    nn::tensor(rows.concat(), &[rows.len(), dim])
}

/// Sorts `(n, h)` tensor rows lexicographically.
fn canonical_tensor(t: &Tensor) -> Result<Tensor> {
    let rows = t.to_vec2::<f32>()?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&rows[a], &rows[b]));
    let idx = Tensor::new(order.into_iter().map(|i| i as u32).collect::<Vec<_>>(), t.device())?;
    Ok(t.index_select(&idx, 0)?)
}

/// Permutation-invariant encoder from a [`SampleSetBatch`] to a `d_z`
/// embedding. Outputs are L2-normalized and scaled by `√d_z`.
pub struct SetEncoder {
    cfg: EncoderConfig,
    store: ParamStore,
    net: Net,
    log_inv_tau: Option<Var>,
    latent_center: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct EncoderSidecar {
    config: EncoderConfig,
    tensors: Vec<TensorInfo>,
    tau: f64,
    latent_center: Vec<f32>,
}

/// Loss curve and diagnostics of contrastive alignment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub losses: Vec<f32>,
    pub warnings: Vec<String>,
}

impl SetEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.hidden % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                cfg.hidden, cfg.heads
            )));
        }
        if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        let mut rng = nn::rng(nn::derive_seed(cfg.seed, "encoder/init"));
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let net = match cfg.kind {
            EncoderKind::SetTransformer => Net::SetTransformer {
                input: store.linear("input", cfg.feature_dim, h, &mut rng)?,
                intra: SetStage::new(&mut store, "intra", h, cfg.heads, &mut rng)?,
                inter: SetStage::new(&mut store, "inter", h, cfg.heads, &mut rng)?,
                out: store.linear("out", h, cfg.d_z, &mut rng)?,
            },
            EncoderKind::DynamicMlp => Net::DynamicMlp {
                sample: [
                    store.linear("sample1", cfg.feature_dim, h, &mut rng)?,
                    store.linear("sample2", h, h, &mut rng)?,
                ],
                class: store.linear("class", h, h, &mut rng)?,
                out: store.linear("out", h, cfg.d_z, &mut rng)?,
            },
        };
        let log_inv_tau = if cfg.learn_tau {
            Some(Var::from_tensor(&nn::tensor(vec![(1.0 / cfg.tau).ln() as f32], &[1])?)?)
        } else {
            None
        };
        Ok(Self {
            latent_center: vec![0.0; cfg.d_z],
            cfg,
            store,
            net,
            log_inv_tau,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn tau(&self) -> Result<f64> {
        match &self.log_inv_tau {
            Some(v) => Ok((-nn::scalar(&v.as_tensor().squeeze(0)?)? as f64).exp()),
            None => Ok(self.cfg.tau),
        }
    }

    fn check_features(&self, batch: &SampleSetBatch) -> Result<()> {
        let f = batch.feature_dim();
        let ok = match self.cfg.kind {
            EncoderKind::SetTransformer => f == self.cfg.feature_dim,
            EncoderKind::DynamicMlp => f <= self.cfg.feature_dim,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                context: "set encoder features",
                expected: self.cfg.feature_dim,
                got: f,
            })
        }
    }

    /// Raw (unnormalized) encoder output, shape `(1, d_z)`.
    fn raw(&self, batch: &SampleSetBatch) -> Result<Tensor> {
        self.check_features(batch)?;
        match &self.net {
            Net::SetTransformer { input, intra, inter, out } => {
                let mut classes = Vec::with_capacity(batch.classes());
                for set in &batch.sets {
                    let x = input.forward(&stack(&canonical_rows(set))?)?;
                    classes.push(intra.forward(&x)?);
                }
                let classes = canonical_tensor(&Tensor::cat(&classes, 0)?)?;
                Ok(out.forward(&inter.forward(&classes)?)?)
            }
            Net::DynamicMlp { sample, class, out } => {
                let pad = self.cfg.feature_dim;
                let mut classes = Vec::with_capacity(batch.classes());
                for set in &batch.sets {
                    let rows: Vec<Vec<f32>> = canonical_rows(set)
                        .into_iter()
                        .map(|r| {
                            let mut v = r.to_vec();
                            v.resize(pad, 0.0);
                            v
                        })
                        .collect();
                    let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
                    let h = sample[1].forward(&sample[0].forward(&stack(&refs)?)?.relu()?)?.relu()?;
                    classes.push(h.mean_keepdim(0)?);
                }
                let classes = canonical_tensor(&Tensor::cat(&classes, 0)?)?;
                let pooled = class.forward(&classes)?.relu()?.mean_keepdim(0)?;
                Ok(out.forward(&pooled)?)
            }
        }
    }

    fn unit(t: &Tensor) -> Result<Tensor> {
        let norm = (t.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        Ok(t.broadcast_div(&norm)?)
    }

    pub fn encode_set(&self, batch: &SampleSetBatch) -> Result<DatasetEmbedding> {
        let e = (Self::unit(&self.raw(batch)?)? * (self.cfg.d_z as f64).sqrt())?;
        Ok(DatasetEmbedding {
            values: nn::to_vec(&e)?,
            provenance: Provenance::SetEncoder,
        })
    }

    fn latent_side(&self, latents: &[&[f32]]) -> Result<Tensor> {
        if let Some(bad) = latents.iter().find(|z| z.len() != self.cfg.d_z) {
            return Err(Error::Dimension {
                context: "weight latent",
                expected: self.cfg.d_z,
                got: bad.len(),
            });
        }
        let center = nn::tensor(self.latent_center.clone(), &[1, self.cfg.d_z])?;
        Self::unit(&stack(latents)?.broadcast_sub(&center)?)
    }

    /// Cosine similarity between a dataset embedding and each latent, after
    /// centering latents on the alignment-set mean.
    pub fn similarities(&self, embedding: &DatasetEmbedding, latents: &[&[f32]]) -> Result<Vec<f32>> {
        let z = self.latent_side(latents)?;
        let e = Self::unit(&nn::tensor(embedding.values.clone(), &[1, self.cfg.d_z])?)?;
        nn::to_vec(&z.matmul(&e.t()?)?)
    }

    /// Contrastive alignment against frozen weight latents.
    ///
    /// `latents` holds `(dataset_id, latent)` pairs and `sources` the split
    /// sample sets are drawn from. Every step uses one random record per
    /// dataset, so the batch size equals the number of datasets.
    pub fn align(&mut self, latents: &[(String, Vec<f32>)], sources: &BTreeMap<String, Split>) -> Result<AlignReport> {
        if latents.is_empty() {
            return Err(Error::Empty("alignment latents".into()));
        }
        let mut by_ds: BTreeMap<&str, Vec<&[f32]>> = BTreeMap::new();
        for (id, z) in latents {
            if !sources.contains_key(id) {
                return Err(Error::Config(format!("no sample source for dataset {id}")));
            }
            by_ds.entry(id.as_str()).or_default().push(z.as_slice());
        }
        let all: Vec<&[f32]> = latents.iter().map(|(_, z)| z.as_slice()).collect();
        self.latent_side(&all)?;
        let mut center = vec![0f32; self.cfg.d_z];
        for z in &all {
            for (c, v) in center.iter_mut().zip(*z) {
                *c += v / all.len() as f32;
            }
        }
        self.latent_center = center;

        let mut report = AlignReport::default();
        if by_ds.len() == 1 {
            report.warnings.push(
                "only one dataset: every contrastive batch has size 1 and the loss is identically 0".into(),
            );
        }
        let mut vars = self.store.vars();
        vars.extend(self.log_inv_tau.iter().cloned());
        let mut opt = candle_nn::AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = nn::rng(nn::derive_seed(self.cfg.seed, "encoder/align"));
        for step in 0..self.cfg.steps {
            let mut zs = Vec::with_capacity(by_ds.len());
            let mut es = Vec::with_capacity(by_ds.len());
            for (id, group) in &by_ds {
                zs.push(group[rng.random_range(0..group.len())]);
                let batch = SampleSetBatch::draw(&sources[*id], self.cfg.samples_per_class, &mut rng)?;
                es.push(self.raw(&batch)?);
            }
            let z = self.latent_side(&zs)?;
            let e = Self::unit(&Tensor::cat(&es, 0)?)?;
            let logits = z.matmul(&e.t()?)?;
            let logits = match &self.log_inv_tau {
                Some(v) => logits.broadcast_mul(&v.as_tensor().exp()?)?,
                None => (logits / self.cfg.tau)?,
            };
            let loss = contrastive_from_logits(&logits)?;
            let l = nn::scalar(&loss)?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    stage: "encoder",
                    step,
                    batch: 0,
                });
            }
            opt.backward_step(&loss)?;
            report.losses.push(l);
        }
        Ok(report)
    }

    /// Top-1 dataset→weight retrieval on `held_out` `(dataset_id, latent)`
    /// pairs. For each record of dataset `D` the candidates are that record
    /// plus one held-out record of every other dataset; the query is the
    /// embedding of a fresh sample set of `D`. Chance is `1 / datasets`.
    pub fn retrieval_accuracy(
        &self,
        held_out: &[(String, Vec<f32>)],
        sources: &BTreeMap<String, Split>,
        seed: u64,
    ) -> Result<f64> {
        let mut by_ds: BTreeMap<&str, Vec<&[f32]>> = BTreeMap::new();
        for (id, z) in held_out {
            by_ds.entry(id.as_str()).or_default().push(z.as_slice());
        }
        if by_ds.len() < 2 {
            return Err(Error::Config("retrieval needs held-out records of at least two datasets".into()));
        }
        let mut rng = nn::rng(nn::derive_seed(seed, "encoder/retrieval"));
        let (mut hits, mut total) = (0usize, 0usize);
        for (id, group) in &by_ds {
            let split = sources
                .get(*id)
                .ok_or_else(|| Error::Config(format!("no sample source for dataset {id}")))?;
            for (i, z) in group.iter().enumerate() {
                let mut candidates = vec![*z];
                for (other, g) in &by_ds {
                    if other != id {
                        candidates.push(g[i % g.len()]);
                    }
                }
                let emb = self.encode_set(&SampleSetBatch::draw(split, self.cfg.samples_per_class, &mut rng)?)?;
                let sims = self.similarities(&emb, &candidates)?;
                let best = sims
                    .iter()
                    .enumerate()
                    .fold(0, |b, (j, s)| if *s > sims[b] { j } else { b });
                hits += usize::from(best == 0);
                total += 1;
            }
        }
        Ok(hits as f64 / total as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.store.write_blob(&dir.join("encoder.bin"))?;
        let side = EncoderSidecar {
            config: self.cfg.clone(),
            tensors: self.store.tensor_table(),
            tau: self.tau()?,
            latent_center: self.latent_center.clone(),
        };
        fs::write(dir.join("encoder.json"), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("encoder.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let side: EncoderSidecar = serde_json::from_slice(&fs::read(&path)?)?;
        let mut enc = Self::new(EncoderConfig {
            tau: side.tau,
            ..side.config
        })?;
        enc.store.read_blob(&dir.join("encoder.bin"), &side.tensors)?;
        enc.latent_center = side.latent_center;
        Ok(enc)
    }
}

/// Symmetric contrastive loss: the mean of `−log softmax(logits[i])[i]`
/// over rows and the same over columns, averaged.
pub fn contrastive_from_logits(logits: &Tensor) -> Result<Tensor> {
    let (n, m) = logits.dims2()?;
    if n != m || n == 0 {
        return Err(Error::Dimension {
            context: "contrastive logits",
            expected: n,
            got: m,
        });
    }
    let eye = nn::tensor((0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect(), &[n, n])?;
    let rows = (ops::log_softmax(logits, 1)? * &eye)?.sum_all()?;
    let cols = (ops::log_softmax(logits, 0)? * &eye)?.sum_all()?;
    Ok(((rows + cols)?.neg()? / (2 * n) as f64)?)
}

/// Contrastive loss between paired rows of `weight_latents` and
/// `dataset_embeddings` (both `(N, d)`), with logits `z_i · e_j / τ`.
pub fn contrastive_loss(weight_latents: &Tensor, dataset_embeddings: &Tensor, tau: f64) -> Result<Tensor> {
    contrastive_from_logits(&(weight_latents.matmul(&dataset_embeddings.t()?)? / tau)?)
}

/// External source of text-embedding vectors.
pub trait TextHook: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Returns zeros for every input.
pub struct StubHook {
    pub dim: usize,
}

impl TextHook for StubHook {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _text: &str) -> Result<Vec<f32>> {
        Ok(vec![0.0; self.dim])
    }
}

/// Signed feature hashing of lowercase word unigrams and bigrams,
/// L2-normalized.
pub struct HashingHook {
    pub dim: usize,
}

impl TextHook for HashingHook {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut v = vec![0f32; self.dim];
        let grams = words
            .iter()
            .cloned()
            .chain(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
        for g in grams {
            let d = Sha256::digest(g.as_bytes());
            let h = u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"));
            let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Vectors read from a JSON file `{"dim": d, "vectors": {text: [..]}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrecomputedHook {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f32>>,
}

impl PrecomputedHook {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let hook: Self = serde_json::from_slice(&fs::read(path)?)?;
        if let Some((k, v)) = hook.vectors.iter().find(|(_, v)| v.len() != hook.dim) {
            return Err(Error::Corrupt(format!("vector for {k:?} has length {}", v.len())));
        }
        Ok(hook)
    }
}

impl TextHook for PrecomputedHook {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Unsupported(format!("no precomputed text embedding for {text:?}")))
    }
}

/// Projects hook vectors to `d_z` with a fixed, seeded linear map.
pub struct TextEncoder {
    hook: Option<Box<dyn TextHook>>,
    projection: Linear,
    _store: ParamStore,
}

impl TextEncoder {
    pub fn new(hook: Option<Box<dyn TextHook>>, hook_dim: usize, d_z: usize, seed: u64) -> Result<Self> {
        if let Some(h) = &hook {
            if h.dim() != hook_dim {
                return Err(Error::Dimension {
                    context: "text hook",
                    expected: hook_dim,
                    got: h.dim(),
                });
            }
        }
        let mut store = ParamStore::new();
        let projection = store.linear("text.proj", hook_dim, d_z, &mut nn::rng(nn::derive_seed(seed, "text/proj")))?;
        Ok(Self {
            hook,
            projection,
            _store: store,
        })
    }

    pub fn projection_bias(&self) -> Result<Vec<f32>> {
        nn::to_vec(self.projection.bias().expect("projection has a bias"))
    }

    pub fn encode_text(&self, text: &str) -> Result<DatasetEmbedding> {
        let hook = self
            .hook
            .as_ref()
            .ok_or_else(|| Error::Unsupported("text conditioning requested but no text hook is registered".into()))?;
        let v = hook.embed(text)?;
        let x = nn::tensor(v, &[1, hook.dim()])?;
        Ok(DatasetEmbedding {
            values: nn::to_vec(&self.projection.forward(&x)?)?,
            provenance: Provenance::TextHook,
        })
    }
}

/// One learned `d_z` vector per chunk index, trained jointly with the
/// denoiser.
pub struct ChunkIndexEmbedding {
    table: Var,
    k: usize,
    d_z: usize,
}

impl ChunkIndexEmbedding {
    pub fn new(k: usize, d_z: usize, seed: u64) -> Result<Self> {
        if k == 0 || d_z == 0 {
            return Err(Error::Config("chunk index table needs k > 0 and d_z > 0".into()));
        }
        let mut rng = nn::rng(nn::derive_seed(seed, "chunk-index/init"));
        let values = nn::normal_vec(&mut rng, k * d_z);
        Ok(Self {
            table: Var::from_tensor(&nn::tensor(values, &[k, d_z])?)?,
            k,
            d_z,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self> {
        let k = rows.len();
        let d_z = rows.first().map(Vec::len).unwrap_or(0);
        if k == 0 || d_z == 0 || rows.iter().any(|r| r.len() != d_z) {
            return Err(Error::Config("chunk index rows must be non-empty and equal length".into()));
        }
        Ok(Self {
            table: Var::from_tensor(&nn::tensor(rows.concat(), &[k, d_z])?)?,
            k,
            d_z,
        })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.d_z
    }

    pub fn var(&self) -> &Var {
        &self.table
    }

    /// Rows for `indices`, shape `(indices.len(), d_z)`, differentiable with
    /// respect to the table.
    pub fn rows(&self, indices: &[usize]) -> Result<Tensor> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.k) {
            return Err(Error::OutOfRange { index: i, len: self.k });
        }
        let idx = Tensor::new(indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), &nn::DEVICE)?;
        Ok(self.table.as_tensor().index_select(&idx, 0)?)
    }

    pub fn embed(&self, index: usize) -> Result<DatasetEmbedding> {
        Ok(DatasetEmbedding {
            values: nn::to_vec(&self.rows(&[index])?)?,
            provenance: Provenance::ChunkIndex,
        })
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f32>>> {
        nn::to_rows(self.table.as_tensor())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EmbeddingIndex {
    dim: usize,
    rows: BTreeMap<String, usize>,
    provenance: BTreeMap<String, Provenance>,
}

/// Writes embeddings as a row-major little-endian f32 matrix at `matrix`
/// and a JSON index mapping each dataset id to its row at `index`.
pub fn export_embeddings(entries: &[(String, DatasetEmbedding)], matrix: &Path, index: &Path) -> Result<()> {
    let dim = entries.first().map(|(_, e)| e.values.len()).unwrap_or(0);
    let mut idx = EmbeddingIndex {
        dim,
        rows: BTreeMap::new(),
        provenance: BTreeMap::new(),
    };
    let mut buf = Vec::with_capacity(4 * dim * entries.len());
    for (row, (id, e)) in entries.iter().enumerate() {
        if e.values.len() != dim {
            return Err(Error::Dimension {
                context: "exported embedding",
                expected: dim,
                got: e.values.len(),
            });
        }
        if idx.rows.insert(id.clone(), row).is_some() {
            return Err(Error::Config(format!("duplicate embedding id {id}")));
        }
        idx.provenance.insert(id.clone(), e.provenance);
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(matrix, buf)?;
    fs::write(index, serde_json::to_vec_pretty(&idx)?)?;
    Ok(())
}

pub fn import_embeddings(matrix: &Path, index: &Path) -> Result<BTreeMap<String, DatasetEmbedding>> {
    let idx: EmbeddingIndex = serde_json::from_slice(&fs::read(index)?)?;
    let bytes = fs::read(matrix)?;
    if bytes.len() != 4 * idx.dim * idx.rows.len() {
        return Err(Error::Corrupt(format!("{}: size does not match index", matrix.display())));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    idx.rows
        .iter()
        .map(|(id, &row)| {
            if row >= idx.rows.len() {
                return Err(Error::OutOfRange {
                    index: row,
                    len: idx.rows.len(),
                });
            }
            Ok((
                id.clone(),
                DatasetEmbedding {
                    values: vals[row * idx.dim..(row + 1) * idx.dim].to_vec(),
                    provenance: idx.provenance.get(id).copied().unwrap_or(Provenance::SetEncoder),
                },
            ))
        })
        .collect()
}

//! Greedy layer-by-layer replacement search. Each visited layer gets `K`
//! generated candidates; the best one replaces the current layer only when
//! it strictly beats the current validation accuracy.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::FlatWeights;
use crate::diffusion::{self, LatentDiffusion, SamplerConfig};
use crate::error::{Error, Result};
use crate::nn;
use crate::spectrum::SpectrumReport;
use crate::vae::WeightVae;

/// Produces replacement values for one layer given the current weights.
pub trait CandidateGenerator {
    fn candidates(&mut self, current: &FlatWeights, layer: &str, k: usize) -> Result<Vec<Vec<f32>>>;
}

/// Outcome of visiting one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLog {
    pub layer: String,
    pub k: usize,
    /// `None` where the evaluator failed or returned a non-finite value.
    pub candidate_accs: Vec<Option<f64>>,
    pub best_candidate: Option<usize>,
    pub best_candidate_acc: Option<f64>,
    pub accepted: bool,
    pub accuracy_after: f64,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineLog {
    pub initial_accuracy: f64,
    pub current_accuracy: f64,
    /// Accuracy after each layer step, starting with the initial one.
    pub history: Vec<f64>,
    pub layers: Vec<LayerLog>,
}

impl RefineLog {
    pub fn is_monotone(&self) -> bool {
        self.history.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineState {
    pub weights: FlatWeights,
    pub log: RefineLog,
}

impl RefineState {
    pub fn current_accuracy(&self) -> f64 {
        self.log.current_accuracy
    }
}

/// Index of the largest value; the earliest wins ties.
fn first_argmax(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|b| *v > values[b].expect("best is scored")) {
                best = Some(i);
            }
        }
    }
    best
}

/// Visits `layers` in order. Every candidate is evaluated once; evaluator
/// errors skip the candidate.
pub fn sequential_refine(
    init: &FlatWeights,
    layers: &[String],
    generator: &mut dyn CandidateGenerator,
    evaluator: &mut dyn FnMut(&FlatWeights) -> Result<f64>,
    k: usize,
) -> Result<RefineState> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    for name in layers {
        if init.manifest().layer(name).is_none() {
            return Err(Error::layout(name, "not in manifest"));
        }
    }
    let initial = evaluator(init)?;
    if !initial.is_finite() {
        return Err(Error::NonFinite("initial validation accuracy".into()));
    }
    let mut weights = init.clone();
    let mut current = initial;
    let mut history = vec![initial];
    let mut logs = Vec::with_capacity(layers.len());
    for name in layers {
        let candidates = generator.candidates(&weights, name, k)?;
        let mut failures = Vec::new();
        let mut accs = Vec::with_capacity(candidates.len());
        let mut trials = Vec::with_capacity(candidates.len());
        for (i, values) in candidates.iter().enumerate() {
            let mut trial = weights.clone();
            let score = trial.replace_segment(name, values).and_then(|_| evaluator(&trial));
            match score {
                Ok(a) if a.is_finite() => accs.push(Some(a)),
                Ok(a) => {
                    failures.push(format!("candidate {i}: accuracy {a}"));
                    accs.push(None);
                }
                Err(e) => {
                    failures.push(format!("candidate {i}: {e}"));
                    accs.push(None);
                }
            }
            trials.push(trial);
        }
        let best = first_argmax(&accs);
        let best_acc = best.and_then(|b| accs[b]);
        let accepted = matches!(best_acc, Some(a) if a > current);
        if accepted {
            let b = best.expect("accepted implies a best candidate");
            weights = trials.swap_remove(b);
            current = best_acc.expect("accepted implies a score");
        }
        history.push(current);
        logs.push(LayerLog {
            layer: name.clone(),
            k,
            candidate_accs: accs,
            best_candidate: best,
            best_candidate_acc: best_acc,
            accepted,
            accuracy_after: current,
            failures,
        });
    }
    Ok(RefineState {
        weights,
        log: RefineLog {
            initial_accuracy: initial,
            current_accuracy: current,
            history,
            layers: logs,
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    /// SNR-descending, as ranked in a spectrum report.
    #[default]
    Snr,
    Manifest,
}

/// The report's selected layers in the requested visiting order.
pub fn layer_order(report: &SpectrumReport, weights: &FlatWeights, order: LayerOrder) -> Vec<String> {
    match order {
        LayerOrder::Snr => report.selected.clone(),
        LayerOrder::Manifest => weights
            .manifest()
            .layers
            .iter()
            .filter(|l| report.selected.contains(&l.name))
            .map(|l| l.name.clone())
            .collect(),
    }
}

/// Adds `N(0, (scale · std)²)` to the current layer, `std` being the
/// layer's own entry deviation.
pub struct NoiseGenerator {
    pub scale: f32,
    rng: ChaCha8Rng,
}

impl NoiseGenerator {
    pub fn new(scale: f32, seed: u64) -> Self {
        Self { scale, rng: nn::rng(seed) }
    }
}

impl CandidateGenerator for NoiseGenerator {
    fn candidates(&mut self, current: &FlatWeights, layer: &str, k: usize) -> Result<Vec<Vec<f32>>> {
        let seg = current.segment(layer)?;
        let n = seg.len() as f32;
        let mean = seg.iter().sum::<f32>() / n;
        let std = (seg.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt().max(1e-3);
        Ok((0..k)
            .map(|_| {
                let noise = nn::normal_vec(&mut self.rng, seg.len());
                seg.iter().zip(noise).map(|(v, e)| v + self.scale * std * e).collect()
            })
            .collect())
    }
}

/// Encodes the current weights, draws `K` latents from the posterior and
/// decodes them.
pub struct PosteriorGenerator<'a> {
    vae: &'a WeightVae,
    rng: ChaCha8Rng,
}

impl<'a> PosteriorGenerator<'a> {
    pub fn new(vae: &'a WeightVae, seed: u64) -> Self {
        Self { vae, rng: nn::rng(seed) }
    }
}

fn vae_input<'w>(vae: &WeightVae, weights: &'w FlatWeights) -> Result<&'w [f32]> {
    let dim = vae.input_dim();
    if dim == weights.values().len() {
        Ok(weights.values())
    } else if dim == weights.active().len() {
        Ok(weights.active())
    } else {
        Err(Error::Dimension {
            context: "autoencoder input",
            expected: dim,
            got: weights.values().len(),
        })
    }
}

impl CandidateGenerator for PosteriorGenerator<'_> {
    fn candidates(&mut self, current: &FlatWeights, layer: &str, k: usize) -> Result<Vec<Vec<f32>>> {
        let posterior = self.vae.encode(vae_input(self.vae, current)?)?;
        let shape = self.vae.latent_shape();
        let codes: Vec<Vec<f32>> = (0..k).map(|_| posterior.sample(shape, &mut self.rng).values).collect();
        let refs: Vec<&[f32]> = codes.iter().map(|c| c.as_slice()).collect();
        self.vae
            .decode_batch(&refs)?
            .iter()
            .map(|w| Ok(FlatWeights::from_decoded(w, current.manifest().clone())?.segment(layer)?.to_vec()))
            .collect()
    }
}

/// Draws fresh conditioned samples from the diffusion model for every layer
/// visit, with the sampler seed advanced per visit.
pub struct DiffusionGenerator<'a> {
    vae: &'a WeightVae,
    diffusion: &'a LatentDiffusion,
    cond: Option<Vec<f32>>,
    sampler: SamplerConfig,
    visits: u64,
}

impl<'a> DiffusionGenerator<'a> {
    pub fn new(vae: &'a WeightVae, diffusion: &'a LatentDiffusion, cond: Option<Vec<f32>>, sampler: SamplerConfig) -> Self {
        Self {
            vae,
            diffusion,
            cond,
            sampler,
            visits: 0,
        }
    }
}

impl CandidateGenerator for DiffusionGenerator<'_> {
    fn candidates(&mut self, current: &FlatWeights, layer: &str, k: usize) -> Result<Vec<Vec<f32>>> {
        let sampler = SamplerConfig {
            seed: nn::derive_seed(self.sampler.seed, &format!("refine/{}", self.visits)),
            ..self.sampler.clone()
        };
        self.visits += 1;
        diffusion::sample_weights(self.vae, self.diffusion, self.cond.as_deref(), k, &sampler, current.manifest())?
            .iter()
            .map(|w| Ok(w.segment(layer)?.to_vec()))
            .collect()
    }
}

/// Cycles through a fixed pool of full weight vectors.
pub struct PoolGenerator {
    pool: Vec<FlatWeights>,
    next: usize,
}

impl PoolGenerator {
    pub fn new(pool: Vec<FlatWeights>) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Empty("candidate pool".into()));
        }
        Ok(Self { pool, next: 0 })
    }
}

impl CandidateGenerator for PoolGenerator {
    fn candidates(&mut self, _current: &FlatWeights, layer: &str, k: usize) -> Result<Vec<Vec<f32>>> {
        (0..k)
            .map(|_| {
                let w = &self.pool[self.next % self.pool.len()];
                self.next += 1;
                Ok(w.segment(layer)?.to_vec())
            })
            .collect()
    }
}

/// Any closure works as a generator.
impl<F> CandidateGenerator for F
where
    F: FnMut(&FlatWeights, &str, usize) -> Result<Vec<Vec<f32>>>,
{
    fn candidates(&mut self, current: &FlatWeights, layer: &str, k: usize) -> Result<Vec<Vec<f32>>> {
        self(current, layer, k)
    }
}

//! Variational autoencoder over flat weight vectors (or chunks).
//!
//! Inputs are standardized per dimension by a [`Normalizer`] fitted on the
//! training set, so the reconstruction term is measured in those units.
//! Linear adapter layers map arbitrary input lengths to the hidden width on
//! the way in and back out. The objective is
//! `MSE(x, x̂) + β · KL(q(z|x) ‖ N(0, I))`, and the optional guided variant
//! replaces the reconstruction term with `MSE/σ² + log σ²` and adds
//! `λ · ‖g(x) − g(x̂)‖²` for a frozen [`AccuracyPredictor`] `g`.

use std::fs;
use std::path::Path;

use candle_core::{Tensor, Var};
use candle_nn::{ops, Linear, Module, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, TensorInfo};

const LEAKY_SLOPE: f64 = 0.01;
const LOGVAR_RANGE: (f32, f32) = (-30.0, 20.0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    #[default]
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub d_z: usize,
    pub beta: f64,
    pub recon_loss: ReconLoss,
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub batch_size: usize,
    /// Spatial side of the latent grid; `d_z` must be `channels · side²`.
    pub latent_side: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            d_z: 1024,
            beta: 1e-6,
            recon_loss: ReconLoss::Mse,
            epochs: 200,
            lr: 1e-4,
            hidden: 512,
            batch_size: 32,
            latent_side: 16,
            seed: 0,
        }
    }
}

impl VaeConfig {
    /// `(channels, side, side)` view of the latent.
    pub fn latent_shape(&self) -> Result<[usize; 3]> {
        let plane = self.latent_side * self.latent_side;
        if plane == 0 || self.d_z == 0 || self.d_z % plane != 0 {
            return Err(Error::Config(format!(
                "d_z = {} is not a multiple of latent_side² = {plane}",
                self.d_z
            )));
        }
        Ok([self.d_z / plane, self.latent_side, self.latent_side])
    }

    fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite and non-negative".into()));
        }
        self.latent_shape().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    PosteriorSample,
    PosteriorMean,
    DiffusionSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub values: Vec<f32>,
    pub shape: [usize; 3],
    pub source: LatentSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: Vec<f32>,
    pub log_variance: Vec<f32>,
}

impl Posterior {
    pub fn sample(&self, shape: [usize; 3], rng: &mut impl Rng) -> LatentCode {
        let eps = nn::normal_vec(rng, self.mean.len());
        let values = self
            .mean
            .iter()
            .zip(&self.log_variance)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        LatentCode {
            values,
            shape,
            source: LatentSource::PosteriorSample,
        }
    }

    pub fn mean_code(&self, shape: [usize; 3]) -> LatentCode {
        LatentCode {
            values: self.mean.clone(),
            shape,
            source: LatentSource::PosteriorMean,
        }
    }

    /// KL(q ‖ N(0, I)) in closed form.
    pub fn kl(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_variance)
            .map(|(&m, &lv)| 0.5 * ((m as f64).powi(2) + (lv as f64).exp() - 1.0 - lv as f64))
            .sum()
    }
}

/// Per-dimension affine standardization: `(x - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub scale: f32,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: 1.0,
        }
    }

    /// Per-dimension mean and one global scale (RMS of the centered data).
    pub fn fit(data: &[Vec<f32>]) -> Result<Self> {
        let first = data.first().ok_or_else(|| Error::Empty("normalizer data".into()))?;
        let dim = first.len();
        let n = data.len() as f64;
        let mut mean = vec![0f64; dim];
        for row in data {
            if row.len() != dim {
                return Err(Error::Dimension {
                    context: "normalizer input",
                    expected: dim,
                    got: row.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v as f64 / n;
            }
        }
        let mut ss = 0f64;
        for row in data {
            for (m, v) in mean.iter().zip(row) {
                ss += (*v as f64 - m).powi(2);
            }
        }
        let rms = (ss / (n * dim as f64)).sqrt();
        let scale = if rms > 1e-12 { rms as f32 } else { 1.0 };
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            scale,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mean = nn::tensor(self.mean.clone(), &[1, self.mean.len()])?;
        Ok((x.broadcast_sub(&mean)? / self.scale as f64)?)
    }

    fn invert(&self, x: &Tensor) -> Result<Tensor> {
        let mean = nn::tensor(self.mean.clone(), &[1, self.mean.len()])?;
        Ok((x * self.scale as f64)?.broadcast_add(&mean)?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(4 * (self.mean.len() + 1));
        buf.extend_from_slice(&self.scale.to_le_bytes());
        for v in &self.mean {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    fn read(path: &Path, dim: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() != 4 * (dim + 1) {
            return Err(Error::Corrupt(format!("{}: wrong normalizer size", path.display())));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            scale: vals[0],
            mean: vals[1..].to_vec(),
        })
    }
}

fn rows(data: &[&[f32]]) -> Result<Tensor> {
    let dim = data.first().map(|r| r.len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(data.len() * dim);
    for r in data {
        if r.len() != dim {
            return Err(Error::Dimension {
                context: "batch row",
                expected: dim,
                got: r.len(),
            });
        }
        flat.extend_from_slice(r);
    }
    nn::tensor(flat, &[data.len(), dim])
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f32,
    pub recon: f32,
    pub kl: f32,
}

/// `MSE(x, x̂) + β · mean_batch KL(N(μ, e^{lv}) ‖ N(0, I))`, returned as
/// `(total, recon, kl)` tensors.
pub fn vae_objective(x: &Tensor, recon: &Tensor, mean: &Tensor, logvar: &Tensor, beta: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let mse = (recon - x)?.sqr()?.mean_all()?;
    let kl = kl_term(mean, logvar)?;
    let total = (&mse + (&kl * beta)?)?;
    Ok((total, mse, kl))
}

fn kl_term(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let per = ((mean.sqr()? + logvar.exp()?)? - logvar)?;
    let per = (per - 1.0)?;
    Ok((per.sum(1)? * 0.5)?.mean_all()?)
}

pub struct WeightVae {
    cfg: VaeConfig,
    input_dim: usize,
    normalizer: Normalizer,
    store: ParamStore,
    enc: [Linear; 2],
    enc_mean: Linear,
    enc_logvar: Linear,
    dec: [Linear; 2],
    dec_out: Linear,
}

#[derive(Serialize, Deserialize)]
struct VaeSidecar {
    config: VaeConfig,
    input_dim: usize,
    tensors: Vec<TensorInfo>,
}

impl WeightVae {
    pub fn new(input_dim: usize, cfg: VaeConfig) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let mut rng = nn::rng(nn::derive_seed(cfg.seed, "vae/init"));
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let enc = [
            store.linear("enc.adapter", input_dim, h, &mut rng)?,
            store.linear("enc.hidden", h, h, &mut rng)?,
        ];
        let enc_mean = store.linear("enc.mean", h, cfg.d_z, &mut rng)?;
        let enc_logvar = store.linear("enc.logvar", h, cfg.d_z, &mut rng)?;
        let dec = [
            store.linear("dec.in", cfg.d_z, h, &mut rng)?,
            store.linear("dec.hidden", h, h, &mut rng)?,
        ];
        let dec_out = store.linear("dec.adapter", h, input_dim, &mut rng)?;
        Ok(Self {
            normalizer: Normalizer::identity(input_dim),
            cfg,
            input_dim,
            store,
            enc,
            enc_mean,
            enc_logvar,
            dec,
            dec_out,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.cfg.latent_shape().expect("validated at construction")
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, normalizer: Normalizer) -> Result<()> {
        if normalizer.mean.len() != self.input_dim {
            return Err(Error::Dimension {
                context: "normalizer",
                expected: self.input_dim,
                got: normalizer.mean.len(),
            });
        }
        self.normalizer = normalizer;
        Ok(())
    }

    fn check_rows(&self, data: &[&[f32]]) -> Result<()> {
        if let Some(bad) = data.iter().find(|r| r.len() != self.input_dim) {
            return Err(Error::Dimension {
                context: "vae input",
                expected: self.input_dim,
                got: bad.len(),
            });
        }
        Ok(())
    }

    /// Normalized input → (mean, clamped logvar).
    fn encode_tensor(&self, xn: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = xn.clone();
        for l in &self.enc {
            h = ops::leaky_relu(&l.forward(&h)?, LEAKY_SLOPE)?;
        }
        let mean = self.enc_mean.forward(&h)?;
        let logvar = self.enc_logvar.forward(&h)?.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)?;
        Ok((mean, logvar))
    }

    /// Latent → normalized reconstruction.
    fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.clone();
        for l in &self.dec {
            h = ops::leaky_relu(&l.forward(&h)?, LEAKY_SLOPE)?;
        }
        Ok(self.dec_out.forward(&h)?)
    }

    pub fn encode(&self, x: &[f32]) -> Result<Posterior> {
        Ok(self.encode_batch(&[x])?.remove(0))
    }

    pub fn encode_batch(&self, xs: &[&[f32]]) -> Result<Vec<Posterior>> {
        self.check_rows(xs)?;
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let xn = self.normalizer.apply(&rows(xs)?)?;
        let (mean, logvar) = self.encode_tensor(&xn)?;
        let means = mean.to_vec2::<f32>()?;
        let lvs = logvar.to_vec2::<f32>()?;
        Ok(means
            .into_iter()
            .zip(lvs)
            .map(|(mean, log_variance)| Posterior { mean, log_variance })
            .collect())
    }

    pub fn decode(&self, z: &LatentCode) -> Result<Vec<f32>> {
        Ok(self.decode_batch(&[z.values.as_slice()])?.remove(0))
    }

    pub fn decode_batch(&self, zs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        if let Some(bad) = zs.iter().find(|z| z.len() != self.cfg.d_z) {
            return Err(Error::Dimension {
                context: "latent code",
                expected: self.cfg.d_z,
                got: bad.len(),
            });
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.normalizer.invert(&self.decode_tensor(&rows(zs)?)?)?;
        Ok(out.to_vec2::<f32>()?)
    }

    /// Loss of one batch with reparameterization noise drawn from `rng`.
    pub fn loss(&self, batch: &[&[f32]], rng: &mut impl Rng) -> Result<VaeLoss> {
        if batch.is_empty() {
            return Err(Error::Empty("vae batch".into()));
        }
        self.check_rows(batch)?;
        let (total, recon, kl) = self.forward_loss(batch, rng)?;
        Ok(VaeLoss {
            total: nn::scalar(&total)?,
            recon: nn::scalar(&recon)?,
            kl: nn::scalar(&kl)?,
        })
    }

    fn forward_loss(&self, batch: &[&[f32]], rng: &mut impl Rng) -> Result<(Tensor, Tensor, Tensor)> {
        let xn = self.normalizer.apply(&rows(batch)?)?;
        let (mean, logvar) = self.encode_tensor(&xn)?;
        let eps = nn::tensor(nn::normal_vec(rng, batch.len() * self.cfg.d_z), &[batch.len(), self.cfg.d_z])?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
        let recon = self.decode_tensor(&z)?;
        let (total, mse, kl) = vae_objective(&xn, &recon, &mean, &logvar, self.cfg.beta)?;
        Ok((total, mse, kl))
    }

    /// Fits the normalizer, then trains with Adam. Returns the mean loss of
    /// every epoch.
    pub fn train(&mut self, data: &[Vec<f32>]) -> Result<Vec<f32>> {
        self.fit(data, None)
    }

    /// Predictor-guided training; see [`Guidance`].
    pub fn train_guided(&mut self, data: &[Vec<f32>], guidance: &Guidance<'_>) -> Result<Vec<f32>> {
        self.fit(data, Some(guidance))
    }

    fn fit(&mut self, data: &[Vec<f32>], guidance: Option<&Guidance<'_>>) -> Result<Vec<f32>> {
        if data.is_empty() {
            return Err(Error::Empty("vae training data".into()));
        }
        let refs: Vec<&[f32]> = data.iter().map(|r| r.as_slice()).collect();
        self.check_rows(&refs)?;
        self.normalizer = Normalizer::fit(data)?;

        let log_sigma2 = match guidance.map(|g| g.sigma) {
            Some(SigmaMode::Learned) => Some(Var::from_tensor(&nn::tensor(vec![0.0], &[1])?)?),
            _ => None,
        };
        let mut vars = self.store.vars();
        vars.extend(log_sigma2.iter().cloned());
        let mut opt = candle_nn::AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = nn::rng(nn::derive_seed(self.cfg.seed, "vae/train"));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut curve = Vec::with_capacity(self.cfg.epochs);
        let mut stable = self.store.snapshot()?;
        let mut step = 0;
        for _epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0f32;
            let mut batches = 0;
            for (b, idx) in order.chunks(self.cfg.batch_size.max(1)).enumerate() {
                let batch: Vec<&[f32]> = idx.iter().map(|&i| refs[i]).collect();
                let loss = match guidance {
                    None => self.forward_loss(&batch, &mut rng)?.0,
                    Some(g) => self.guided_loss(&batch, g, log_sigma2.as_ref(), &mut rng)?,
                };
                let l = nn::scalar(&loss)?;
                if !l.is_finite() {
                    self.store.restore(&stable)?;
                    return Err(Error::Diverged {
                        stage: "vae",
                        step,
                        batch: b,
                    });
                }
                opt.backward_step(&loss)?;
                total += l;
                batches += 1;
                step += 1;
            }
            curve.push(total / batches as f32);
            stable = self.store.snapshot()?;
        }
        Ok(curve)
    }

    fn guided_loss(&self, batch: &[&[f32]], g: &Guidance<'_>, log_sigma2: Option<&Var>, rng: &mut impl Rng) -> Result<Tensor> {
        let x = rows(batch)?;
        let xn = self.normalizer.apply(&x)?;
        let (mean, logvar) = self.encode_tensor(&xn)?;
        let eps = nn::tensor(nn::normal_vec(rng, batch.len() * self.cfg.d_z), &[batch.len(), self.cfg.d_z])?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
        let recon_n = self.decode_tensor(&z)?;
        let mse = (&recon_n - &xn)?.sqr()?.mean_all()?;
        let recon_term = match (g.sigma, log_sigma2) {
            (SigmaMode::Learned, Some(ls)) => {
                let ls = ls.as_tensor().squeeze(0)?;
                ((&mse * ls.neg()?.exp()?)? + ls)?
            }
            (SigmaMode::Fixed(s2), _) => ((&mse / s2)? + s2.ln())?,
            (SigmaMode::Learned, None) => unreachable!("learned sigma always allocates a variable"),
        };
        let mut loss = (recon_term + (kl_term(&mean, &logvar)? * self.cfg.beta)?)?;
        if g.weight != 0.0 {
            let recon = self.normalizer.invert(&recon_n)?;
            let target = g.predictor.embedding_tensor(&x)?.detach();
            let pred = g.predictor.embedding_tensor(&recon)?;
            let consistency = (pred - target)?.sqr()?.mean_all()?;
            loss = (loss + (consistency * g.weight)?)?;
        }
        Ok(loss)
    }

    /// Writes `vae.bin` (parameters), `vae.norm.bin` (normalizer) and
    /// `vae.json` (config and tensor table) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.store.write_blob(&dir.join("vae.bin"))?;
        self.normalizer.write(&dir.join("vae.norm.bin"))?;
        let side = VaeSidecar {
            config: self.cfg.clone(),
            input_dim: self.input_dim,
            tensors: self.store.tensor_table(),
        };
        fs::write(dir.join("vae.json"), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side_path = dir.join("vae.json");
        if !side_path.exists() {
            return Err(Error::MissingArtifact(side_path));
        }
        let side: VaeSidecar = serde_json::from_slice(&fs::read(&side_path)?)?;
        let mut vae = Self::new(side.input_dim, side.config)?;
        vae.store.read_blob(&dir.join("vae.bin"), &side.tensors)?;
        vae.normalizer = Normalizer::read(&dir.join("vae.norm.bin"), side.input_dim)?;
        Ok(vae)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `log σ²` is a trainable scalar initialized at 0.
    Learned,
    /// Fixed σ².
    Fixed(f64),
}

/// Extra terms for predictor-guided training.
pub struct Guidance<'a> {
    pub predictor: &'a AccuracyPredictor,
    pub weight: f64,
    pub sigma: SigmaMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub embedding: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embedding: 32,
            epochs: 300,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub train_mae: f64,
    pub val_mae: f64,
}

/// Maps weights to a predicted accuracy through a small MLP; its
/// penultimate activations are the embedding used for guidance.
pub struct AccuracyPredictor {
    normalizer: Normalizer,
    store: ParamStore,
    layers: [Linear; 2],
    head: Linear,
}

pub const MIN_PREDICTOR_RECORDS: usize = 10;

impl AccuracyPredictor {
    pub fn embedding_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.normalizer.apply(x)?;
        for l in &self.layers {
            h = ops::leaky_relu(&l.forward(&h)?, LEAKY_SLOPE)?;
        }
        Ok(h)
    }

    fn predict_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::sigmoid(&self.head.forward(&self.embedding_tensor(x)?)?)?.squeeze(1)?)
    }

    pub fn predict(&self, weights: &[&[f32]]) -> Result<Vec<f32>> {
        if weights.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.predict_tensor(&rows(weights)?)?.to_vec1::<f32>()?)
    }

    pub fn embedding(&self, weights: &[f32]) -> Result<Vec<f32>> {
        nn::to_vec(&self.embedding_tensor(&rows(&[weights])?)?)
    }
}

/// Trains `g` on `(weights, accuracy)` pairs. Every fifth record is held
/// out for the validation MAE.
pub fn train_predictor(weights: &[Vec<f32>], accuracies: &[f64], cfg: &PredictorConfig) -> Result<(AccuracyPredictor, PredictorReport)> {
    if weights.len() < MIN_PREDICTOR_RECORDS {
        return Err(Error::Config(format!(
            "predictor needs at least {MIN_PREDICTOR_RECORDS} labelled records, got {}",
            weights.len()
        )));
    }
    if weights.len() != accuracies.len() {
        return Err(Error::Dimension {
            context: "predictor labels",
            expected: weights.len(),
            got: accuracies.len(),
        });
    }
    let dim = weights[0].len();
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = (0..weights.len()).partition(|i| i % 5 != 4);
    let train_rows: Vec<Vec<f32>> = train_idx.iter().map(|&i| weights[i].clone()).collect();
    let mut rng = nn::rng(nn::derive_seed(cfg.seed, "predictor/init"));
    let mut store = ParamStore::new();
    let layers = [
        store.linear("pred.l1", dim, cfg.hidden, &mut rng)?,
        store.linear("pred.l2", cfg.hidden, cfg.embedding, &mut rng)?,
    ];
    let head = store.linear("pred.head", cfg.embedding, 1, &mut rng)?;
    let g = AccuracyPredictor {
        normalizer: Normalizer::fit(&train_rows)?,
        layers,
        head,
        store,
    };
    let as_refs = |idx: &[usize]| -> Vec<&[f32]> { idx.iter().map(|&i| weights[i].as_slice()).collect() };
    let x = rows(&as_refs(&train_idx))?;
    let y = nn::tensor(train_idx.iter().map(|&i| accuracies[i] as f32).collect(), &[train_idx.len()])?;
    let mut opt = candle_nn::AdamW::new(
        g.store.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    for _ in 0..cfg.epochs {
        let loss = (g.predict_tensor(&x)? - &y)?.sqr()?.mean_all()?;
        opt.backward_step(&loss)?;
    }
    let mae = |idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        let p = g.predict(&as_refs(idx))?;
        Ok(idx.iter().zip(p).map(|(&i, p)| (p as f64 - accuracies[i]).abs()).sum::<f64>() / idx.len() as f64)
    };
    let report = PredictorReport {
        train_mae: mae(&train_idx)?,
        val_mae: mae(&val_idx)?,
    };
    Ok((g, report))
}

/// Reconstruction fidelity of one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconEntry {
    pub record_id: String,
    pub dataset_id: String,
    pub original_acc: f64,
    pub reconstructed_acc: f64,
    pub relative_l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub entries: Vec<ReconEntry>,
    /// `(dataset_id, median accuracy drop in percentage points)`.
    pub median_drop_points: Vec<(String, f64)>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl ReconReport {
    pub fn from_entries(entries: Vec<ReconEntry>) -> Self {
        let mut ids: Vec<String> = entries.iter().map(|e| e.dataset_id.clone()).collect();
        ids.dedup();
        ids.sort();
        ids.dedup();
        let median_drop_points = ids
            .into_iter()
            .map(|id| {
                let mut drops: Vec<f64> = entries
                    .iter()
                    .filter(|e| e.dataset_id == id)
                    .map(|e| 100.0 * (e.original_acc - e.reconstructed_acc))
                    .collect();
                (id, median(&mut drops))
            })
            .collect();
        Self {
            entries,
            median_drop_points,
        }
    }

    pub fn overall_median_drop(&self) -> f64 {
        let mut drops: Vec<f64> = self
            .entries
            .iter()
            .map(|e| 100.0 * (e.original_acc - e.reconstructed_acc))
            .collect();
        median(&mut drops)
    }
}

pub fn relative_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum();
    (num / den.max(1e-30)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> VaeConfig {
        VaeConfig {
            d_z: 16,
            latent_side: 2,
            hidden: 32,
            epochs: 150,
            lr: 1e-3,
            batch_size: 8,
            ..Default::default()
        }
    }

    fn toy_data(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = nn::rng(seed);
        let centers = [nn::normal_vec(&mut rng, dim), nn::normal_vec(&mut rng, dim)];
        (0..n)
            .map(|i| {
                let noise = nn::normal_vec(&mut rng, dim);
                centers[i % 2].iter().zip(noise).map(|(c, e)| c + 0.05 * e).collect()
            })
            .collect()
    }

    fn t(v: Vec<f32>, shape: &[usize]) -> Tensor {
        nn::tensor(v, shape).unwrap()
    }

    #[test]
    fn objective_vanishes_for_perfect_recon_and_standard_posterior() {
        let x = t(vec![0.3, -1.0, 2.0, 0.5], &[2, 2]);
        let zeros = t(vec![0.0; 6], &[2, 3]);
        let (total, recon, kl) = vae_objective(&x, &x, &zeros, &zeros, 1.0).unwrap();
        assert_eq!(nn::scalar(&total).unwrap(), 0.0);
        assert_eq!(nn::scalar(&recon).unwrap(), 0.0);
        assert_eq!(nn::scalar(&kl).unwrap(), 0.0);
    }

    #[test]
    fn beta_zero_is_pure_mse() {
        let x = t(vec![1.0, 2.0], &[1, 2]);
        let r = t(vec![0.0, 0.0], &[1, 2]);
        let m = t(vec![3.0], &[1, 1]);
        let lv = t(vec![1.0], &[1, 1]);
        let (total, recon, kl) = vae_objective(&x, &r, &m, &lv, 0.0).unwrap();
        assert_eq!(nn::scalar(&total).unwrap(), 2.5);
        assert_eq!(nn::scalar(&recon).unwrap(), 2.5);
        assert!(nn::scalar(&kl).unwrap() > 0.0);
    }

    #[test]
    fn kl_is_zero_only_at_standard_normal() {
        let p = Posterior {
            mean: vec![0.0; 4],
            log_variance: vec![0.0; 4],
        };
        assert_eq!(p.kl(), 0.0);
        for (m, lv) in [(0.1, 0.0), (0.0, 0.2), (0.0, -0.3), (-1.0, 1.0)] {
            let q = Posterior {
                mean: vec![m],
                log_variance: vec![lv],
            };
            assert!(q.kl() > 0.0);
        }
        let kl_t = kl_term(&t(vec![0.5, -0.5], &[1, 2]), &t(vec![0.2, -0.1], &[1, 2])).unwrap();
        let analytic = Posterior {
            mean: vec![0.5, -0.5],
            log_variance: vec![0.2, -0.1],
        }
        .kl();
        assert!((nn::scalar(&kl_t).unwrap() as f64 - analytic).abs() < 1e-6);
    }

    #[test]
    fn encode_is_deterministic_and_finite_untrained() {
        let vae = WeightVae::new(10, small_cfg()).unwrap();
        let x: Vec<f32> = (0..10).map(|i| i as f32 * 0.1).collect();
        let a = vae.encode(&x).unwrap();
        let b = vae.encode(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.mean.iter().chain(&a.log_variance).all(|v| v.is_finite()));
    }

    #[test]
    fn dimension_mismatches_are_errors() {
        let vae = WeightVae::new(10, small_cfg()).unwrap();
        assert!(matches!(vae.encode(&[0.0; 3]), Err(Error::Dimension { .. })));
        let z = LatentCode {
            values: vec![0.0; 5],
            shape: [1, 1, 5],
            source: LatentSource::PosteriorMean,
        };
        assert!(matches!(vae.decode(&z), Err(Error::Dimension { .. })));
        assert!(WeightVae::new(10, VaeConfig { d_z: 15, latent_side: 2, ..small_cfg() }).is_err());
        assert!(WeightVae::new(10, VaeConfig { beta: -1.0, ..small_cfg() }).is_err());
    }

    #[test]
    fn latent_shape_default() {
        assert_eq!(VaeConfig::default().latent_shape().unwrap(), [4, 16, 16]);
    }

    #[test]
    fn training_reconstructs_and_is_seeded() {
        let data = toy_data(16, 24, 1);
        let mut a = WeightVae::new(24, small_cfg()).unwrap();
        let mut b = WeightVae::new(24, small_cfg()).unwrap();
        let ca = a.train(&data).unwrap();
        let cb = b.train(&data).unwrap();
        assert_eq!(ca, cb);
        assert!(ca.last().unwrap() < &(ca[0] * 0.2));
        let shape = a.latent_shape();
        for x in &data {
            let rec = a.decode(&a.encode(x).unwrap().mean_code(shape)).unwrap();
            assert!(relative_l2(x, &rec) < 0.1, "relative error {}", relative_l2(x, &rec));
        }
    }

    #[test]
    fn posterior_samples_decode_differently() {
        let data = toy_data(8, 12, 2);
        let mut vae = WeightVae::new(12, VaeConfig { epochs: 5, ..small_cfg() }).unwrap();
        vae.train(&data).unwrap();
        let post = vae.encode(&data[0]).unwrap();
        let mut rng = nn::rng(0);
        let a = vae.decode(&post.sample(vae.latent_shape(), &mut rng)).unwrap();
        let b = vae.decode(&post.sample(vae.latent_shape(), &mut rng)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn large_beta_shrinks_kl() {
        let data = toy_data(16, 24, 3);
        let kl_after = |beta: f64| {
            let mut vae = WeightVae::new(24, VaeConfig { beta, ..small_cfg() }).unwrap();
            vae.train(&data).unwrap();
            let refs: Vec<&[f32]> = data.iter().map(|r| r.as_slice()).collect();
            vae.encode_batch(&refs).unwrap().iter().map(|p| p.kl()).sum::<f64>()
        };
        assert!(kl_after(10.0) < kl_after(1e-6));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(8, 12, 4);
        let mut vae = WeightVae::new(12, VaeConfig { epochs: 3, ..small_cfg() }).unwrap();
        vae.train(&data).unwrap();
        vae.save(dir.path()).unwrap();
        let back = WeightVae::load(dir.path()).unwrap();
        assert_eq!(back.encode(&data[1]).unwrap(), vae.encode(&data[1]).unwrap());
    }

    fn labelled(n: usize) -> (Vec<Vec<f32>>, Vec<f64>) {
        let mut rng = nn::rng(9);
        let data: Vec<Vec<f32>> = (0..n).map(|_| nn::normal_vec(&mut rng, 6)).collect();
        let acc = data.iter().map(|r| 0.5 + 0.1 * (r[0] as f64).tanh()).collect();
        (data, acc)
    }

    #[test]
    fn predictor_needs_ten_records() {
        let (data, acc) = labelled(9);
        assert!(matches!(train_predictor(&data, &acc, &PredictorConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn predictor_fits_and_is_deterministic() {
        let (data, acc) = labelled(40);
        let cfg = PredictorConfig {
            epochs: 400,
            ..Default::default()
        };
        let (g, report) = train_predictor(&data, &acc, &cfg).unwrap();
        let refs: Vec<&[f32]> = data.iter().map(|r| r.as_slice()).collect();
        let p = g.predict(&refs).unwrap();
        assert_eq!(p, g.predict(&refs).unwrap());
        assert!(report.train_mae < 0.05, "{report:?}");
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_guidance_with_unit_sigma_matches_plain_training() {
        let data = toy_data(12, 10, 5);
        let acc: Vec<f64> = (0..12).map(|i| 0.4 + 0.02 * i as f64).collect();
        let cfg = VaeConfig { epochs: 20, ..small_cfg() };
        let (g, _) = train_predictor(&data, &acc, &PredictorConfig { epochs: 5, ..Default::default() }).unwrap();
        let mut plain = WeightVae::new(10, cfg.clone()).unwrap();
        let mut guided = WeightVae::new(10, cfg).unwrap();
        let a = plain.train(&data).unwrap();
        let b = guided
            .train_guided(
                &data,
                &Guidance {
                    predictor: &g,
                    weight: 0.0,
                    sigma: SigmaMode::Fixed(1.0),
                },
            )
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn learned_sigma_guided_training_runs() {
        let data = toy_data(12, 10, 6);
        let acc: Vec<f64> = (0..12).map(|i| 0.5 + 0.01 * i as f64).collect();
        let (g, _) = train_predictor(&data, &acc, &PredictorConfig { epochs: 20, ..Default::default() }).unwrap();
        let mut vae = WeightVae::new(10, VaeConfig { epochs: 60, ..small_cfg() }).unwrap();
        let curve = vae
            .train_guided(
                &data,
                &Guidance {
                    predictor: &g,
                    weight: 1.0,
                    sigma: SigmaMode::Learned,
                },
            )
            .unwrap();
        assert!(curve.iter().all(|v| v.is_finite()));
        assert!(curve.last().unwrap() < &curve[0]);
    }

    #[test]
    fn divergence_rolls_back() {
        let mut data = toy_data(4, 6, 7);
        data[2][0] = f32::NAN;
        let mut vae = WeightVae::new(6, VaeConfig { epochs: 2, ..small_cfg() }).unwrap();
        let before = vae.store.snapshot().unwrap();
        assert!(matches!(vae.train(&data), Err(Error::Diverged { stage: "vae", .. })));
        for (a, b) in before.iter().zip(vae.store.snapshot().unwrap()) {
            assert_eq!(nn::to_vec(a).unwrap(), nn::to_vec(&b).unwrap());
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

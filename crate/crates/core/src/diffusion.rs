//! Denoising diffusion over weight latents.
//!
//! The forward process is `q(z_t | z_{t-1}) = N(√(1-β_t) z_{t-1}, β_t I)`
//! with closed form `z_t = √ᾱ_t z_0 + √(1-ᾱ_t) ε`. A [`NoisePredictor`]
//! `ε_ψ(z_t, c, t)` is trained with `‖ε − ε_ψ‖²` and sampled with the
//! ancestral update
//! `z_{t-1} = (z_t − β_t/√(1-ᾱ_t) · ε_ψ) / √α_t + σ_t ξ`.
//! Conditioning embeddings are reshaped to the latent's spatial grid and
//! concatenated channel-wise to `z_t`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use candle_core::Tensor;
use candle_nn::{ops, Conv2d, Conv2dConfig, GroupNorm, Linear, Module, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ChunkSet, FlatWeights, LayoutManifest};
use crate::encoder::ChunkIndexEmbedding;
use crate::error::{Error, Result};
use crate::nn::{self, Ema, ParamStore, TensorInfo};
use crate::vae::{LatentCode, LatentSource, WeightVae};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Any betas in `[0, 1)`; zero betas give the degenerate no-noise step.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::OutOfRange { index: t, len: self.len() });
        }
        Ok(())
    }

    /// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)` with `ᾱ_{−1} = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let prev = if t == 0 { 1.0 } else { self.alpha_bars[t - 1] };
        let denom = 1.0 - self.alpha_bars[t];
        if denom <= 0.0 {
            0.0
        } else {
            self.betas[t] * (1.0 - prev) / denom
        }
    }

    /// Schedule over `steps` evenly spaced original timesteps with betas
    /// recomputed so the subsequence keeps the same `ᾱ`. Returns the
    /// schedule and the original timestep of every new step.
    pub fn respaced(&self, steps: usize) -> Result<(Self, Vec<usize>)> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::Config(format!("sampler steps must be in 1..={t}, got {steps}")));
        }
        if steps == t {
            return Ok((self.clone(), (0..t).collect()));
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    t - 1
                } else {
                    ((i as f64) * (t - 1) as f64 / (steps - 1) as f64).round() as usize
                }
            })
            .collect();
        ts.dedup();
        let mut prev = 1.0;
        let betas = ts
            .iter()
            .map(|&s| {
                let b = 1.0 - self.alpha_bars[s] / prev;
                prev = self.alpha_bars[s];
                b
            })
            .collect();
        Ok((Self::from_betas(betas)?, ts))
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end`.
pub fn make_schedule(t: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::Config("T must be positive".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear => (0..t)
            .map(|i| {
                if t == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

/// `z_t = √ᾱ_t z0 + √(1−ᾱ_t) noise`.
pub fn q_sample(z0: &[f32], t: usize, noise: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    schedule.check_t(t)?;
    if z0.len() != noise.len() {
        return Err(Error::Dimension {
            context: "q_sample noise",
            expected: z0.len(),
            got: noise.len(),
        });
    }
    let ab = schedule.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0
        .iter()
        .zip(noise)
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect())
}

/// Per-row coefficient tensor of shape `(B, 1, 1, 1)`.
fn coef(values: Vec<f32>) -> Result<Tensor> {
    let n = values.len();
    nn::tensor(values, &[n, 1, 1, 1])
}

fn q_sample_tensor(z0: &Tensor, t: &[usize], noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    for &s in t {
        schedule.check_t(s)?;
    }
    let a = coef(t.iter().map(|&s| schedule.alpha_bars[s].sqrt() as f32).collect())?;
    let b = coef(t.iter().map(|&s| (1.0 - schedule.alpha_bars[s]).sqrt() as f32).collect())?;
    Ok((z0.broadcast_mul(&a)? + noise.broadcast_mul(&b)?)?)
}

/// `ε_ψ(z_t, c, t)`: `z_t` is `(B, C, H, W)`, `cond` is `(B, C_c, H, W)`
/// (possibly `C_c = 0`), and the output has the shape of `z_t`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor>;
}

/// `Σ_dims ‖ε − ε_ψ(z_t, c, t)‖²` averaged over the batch, for explicit
/// timesteps and noise.
pub fn ldm_loss_with(
    model: &dyn NoisePredictor,
    z0: &Tensor,
    cond: &Tensor,
    t: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let z_t = q_sample_tensor(z0, t, noise, schedule)?;
    let pred = model.predict(&z_t, t, cond)?;
    if pred.dims() != noise.dims() {
        return Err(Error::Dimension {
            context: "predicted noise",
            expected: noise.elem_count(),
            got: pred.elem_count(),
        });
    }
    let per = (pred - noise)?.sqr()?.flatten_from(1)?.sum(1)?;
    Ok(per.mean_all()?)
}

/// Per-timestep weight `min(SNR_t, γ) / SNR_t` with `SNR_t = ᾱ_t / (1 − ᾱ_t)`.
pub fn min_snr_weight(schedule: &NoiseSchedule, t: usize, gamma: f64) -> f64 {
    let ab = schedule.alpha_bars[t];
    let snr = ab / (1.0 - ab);
    if snr <= gamma {
        1.0
    } else {
        gamma / snr
    }
}

fn weighted_loss(
    model: &dyn NoisePredictor,
    z0: &Tensor,
    cond: &Tensor,
    t: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
    gamma: f64,
) -> Result<Tensor> {
    let z_t = q_sample_tensor(z0, t, noise, schedule)?;
    let pred = model.predict(&z_t, t, cond)?;
    let per = (pred - noise)?.sqr()?.flatten_from(1)?.sum(1)?;
    let w = nn::tensor(t.iter().map(|&s| min_snr_weight(schedule, s, gamma) as f32).collect(), &[t.len()])?;
    Ok((per * w)?.mean_all()?)
}

/// [`ldm_loss_with`] with `t ~ U{0..T−1}` and `ε ~ N(0, I)` drawn from `rng`.
pub fn ldm_loss(
    model: &dyn NoisePredictor,
    z0: &Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let b = z0.dim(0)?;
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..schedule.len())).collect();
    let noise = nn::tensor(nn::normal_vec(rng, z0.elem_count()), z0.dims())?;
    ldm_loss_with(model, z0, cond, &t, &noise, schedule)
}

/// Sinusoidal timestep features, `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &s in t {
        let mut row = vec![0f32; dim];
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let arg = s as f64 * freq;
            row[k] = arg.sin() as f32;
            row[half + k] = arg.cos() as f32;
        }
        v.extend(row);
    }
    nn::tensor(v, &[t.len(), dim])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    #[default]
    Unet,
    Mlp,
}

/// What the network output represents. Either way the model exposes `ε̂`
/// and is trained on the same noise objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The output is `ε̂` directly.
    Epsilon,
    /// The output is `ẑ_0` and `ε̂ = (z_t − √ᾱ_t ẑ_0) / √(1 − ᾱ_t)`.
    #[default]
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub prediction: Prediction,
    /// Base channel width of the U-Net.
    pub channels: usize,
    pub groups: usize,
    /// Width of the MLP denoiser.
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::Unet,
            prediction: Prediction::Sample,
            channels: 32,
            groups: 8,
            hidden: 512,
            blocks: 2,
            time_dim: 64,
        }
    }
}

fn group_norm(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
    let w = store.constant(format!("{name}.weight"), &[channels], 1.0)?;
    let b = store.constant(format!("{name}.bias"), &[channels], 0.0)?;
    let g = (1..=groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
    Ok(GroupNorm::new(w, b, channels, g, 1e-5)?)
}

fn conv3(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    store.conv2d(name, c_in, c_out, 3, cfg, rng)
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, t_dim: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        let skip = if c_in != c_out {
            Some(store.conv2d(&format!("{name}.skip"), c_in, c_out, 1, Conv2dConfig::default(), rng)?)
        } else {
            None
        };
        Ok(Self {
            gn1: group_norm(store, &format!("{name}.gn1"), c_in, groups)?,
            conv1: conv3(store, &format!("{name}.conv1"), c_in, c_out, 1, rng)?,
            time: store.linear(&format!("{name}.time"), t_dim, c_out, rng)?,
            gn2: group_norm(store, &format!("{name}.gn2"), c_out, groups)?,
            conv2: conv3(store, &format!("{name}.conv2"), c_out, c_out, 1, rng)?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&ops::silu(&self.gn1.forward(x)?)?)?;
        let t = self.time.forward(&ops::silu(temb)?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&ops::silu(&self.gn2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// One-level convolutional U-Net with timestep embedding.
struct Unet {
    time_dim: usize,
    t1: Linear,
    t2: Linear,
    conv_in: Conv2d,
    res1: ResBlock,
    down: Conv2d,
    res2: ResBlock,
    mid: ResBlock,
    up: Conv2d,
    res3: ResBlock,
    gn_out: GroupNorm,
    conv_out: Conv2d,
}

impl Unet {
    fn new(store: &mut ParamStore, cfg: &DenoiserConfig, c: usize, cc: usize, rng: &mut impl Rng) -> Result<Self> {
        let ch = cfg.channels;
        let td = 4 * ch;
        let g = cfg.groups;
        let conv_out = {
            let w = store.constant("out.conv.weight", &[c, ch, 3, 3], 0.0)?;
            let b = store.constant("out.conv.bias", &[c], 0.0)?;
            Conv2d::new(
                w,
                Some(b),
                Conv2dConfig {
                    padding: 1,
                    ..Default::default()
                },
            )
        };
        Ok(Self {
            time_dim: cfg.time_dim,
            t1: store.linear("time.l1", cfg.time_dim, td, rng)?,
            t2: store.linear("time.l2", td, td, rng)?,
            conv_in: conv3(store, "in.conv", c + cc, ch, 1, rng)?,
            res1: ResBlock::new(store, "down.res", ch, ch, td, g, rng)?,
            down: conv3(store, "down.conv", ch, 2 * ch, 2, rng)?,
            res2: ResBlock::new(store, "low.res", 2 * ch, 2 * ch, td, g, rng)?,
            mid: ResBlock::new(store, "mid.res", 2 * ch, 2 * ch, td, g, rng)?,
            up: conv3(store, "up.conv", 2 * ch, ch, 1, rng)?,
            res3: ResBlock::new(store, "up.res", 2 * ch, ch, td, g, rng)?,
            gn_out: group_norm(store, "out.gn", ch, g)?,
            conv_out,
        })
    }

    fn forward(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = z_t.dims4()?;
        let temb = self.t2.forward(&ops::silu(&self.t1.forward(&timestep_embedding(t, self.time_dim)?)?)?)?;
        let x = if cond.dim(1)? > 0 {
            Tensor::cat(&[z_t, cond], 1)?
        } else {
            z_t.clone()
        };
        let x = self.conv_in.forward(&x)?;
        let skip = self.res1.forward(&x, &temb)?;
        let low = self.res2.forward(&self.down.forward(&skip)?, &temb)?;
        let low = self.mid.forward(&low, &temb)?;
        let up = self.up.forward(&low.upsample_nearest2d(h, w)?)?;
        let x = self.res3.forward(&Tensor::cat(&[&up, &skip], 1)?, &temb)?;
        Ok(self.conv_out.forward(&ops::silu(&self.gn_out.forward(&x)?)?)?)
    }
}

/// Residual MLP over the flattened latent and conditioning.
struct MlpNet {
    time_dim: usize,
    t1: Linear,
    t2: Linear,
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    out: Linear,
}

impl MlpNet {
    fn new(store: &mut ParamStore, cfg: &DenoiserConfig, d_z: usize, d_c: usize, rng: &mut impl Rng) -> Result<Self> {
        let h = cfg.hidden;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                Ok((
                    store.linear(&format!("block{i}.a"), h, h, rng)?,
                    store.linear(&format!("block{i}.b"), h, h, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            time_dim: cfg.time_dim,
            t1: store.linear("time.l1", cfg.time_dim, h, rng)?,
            t2: store.linear("time.l2", h, h, rng)?,
            input: store.linear("input", d_z + d_c, h, rng)?,
            blocks,
            out: store.linear_zeros("out", h, d_z)?,
        })
    }

    fn forward(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let shape = z_t.dims().to_vec();
        let z = z_t.flatten_from(1)?;
        let x = if cond.dim(1)? > 0 {
            Tensor::cat(&[&z, &cond.flatten_from(1)?], 1)?
        } else {
            z
        };
        let temb = self.t2.forward(&ops::silu(&self.t1.forward(&timestep_embedding(t, self.time_dim)?)?)?)?;
        let mut h = self.input.forward(&x)?;
        for (a, b) in &self.blocks {
            let inner = a.forward(&ops::silu(&h)?)?.broadcast_add(&temb)?;
            h = (&h + b.forward(&ops::silu(&inner)?)?)?;
        }
        Ok(self.out.forward(&ops::silu(&h)?)?.reshape(shape)?)
    }
}

enum Net {
    Unet(Box<Unet>),
    Mlp(MlpNet),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub latent_shape: [usize; 3],
    /// Length of the conditioning embedding; 0 for an unconditional model.
    pub cond_dim: usize,
    pub denoiser: DenoiserConfig,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    /// Sample with the EMA weights after training.
    pub use_ema: bool,
    pub checkpoint_every: usize,
    /// Min-SNR-γ loss weighting during training; `None` trains on the
    /// unweighted noise objective.
    pub snr_gamma: Option<f64>,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1024,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 2e-2,
            latent_shape: [4, 16, 16],
            cond_dim: 1024,
            denoiser: DenoiserConfig::default(),
            lr: 1e-4,
            steps: 2000,
            batch_size: 32,
            ema_decay: 0.999,
            use_ema: true,
            checkpoint_every: 100,
            snr_gamma: Some(5.0),
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn latent_dim(&self) -> usize {
        self.latent_shape.iter().product()
    }

    fn cond_channels(&self) -> Result<usize> {
        let plane = self.latent_shape[1] * self.latent_shape[2];
        if self.cond_dim % plane != 0 {
            return Err(Error::Config(format!(
                "conditioning length {} is not a multiple of the latent plane {plane}",
                self.cond_dim
            )));
        }
        Ok(self.cond_dim / plane)
    }
}

/// Conditioning of every training latent.
pub enum Conditioning<'a> {
    /// Zero embedding for every latent.
    None,
    /// One fixed embedding per latent.
    Embeddings(Vec<Vec<f32>>),
    /// Row `indices[i]` of a table trained jointly with the denoiser.
    ChunkIndex {
        table: &'a ChunkIndexEmbedding,
        indices: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaPolicy {
    /// `σ_t = √β̃_t`.
    #[default]
    #[serde(rename = "posterior")]
    DdpmPosterior,
    #[serde(rename = "zero")]
    Zero,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Reverse steps; `None` runs all `T`.
    pub steps: Option<usize>,
    pub sigma: SigmaPolicy,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DiffusionSidecar {
    config: DiffusionConfig,
    latent_scale: f32,
    tensors: Vec<TensorInfo>,
}

/// Noise schedule, denoiser and the scalar latent scale.
///
/// Latents are multiplied by `latent_scale` (the reciprocal RMS of the
/// training latents) before diffusion and divided by it after sampling.
pub struct LatentDiffusion {
    cfg: DiffusionConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    net: Net,
    latent_scale: f32,
}

impl NoisePredictor for LatentDiffusion {
    fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let out = match &self.net {
            Net::Unet(u) => u.forward(z_t, t, cond)?,
            Net::Mlp(m) => m.forward(z_t, t, cond)?,
        };
        match self.cfg.denoiser.prediction {
            Prediction::Epsilon => Ok(out),
            Prediction::Sample => {
                let ab = |s: usize| self.schedule.alpha_bars[s];
                let a = coef(t.iter().map(|&s| (1.0 / (1.0 - ab(s)).sqrt()) as f32).collect())?;
                let b = coef(t.iter().map(|&s| (ab(s).sqrt() / (1.0 - ab(s)).sqrt()) as f32).collect())?;
                Ok((z_t.broadcast_mul(&a)? - out.broadcast_mul(&b)?)?)
            }
        }
    }
}

impl LatentDiffusion {
    pub fn new(cfg: DiffusionConfig) -> Result<Self> {
        let schedule = make_schedule(cfg.timesteps, cfg.schedule, cfg.beta_start, cfg.beta_end)?;
        let [c, h, w] = cfg.latent_shape;
        if c * h * w == 0 {
            return Err(Error::Config("latent shape has a zero extent".into()));
        }
        let cc = cfg.cond_channels()?;
        let mut rng = nn::rng(nn::derive_seed(cfg.seed, "diffusion/init"));
        let mut store = ParamStore::new();
        let net = match cfg.denoiser.kind {
            DenoiserKind::Unet => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config("U-Net needs even latent height and width".into()));
                }
                Net::Unet(Box::new(Unet::new(&mut store, &cfg.denoiser, c, cc, &mut rng)?))
            }
            DenoiserKind::Mlp => Net::Mlp(MlpNet::new(&mut store, &cfg.denoiser, c * h * w, cfg.cond_dim, &mut rng)?),
        };
        Ok(Self {
            cfg,
            schedule,
            store,
            net,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn latent_scale(&self) -> f32 {
        self.latent_scale
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn batch_tensor(&self, rows: &[&[f32]], channels: usize) -> Result<Tensor> {
        let [_, h, w] = self.cfg.latent_shape;
        nn::tensor(rows.concat(), &[rows.len(), channels, h, w])
    }

    fn cond_tensor(&self, rows: &[&[f32]]) -> Result<Tensor> {
        let cc = self.cfg.cond_channels()?;
        if let Some(bad) = rows.iter().find(|r| r.len() != self.cfg.cond_dim) {
            return Err(Error::Dimension {
                context: "conditioning embedding",
                expected: self.cfg.cond_dim,
                got: bad.len(),
            });
        }
        self.batch_tensor(rows, cc)
    }

    /// Trains the denoiser on `latents`, returning the loss of every step.
    ///
    /// EMA weights are tracked throughout and, with `use_ema`, loaded into
    /// the model at the end. A non-finite loss restores the most recent
    /// stable checkpoint (taken every `checkpoint_every` steps) and returns
    /// [`Error::Diverged`].
    pub fn train(&mut self, latents: &[Vec<f32>], cond: &Conditioning<'_>) -> Result<Vec<f32>> {
        if latents.is_empty() {
            return Err(Error::Empty("diffusion training latents".into()));
        }
        let d = self.cfg.latent_dim();
        if let Some(bad) = latents.iter().find(|z| z.len() != d) {
            return Err(Error::Dimension {
                context: "training latent",
                expected: d,
                got: bad.len(),
            });
        }
        match cond {
            Conditioning::Embeddings(e) if e.len() != latents.len() => {
                return Err(Error::Dimension {
                    context: "conditioning embeddings",
                    expected: latents.len(),
                    got: e.len(),
                })
            }
            Conditioning::ChunkIndex { table, indices } => {
                if indices.len() != latents.len() {
                    return Err(Error::Dimension {
                        context: "chunk indices",
                        expected: latents.len(),
                        got: indices.len(),
                    });
                }
                if table.dim() != self.cfg.cond_dim {
                    return Err(Error::Dimension {
                        context: "chunk index table",
                        expected: self.cfg.cond_dim,
                        got: table.dim(),
                    });
                }
                if let Some(&i) = indices.iter().find(|&&i| i >= table.len()) {
                    return Err(Error::OutOfRange { index: i, len: table.len() });
                }
            }
            _ => {}
        }
        let rms = (latents.iter().flatten().map(|v| (*v as f64).powi(2)).sum::<f64>() / (latents.len() * d) as f64).sqrt();
        self.latent_scale = if rms > 1e-12 { (1.0 / rms) as f32 } else { 1.0 };
        let scaled: Vec<Vec<f32>> = latents
            .iter()
            .map(|z| z.iter().map(|v| v * self.latent_scale).collect())
            .collect();

        let mut trainable = self.store.share();
        if let Conditioning::ChunkIndex { table, .. } = cond {
            trainable.push("chunk_index.table", table.var().clone());
        }
        let mut opt = candle_nn::AdamW::new(
            trainable.vars(),
            ParamsAdamW {
                lr: self.cfg.lr,
                ..Default::default()
            },
        )?;
        let mut ema = Ema::new(&trainable, self.cfg.ema_decay)?;
        let mut stable = trainable.snapshot()?;
        let mut rng = nn::rng(nn::derive_seed(self.cfg.seed, "diffusion/train"));
        let zero_cond = vec![0f32; self.cfg.cond_dim];
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(self.cfg.steps);
        let bs = self.cfg.batch_size.clamp(1, latents.len());
        for step in 0..self.cfg.steps {
            if order.len() < bs {
                let mut fresh: Vec<usize> = (0..latents.len()).collect();
                fresh.shuffle(&mut rng);
                order.extend(fresh);
            }
            let idx: Vec<usize> = order.drain(..bs).collect();
            let z0 = self.batch_tensor(&idx.iter().map(|&i| scaled[i].as_slice()).collect::<Vec<_>>(), self.cfg.latent_shape[0])?;
            let c = match cond {
                Conditioning::None => self.cond_tensor(&vec![zero_cond.as_slice(); bs])?,
                Conditioning::Embeddings(e) => self.cond_tensor(&idx.iter().map(|&i| e[i].as_slice()).collect::<Vec<_>>())?,
                Conditioning::ChunkIndex { table, indices } => {
                    let rows = table.rows(&idx.iter().map(|&i| indices[i]).collect::<Vec<_>>())?;
                    let [_, h, w] = self.cfg.latent_shape;
                    rows.reshape((bs, self.cfg.cond_channels()?, h, w))?
                }
            };
            let loss = match self.cfg.snr_gamma {
                None => ldm_loss(self, &z0, &c, &self.schedule, &mut rng)?,
                Some(gamma) => {
                    let t: Vec<usize> = (0..bs).map(|_| rng.random_range(0..self.schedule.len())).collect();
                    let noise = nn::tensor(nn::normal_vec(&mut rng, z0.elem_count()), z0.dims())?;
                    weighted_loss(self, &z0, &c, &t, &noise, &self.schedule, gamma)?
                }
            };
            let l = nn::scalar(&loss)?;
            if !l.is_finite() {
                trainable.restore(&stable)?;
                return Err(Error::Diverged {
                    stage: "diffusion",
                    step,
                    batch: step,
                });
            }
            opt.backward_step(&loss)?;
            ema.update(&trainable)?;
            losses.push(l);
            if self.cfg.checkpoint_every > 0 && (step + 1) % self.cfg.checkpoint_every == 0 {
                stable = trainable.snapshot()?;
            }
        }
        if self.cfg.use_ema {
            trainable.restore(ema.weights())?;
        }
        Ok(losses)
    }

    /// One latent per row of `conds` (`None` rows are unconditional), by
    /// ancestral sampling. Sample `i` draws all of its noise from stream `i`
    /// of the sampler seed, so results do not depend on thread count.
    pub fn sample_batch(&self, conds: &[Option<&[f32]>], sampler: &SamplerConfig) -> Result<Vec<LatentCode>> {
        let n = conds.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let (schedule, ts) = self.schedule.respaced(sampler.steps.unwrap_or(self.schedule.len()))?;
        let d = self.cfg.latent_dim();
        let zero = vec![0f32; self.cfg.cond_dim];
        let cond_rows: Vec<&[f32]> = conds.iter().map(|c| c.unwrap_or(zero.as_slice())).collect();
        let cond = self.cond_tensor(&cond_rows)?;
        let mut rngs: Vec<_> = (0..n as u64).map(|i| nn::stream_rng(sampler.seed, i)).collect();
        let init: Vec<f32> = rngs.iter_mut().flat_map(|r| nn::normal_vec(r, d)).collect();
        let [c, h, w] = self.cfg.latent_shape;
        let mut z = nn::tensor(init, &[n, c, h, w])?;
        for i in (0..schedule.len()).rev() {
            let eps = self.predict(&z, &vec![ts[i]; n], &cond)?;
            let beta = schedule.betas[i];
            let k = beta / (1.0 - schedule.alpha_bars[i]).sqrt();
            let mean = ((z - (eps * k)?)? / schedule.alphas[i].sqrt())?;
            let sigma = match sampler.sigma {
                SigmaPolicy::DdpmPosterior if i > 0 => schedule.posterior_variance(i).sqrt(),
                _ => 0.0,
            };
            z = if sigma > 0.0 {
                let xi: Vec<f32> = rngs.iter_mut().flat_map(|r| nn::normal_vec(r, d)).collect();
                (mean + (nn::tensor(xi, &[n, c, h, w])? * sigma)?)?
            } else {
                mean
            }
            .detach();
        }
        let inv = 1.0 / self.latent_scale as f64;
        Ok(nn::to_rows(&(z * inv)?)?
            .into_iter()
            .map(|values| LatentCode {
                values,
                shape: self.cfg.latent_shape,
                source: LatentSource::DiffusionSample,
            })
            .collect())
    }

    /// `n` latents sharing one conditioning embedding.
    pub fn sample(&self, cond: Option<&[f32]>, n: usize, sampler: &SamplerConfig) -> Result<Vec<LatentCode>> {
        self.sample_batch(&vec![cond; n], sampler)
    }

    /// Writes `diffusion.bin` and `diffusion.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.store.write_blob(&dir.join("diffusion.bin"))?;
        let side = DiffusionSidecar {
            config: self.cfg.clone(),
            latent_scale: self.latent_scale,
            tensors: self.store.tensor_table(),
        };
        fs::write(dir.join("diffusion.json"), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("diffusion.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let side: DiffusionSidecar = serde_json::from_slice(&fs::read(&path)?)?;
        let mut m = Self::new(side.config)?;
        m.store.read_blob(&dir.join("diffusion.bin"), &side.tensors)?;
        m.latent_scale = side.latent_scale;
        Ok(m)
    }
}

/// Samples `n` latents and decodes each into a full weight vector.
pub fn sample_weights(
    vae: &WeightVae,
    diffusion: &LatentDiffusion,
    cond: Option<&[f32]>,
    n: usize,
    sampler: &SamplerConfig,
    manifest: &Arc<LayoutManifest>,
) -> Result<Vec<FlatWeights>> {
    let codes = diffusion.sample(cond, n, sampler)?;
    let refs: Vec<&[f32]> = codes.iter().map(|c| c.values.as_slice()).collect();
    vae.decode_batch(&refs)?
        .iter()
        .map(|w| FlatWeights::from_decoded(w, manifest.clone()))
        .collect()
}

/// Chunk mode: samples one latent per chunk index, decodes each to a chunk
/// of `chunk_length` values and reassembles the first `source_length`
/// values of `layer`.
pub fn sample_layer_chunks(
    vae: &WeightVae,
    diffusion: &LatentDiffusion,
    table: &ChunkIndexEmbedding,
    layer: &str,
    source_length: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<f32>> {
    let chunk_length = vae.input_dim();
    let rows = table.to_rows()?;
    let conds: Vec<Option<&[f32]>> = rows.iter().map(|r| Some(r.as_slice())).collect();
    let codes = diffusion.sample_batch(&conds, sampler)?;
    let refs: Vec<&[f32]> = codes.iter().map(|c| c.values.as_slice()).collect();
    let chunks = vae.decode_batch(&refs)?;
    if chunk_length * chunks.len() < source_length {
        return Err(Error::Dimension {
            context: "chunk table covers too few values",
            expected: source_length,
            got: chunk_length * chunks.len(),
        });
    }
    let set = ChunkSet {
        chunk_length,
        chunk_indices: (0..chunks.len()).collect(),
        chunks,
        source_length,
        source_layer: Some(layer.to_string()),
    };
    codec::reassemble(&set)
}

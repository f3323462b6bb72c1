//! Target architectures whose weights populate the zoo, with a forward pass
//! driven directly by a flat weight vector.

use std::sync::Arc;

use candle_core::{DType, Tensor, Var, D};
use candle_nn::{ops, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{FlatWeights, LayoutManifest};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::nn;

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected head, leaky-ReLU between layers.
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// 3×3 conv + ReLU + 2×2 max-pool blocks over a square single-channel
    /// image, then a linear head.
    ConvNet {
        side: usize,
        conv_channels: Vec<usize>,
        classes: usize,
    },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp {
            input: 512,
            hidden: vec![256],
            classes: 10,
        }
    }
}

impl Architecture {
    pub fn id(&self) -> String {
        match self {
            Architecture::Mlp { input, hidden, classes } => {
                let mut parts = vec![input.to_string()];
                parts.extend(hidden.iter().map(|h| h.to_string()));
                parts.push(classes.to_string());
                format!("mlp-{}", parts.join("-"))
            }
            Architecture::ConvNet {
                side,
                conv_channels,
                classes,
            } => {
                let ch: Vec<String> = conv_channels.iter().map(|c| c.to_string()).collect();
                format!("convnet-{side}-{}-{classes}", ch.join("-"))
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Mlp { input, .. } => *input,
            Architecture::ConvNet { side, .. } => side * side,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Architecture::Mlp { classes, .. } | Architecture::ConvNet { classes, .. } => *classes,
        }
    }

    pub fn manifest(&self) -> LayoutManifest {
        let mut b = LayoutManifest::builder(self.id());
        match self {
            Architecture::Mlp { input, hidden, classes } => {
                let mut dims = vec![*input];
                dims.extend(hidden);
                dims.push(*classes);
                for (i, w) in dims.windows(2).enumerate() {
                    b = b.fc(&format!("fc{}", i + 1), w[0], w[1], true);
                }
            }
            Architecture::ConvNet {
                side,
                conv_channels,
                classes,
            } => {
                let mut c_in = 1;
                let mut s = *side;
                for (i, &c) in conv_channels.iter().enumerate() {
                    b = b.conv(&format!("conv{}", i + 1), 3, 3, c_in, c, true);
                    c_in = c;
                    s /= 2;
                }
                b = b.fc("head", c_in * s * s, *classes, true);
            }
        }
        b.build()
    }

    pub fn shared_manifest(&self) -> Arc<LayoutManifest> {
        Arc::new(self.manifest())
    }

    /// Default-style initialization: every tensor uniform in ±1/√fan_in.
    pub fn random_init(&self, seed: u64) -> FlatWeights {
        let manifest = self.shared_manifest();
        let mut rng = nn::rng(seed);
        let mut values = vec![0f32; manifest.padded_length];
        let mut fan_in = 1;
        for layer in &manifest.layers {
            if layer.name.ends_with(".weight") {
                fan_in = match layer.shape.as_slice() {
                    [d_in, _] => *d_in,
                    [_, c_in, kh, kw] => c_in * kh * kw,
                    _ => layer.length,
                };
            }
            let bound = 1.0 / (fan_in as f32).sqrt();
            for v in &mut values[layer.range()] {
                *v = rand::Rng::random_range(&mut rng, -bound..=bound);
            }
        }
        FlatWeights::new(values, manifest).expect("fresh layout is consistent")
    }

    fn check(&self, manifest: &LayoutManifest) -> Result<()> {
        if manifest.architecture_id != self.id() {
            return Err(Error::layout(
                &manifest.architecture_id,
                format!("weights belong to `{}`, evaluator expects `{}`", manifest.architecture_id, self.id()),
            ));
        }
        Ok(())
    }

    /// Logits for a `(batch, input)` tensor; `params` holds the `d` active
    /// values laid out as in [`Architecture::manifest`].
    pub fn forward(&self, params: &Tensor, x: &Tensor) -> Result<Tensor> {
        let manifest = self.manifest();
        let slice = |i: usize| -> Result<Tensor> {
            let l = &manifest.layers[i];
            Ok(params.narrow(0, l.offset, l.length)?.reshape(l.shape.as_slice())?)
        };
        match self {
            Architecture::Mlp { hidden, .. } => {
                let mut h = x.clone();
                for i in 0..=hidden.len() {
                    h = h.matmul(&slice(2 * i)?)?.broadcast_add(&slice(2 * i + 1)?)?;
                    if i < hidden.len() {
                        h = ops::leaky_relu(&h, LEAKY_SLOPE)?;
                    }
                }
                Ok(h)
            }
            Architecture::ConvNet { side, conv_channels, .. } => {
                let b = x.dim(0)?;
                let mut h = x.reshape((b, 1, *side, *side))?;
                for i in 0..conv_channels.len() {
                    let w = slice(2 * i)?;
                    let bias = slice(2 * i + 1)?.reshape((1, (), 1, 1))?;
                    h = h.conv2d(&w, 1, 1, 1, 1)?.broadcast_add(&bias)?.relu()?.max_pool2d(2)?;
                }
                let k = conv_channels.len();
                let h = h.flatten_from(1)?;
                Ok(h.matmul(&slice(2 * k)?)?.broadcast_add(&slice(2 * k + 1)?)?)
            }
        }
    }

    /// Fraction of correctly classified samples; ties go to the lowest class.
    pub fn accuracy(&self, weights: &FlatWeights, split: &Split) -> Result<f64> {
        self.check(weights.manifest())?;
        if split.is_empty() {
            return Err(Error::Empty("evaluation split".into()));
        }
        if split.dim != self.input_dim() {
            return Err(Error::Dimension {
                context: "classifier input",
                expected: self.input_dim(),
                got: split.dim,
            });
        }
        let params = nn::tensor(weights.active().to_vec(), &[weights.manifest().total_length])?;
        let x = nn::tensor(split.features.clone(), &[split.len(), split.dim])?;
        let logits = self.forward(&params, &x)?.to_vec2::<f32>()?;
        let correct = logits
            .iter()
            .zip(&split.labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        Ok(correct as f64 / split.len() as f64)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        // NaN never wins
        if *v > row[best] || (row[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Number of trailing per-epoch checkpoints kept.
    pub keep_last: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            keep_last: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// 1-based epoch after which the weights were captured.
    pub epoch: usize,
    pub weights: FlatWeights,
    pub train_loss: f32,
}

pub struct TrainOutcome {
    /// The last `keep_last` per-epoch checkpoints.
    pub checkpoints: Vec<Checkpoint>,
    /// Epoch whose loss went non-finite; training stops there.
    pub diverged_at: Option<usize>,
}

/// Adam on cross-entropy with one checkpoint per epoch. `on_epoch` sees
/// every epoch's weights.
pub fn train(
    arch: &Architecture,
    init: &FlatWeights,
    data: &Split,
    cfg: &TrainerConfig,
    mut on_epoch: impl FnMut(usize, &FlatWeights) -> Result<()>,
) -> Result<TrainOutcome> {
    arch.check(init.manifest())?;
    if data.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let d = init.manifest().total_length;
    let params = Var::from_tensor(&nn::tensor(init.active().to_vec(), &[d])?)?;
    let mut opt = candle_nn::AdamW::new(
        vec![params.clone()],
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = nn::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut checkpoints = Vec::new();
    let bs = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0f32;
        let mut batches = 0;
        for batch in order.chunks(bs) {
            let mut xs = Vec::with_capacity(batch.len() * data.dim);
            let mut ys = Vec::with_capacity(batch.len());
            for &i in batch {
                xs.extend_from_slice(data.row(i));
                ys.push(data.labels[i] as u32);
            }
            let x = nn::tensor(xs, &[batch.len(), data.dim])?;
            let y = Tensor::from_vec(ys, batch.len(), &nn::DEVICE)?;
            let logits = arch.forward(params.as_tensor(), &x)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let l = nn::scalar(&loss)?;
            if !l.is_finite() {
                return Ok(TrainOutcome {
                    checkpoints,
                    diverged_at: Some(epoch),
                });
            }
            opt.backward_step(&loss)?;
            total += l;
            batches += 1;
        }
        let weights = FlatWeights::from_decoded(&nn::to_vec(params.as_tensor())?, Arc::clone(init.manifest()))?;
        on_epoch(epoch, &weights)?;
        checkpoints.push(Checkpoint {
            epoch,
            weights,
            train_loss: total / batches as f32,
        });
        if checkpoints.len() > cfg.keep_last {
            checkpoints.remove(0);
        }
    }
    Ok(TrainOutcome {
        checkpoints,
        diverged_at: None,
    })
}

/// Per-sample class probabilities; used by tests and reports.
pub fn probabilities(arch: &Architecture, weights: &FlatWeights, split: &Split) -> Result<Vec<Vec<f32>>> {
    let params = nn::tensor(weights.active().to_vec(), &[weights.manifest().total_length])?;
    let x = nn::tensor(split.features.clone(), &[split.len(), split.dim])?;
    let logits = arch.forward(&params, &x)?.to_dtype(DType::F32)?;
    Ok(ops::softmax(&logits, D::Minus1)?.to_vec2::<f32>()?)
}

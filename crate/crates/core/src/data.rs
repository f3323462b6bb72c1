//! Dataset files, featurizers and class-balanced splits.
//!
//! A dataset `<id>` lives under the data root as `<id>.bin` (row-major
//! little-endian f32 matrix) plus `<id>.json` (`{n_samples, dim, labels}`).
//! The featurizer named by a [`DatasetSpec`] turns stored rows into model
//! inputs: `raw-pixel` rescales 0..255 intensities to [0, 1],
//! `external-embedding` passes precomputed features through unchanged.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::zoo::DatasetSpec;

pub const DATA_DIR_ENV: &str = "WG_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub dim: usize,
    /// `n_samples × dim`, row-major.
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    n_samples: usize,
    dim: usize,
    labels: Vec<usize>,
}

/// Directory of dataset files.
#[derive(Clone, Debug)]
pub struct DataStore {
    root: PathBuf,
}

impl DataStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Root from `WG_DATA_DIR`, falling back to `./data`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| "data".into()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn save(&self, dataset: &Dataset) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        let mut buf = Vec::with_capacity(dataset.features.len() * 4);
        for v in &dataset.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(self.root.join(format!("{}.bin", dataset.id)))?.write_all(&buf)?;
        let sidecar = Sidecar {
            n_samples: dataset.len(),
            dim: dataset.dim,
            labels: dataset.labels.clone(),
        };
        fs::write(
            self.root.join(format!("{}.json", dataset.id)),
            serde_json::to_vec(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Dataset> {
        let fail = |detail: String| Error::Ingestion {
            dataset: id.to_string(),
            detail,
        };
        let side_path = self.root.join(format!("{id}.json"));
        let text = fs::read(&side_path).map_err(|e| fail(format!("{}: {e}", side_path.display())))?;
        let side: Sidecar = serde_json::from_slice(&text).map_err(|e| fail(e.to_string()))?;
        let bin_path = self.root.join(format!("{id}.bin"));
        let bytes = fs::read(&bin_path).map_err(|e| fail(format!("{}: {e}", bin_path.display())))?;
        if side.labels.len() != side.n_samples || bytes.len() != side.n_samples * side.dim * 4 {
            return Err(fail(format!(
                "sidecar declares {} × {} with {} labels, payload holds {} bytes",
                side.n_samples,
                side.dim,
                side.labels.len(),
                bytes.len()
            )));
        }
        let features = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Dataset {
            id: id.to_string(),
            dim: side.dim,
            features,
            labels: side.labels,
        })
    }
}

pub trait Featurizer: Send + Sync {
    fn id(&self) -> &'static str;
    fn featurize(&self, row: &[f32]) -> Vec<f32>;
}

/// Flattened pixels scaled from 0..255 to [0, 1].
pub struct RawPixel;

impl Featurizer for RawPixel {
    fn id(&self) -> &'static str {
        "raw-pixel"
    }

    fn featurize(&self, row: &[f32]) -> Vec<f32> {
        row.iter().map(|p| (p / 255.0).clamp(0.0, 1.0)).collect()
    }
}

/// Rows are precomputed embeddings (e.g. from an external image encoder).
pub struct ExternalEmbedding;

impl Featurizer for ExternalEmbedding {
    fn id(&self) -> &'static str {
        "external-embedding"
    }

    fn featurize(&self, row: &[f32]) -> Vec<f32> {
        row.to_vec()
    }
}

pub fn featurizer(id: &str) -> Result<Box<dyn Featurizer>> {
    match id {
        "raw-pixel" => Ok(Box::new(RawPixel)),
        "external-embedding" => Ok(Box::new(ExternalEmbedding)),
        other => Err(Error::Unsupported(format!("featurizer `{other}`"))),
    }
}

/// Featurized samples with labels remapped to `0..n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub dim: usize,
    pub n_classes: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// `n_per_class` randomly chosen samples of every class, grouped by class.
    /// Labels are consumed only for grouping.
    pub fn class_sets(&self, n_per_class: usize, rng: &mut impl Rng) -> Result<Vec<Vec<Vec<f32>>>> {
        let mut sets = Vec::with_capacity(self.n_classes);
        for c in 0..self.n_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            if idx.is_empty() {
                return Err(Error::Empty(format!("class {c} has no samples")));
            }
            idx.shuffle(rng);
            idx.truncate(n_per_class.max(1));
            sets.push(idx.into_iter().map(|i| self.row(i).to_vec()).collect());
        }
        Ok(sets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub train: Split,
    pub val: Split,
    pub eval: Split,
}

/// Per class, in file order: the first `train` samples, then `val`, then
/// `eval`. The three splits never share a sample.
pub fn split(dataset: &Dataset, spec: &DatasetSpec) -> Result<TaskSplits> {
    if spec.class_ids.len() < 2 {
        return Err(Error::Config(format!("{}: at least two classes required", spec.dataset_id)));
    }
    let feat = featurizer(&spec.featurizer_id)?;
    let counts = [
        spec.samples_per_class_train,
        spec.samples_per_class_val,
        spec.samples_per_class_eval,
    ];
    let mut parts: Vec<Split> = (0..3)
        .map(|_| Split {
            dim: dataset.dim,
            n_classes: spec.class_ids.len(),
            features: Vec::new(),
            labels: Vec::new(),
        })
        .collect();
    for (new_label, &class) in spec.class_ids.iter().enumerate() {
        let rows: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        let needed: usize = counts.iter().sum();
        if rows.len() < needed {
            return Err(Error::Ingestion {
                dataset: spec.dataset_id.clone(),
                detail: format!("class {class} has {} samples, {needed} required", rows.len()),
            });
        }
        let mut cursor = 0;
        for (part, &count) in parts.iter_mut().zip(&counts) {
            for &i in &rows[cursor..cursor + count] {
                part.features.extend(feat.featurize(dataset.row(i)));
                part.labels.push(new_label);
            }
            cursor += count;
        }
    }
    let eval = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(TaskSplits { train, val, eval })
}

/// Procedural grayscale image classes: every class is a fixed blob pattern,
/// samples are randomly shifted noisy copies quantized to 0..255.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImages {
    pub classes: usize,
    pub side: usize,
    pub per_class: usize,
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticImages {
    pub fn generate(&self, id: &str) -> Dataset {
        let mut rng = nn::rng(self.seed);
        let side = self.side;
        let protos: Vec<Vec<f32>> = (0..self.classes)
            .map(|_| {
                let mut img = vec![0f32; side * side];
                for _ in 0..3 {
                    let cx = rng.random_range(0.0..side as f32);
                    let cy = rng.random_range(0.0..side as f32);
                    let w = rng.random_range(0.8..2.0f32);
                    let a = rng.random_range(0.5..1.0f32);
                    for y in 0..side {
                        for x in 0..side {
                            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                            img[y * side + x] += a * (-d2 / (2.0 * w * w)).exp();
                        }
                    }
                }
                let max = img.iter().cloned().fold(f32::MIN, f32::max).max(1e-6);
                img.iter().map(|v| v / max).collect()
            })
            .collect();
        let n = self.classes * self.per_class;
        let mut features = Vec::with_capacity(n * side * side);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % self.classes;
            let (dx, dy) = (rng.random_range(-1i32..=1), rng.random_range(-1i32..=1));
            let noise = nn::normal_vec(&mut rng, side * side);
            for y in 0..side as i32 {
                for x in 0..side as i32 {
                    let (sx, sy) = (x - dx, y - dy);
                    let base = if (0..side as i32).contains(&sx) && (0..side as i32).contains(&sy) {
                        protos[class][sy as usize * side + sx as usize]
                    } else {
                        0.0
                    };
                    let v = (base + self.noise * noise[y as usize * side + x as usize]).clamp(0.0, 1.0);
                    features.push((v * 255.0).round());
                }
            }
            labels.push(class);
        }
        Dataset {
            id: id.to_string(),
            dim: side * side,
            features,
            labels,
        }
    }
}

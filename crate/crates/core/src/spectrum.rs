//! Layer ranking by singular-spectrum signal content.
//!
//! For an `m × n` matrix (`m ≤ n` after transposing) of i.i.d. entries with
//! standard deviation `σ`, the eigenvalues of `W Wᵀ / n` fill the
//! Marchenko–Pastur interval `σ²(1 ± √q)²` with `q = m / n`, so the singular
//! values of `W` concentrate in `√n σ (1 ± √q)`. Singular mass above the
//! upper edge is treated as signal.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codec::{self, FlatWeights, LayerEntry};
use crate::error::{Error, Result};

/// Singular values in non-increasing order; `min(m, n)` of them.
pub fn singular_spectrum(values: &[f32], m: usize, n: usize) -> Result<Vec<f64>> {
    if values.len() != m * n {
        return Err(Error::Dimension {
            context: "matrix entries",
            expected: m * n,
            got: values.len(),
        });
    }
    if m == 0 || n == 0 {
        return Err(Error::Empty("matrix with a zero dimension".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix has non-finite entries".into()));
    }
    let w = DMatrix::from_row_iterator(m, n, values.iter().map(|&v| v as f64));
    let mut s: Vec<f64> = w.singular_values().iter().map(|v| v.max(0.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Marchenko–Pastur edges for an `m × n` matrix with entry scale `σ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpBounds {
    pub q: f64,
    /// Eigenvalue edges of `W Wᵀ / n`.
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    /// Singular-value edges of `W`.
    pub eps_minus: f64,
    pub eps_plus: f64,
}

pub fn mp_bounds(m: usize, n: usize, sigma: f64) -> MpBounds {
    let (small, large) = if m <= n { (m, n) } else { (n, m) };
    let q = small as f64 / large as f64;
    let rq = q.sqrt();
    let scale = (large as f64).sqrt() * sigma;
    MpBounds {
        q,
        lambda_minus: sigma * sigma * (1.0 - rq).powi(2),
        lambda_plus: sigma * sigma * (1.0 + rq).powi(2),
        eps_minus: (scale * (1.0 - rq)).max(0.0),
        eps_plus: scale * (1.0 + rq),
    }
}

/// `Σ_{s ≥ ε} s / Σ_{s < ε} s`; `0` when the numerator is zero and
/// `+∞` when only the denominator is.
pub fn snr_from_spectrum(singular_values: &[f64], eps: f64) -> f64 {
    let (mut above, mut below) = (0.0, 0.0);
    for &s in singular_values {
        if s.abs() >= eps {
            above += s.abs();
        } else {
            below += s.abs();
        }
    }
    if above == 0.0 {
        0.0
    } else if below == 0.0 {
        f64::INFINITY
    } else {
        above / below
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum SigmaPolicy {
    /// Sample standard deviation of the layer's entries.
    #[default]
    EntryStd,
    Fixed(f64),
}

fn entry_std(values: &[f32]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    (values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn sigma_for(values: &[f32], policy: SigmaPolicy) -> f64 {
    match policy {
        SigmaPolicy::EntryStd => entry_std(values),
        SigmaPolicy::Fixed(s) => s,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer: String,
    pub shape: (usize, usize),
    pub singular_values: Vec<f64>,
    pub sigma_hat: f64,
    pub q: f64,
    pub eps_minus: f64,
    pub eps_plus: f64,
    /// `null` in JSON when infinite.
    #[serde(with = "inf_as_null")]
    pub snr: f64,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Spectrum, MP edges and SNR of one matrix.
pub fn analyze(layer: &str, values: &[f32], m: usize, n: usize, policy: SigmaPolicy) -> Result<LayerSpectrum> {
    let singular_values = singular_spectrum(values, m, n)?;
    let sigma_hat = sigma_for(values, policy);
    let b = mp_bounds(m, n, sigma_hat);
    Ok(LayerSpectrum {
        layer: layer.to_string(),
        shape: (m, n),
        snr: snr_from_spectrum(&singular_values, b.eps_plus),
        singular_values,
        sigma_hat,
        q: b.q,
        eps_minus: b.eps_minus,
        eps_plus: b.eps_plus,
    })
}

/// SNR of an `m × n` matrix with `ε = ε₊` from `σ` per `policy`.
pub fn snr(values: &[f32], m: usize, n: usize, policy: SigmaPolicy) -> Result<f64> {
    Ok(analyze("", values, m, n, policy)?.snr)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Layers whose names agree once digit runs are removed share a group,
    /// e.g. `blocks.3.attn.weight` and `blocks.7.attn.weight`.
    #[default]
    BySuffix,
    /// One group for every eligible layer.
    Single,
}

impl Grouping {
    pub fn key(&self, name: &str) -> String {
        match self {
            Grouping::BySuffix => name.chars().filter(|c| !c.is_ascii_digit()).collect(),
            Grouping::Single => "all".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub fraction: f64,
    pub sigma: SigmaPolicy,
    pub grouping: Grouping,
    /// Drop the first 2-D layer when its name marks it as an embedding.
    pub exclude_embedding: bool,
    /// Drop the last 2-D layer of the manifest.
    pub exclude_output: bool,
    /// Report 1-D tensors (biases, norm scales) as always included.
    pub include_1d: bool,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            fraction: 0.25,
            sigma: SigmaPolicy::EntryStd,
            grouping: Grouping::BySuffix,
            exclude_embedding: true,
            exclude_output: true,
            include_1d: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub fraction: f64,
    pub sigma_policy: SigmaPolicy,
    pub layers: Vec<LayerSpectrum>,
    /// Analyzed layers by SNR, descending; ties keep manifest order.
    pub ranking: Vec<String>,
    pub groups: BTreeMap<String, Vec<String>>,
    /// Top `⌈fraction · count⌉` of each group, in ranking order.
    pub selected: Vec<String>,
    pub excluded: Vec<String>,
    pub always_included: Vec<String>,
}

impl SpectrumReport {
    pub fn layer(&self, name: &str) -> Option<&LayerSpectrum> {
        self.layers.iter().find(|l| l.layer == name)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Indices sorted by `snr` descending; equal values keep index order.
fn stable_rank(snrs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..snrs.len()).collect();
    order.sort_by(|&a, &b| snrs[b].total_cmp(&snrs[a]));
    order
}

fn is_embedding(entry: &LayerEntry) -> bool {
    entry.name.to_ascii_lowercase().contains("embed")
}

/// Ranks the 2-D layers of a checkpoint and selects the top fraction of
/// each group.
pub fn rank_and_select(weights: &FlatWeights, cfg: &SelectConfig) -> Result<SpectrumReport> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {}", cfg.fraction)));
    }
    let manifest = weights.manifest();
    let matrices: Vec<&LayerEntry> = manifest.layers.iter().filter(|l| l.matrix_shape().is_some()).collect();
    let mut excluded = Vec::new();
    let mut eligible = Vec::new();
    for (i, entry) in matrices.iter().enumerate() {
        let drop = (cfg.exclude_embedding && i == 0 && is_embedding(entry))
            || (cfg.exclude_output && i + 1 == matrices.len());
        if drop {
            excluded.push(entry.name.clone());
        } else {
            eligible.push(*entry);
        }
    }
    if eligible.is_empty() {
        return Err(Error::Empty("no eligible two-dimensional layers".into()));
    }
    let layers = eligible
        .iter()
        .map(|e| {
            let (m, n) = e.matrix_shape().expect("filtered to matrices");
            analyze(&e.name, weights.segment(&e.name)?, m, n, cfg.sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    let snrs: Vec<f64> = layers.iter().map(|l| l.snr).collect();
    let ranking: Vec<String> = stable_rank(&snrs).into_iter().map(|i| layers[i].layer.clone()).collect();

    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for name in &ranking {
        groups.entry(cfg.grouping.key(name)).or_default().push(name.clone());
    }
    let mut chosen = std::collections::BTreeSet::new();
    for members in groups.values() {
        let k = (cfg.fraction * members.len() as f64).ceil() as usize;
        chosen.extend(members.iter().take(k.max(1)).cloned());
    }
    let selected = ranking.iter().filter(|n| chosen.contains(*n)).cloned().collect();
    let always_included = if cfg.include_1d {
        manifest
            .layers
            .iter()
            .filter(|l| l.matrix_shape().is_none())
            .map(|l| l.name.clone())
            .collect()
    } else {
        Vec::new()
    };
    Ok(SpectrumReport {
        fraction: cfg.fraction,
        sigma_policy: cfg.sigma,
        layers,
        ranking,
        groups,
        selected,
        excluded,
        always_included,
    })
}

/// Chunking of one selected layer into `k` equal pieces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub layer: String,
    pub length: usize,
    pub chunks: usize,
    pub chunk_length: usize,
}

pub fn plan_chunks(report: &SpectrumReport, weights: &FlatWeights, k: usize) -> Result<Vec<ChunkPlan>> {
    report
        .selected
        .iter()
        .map(|name| {
            let entry = weights
                .manifest()
                .layer(name)
                .ok_or_else(|| Error::layout(name, "not in manifest"))?;
            let chunk_length = codec::chunk_length_for(entry.length, k)?;
            Ok(ChunkPlan {
                layer: name.clone(),
                length: entry.length,
                chunks: entry.length.div_ceil(chunk_length),
                chunk_length,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LayoutManifest;
    use crate::nn;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn spectrum_unit_cases() {
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_close(&singular_spectrum(&eye, 3, 3).unwrap(), &[1.0, 1.0, 1.0], 1e-12);
        let diag = [0.5, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.2];
        assert_close(&singular_spectrum(&diag, 3, 3).unwrap(), &[3.0, 0.5, 0.2], 1e-6);
        assert!(matches!(
            singular_spectrum(&[1.0, f32::NAN], 1, 2),
            Err(Error::NonFinite(_))
        ));
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn spectrum_matches_gram_eigenvalues() {
        let mut rng = nn::rng(11);
        let w = nn::normal_vec(&mut rng, 50 * 20);
        let s = singular_spectrum(&w, 50, 20).unwrap();
        assert_eq!(s.len(), 20);
        let m = DMatrix::from_row_iterator(50, 20, w.iter().map(|&v| v as f64));
        let mut eig: Vec<f64> = SymmetricEigen::new(m.transpose() * &m)
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        assert_close(&s, &eig, 1e-8);
    }

    #[test]
    fn mp_bounds_unit_cases() {
        let b = mp_bounds(10, 10, 1.0);
        assert_eq!((b.lambda_minus, b.lambda_plus, b.eps_minus), (0.0, 4.0, 0.0));
        let b = mp_bounds(100, 400, 1.0);
        assert_eq!(b.q, 0.25);
        assert!((b.lambda_plus - 2.25).abs() < 1e-12);
        assert!((b.lambda_minus - 0.25).abs() < 1e-12);
        assert_eq!(mp_bounds(400, 100, 1.0), b);
        let d = mp_bounds(100, 400, 2.0);
        assert!((d.eps_plus - 2.0 * b.eps_plus).abs() < 1e-12);
        assert!((d.eps_minus - 2.0 * b.eps_minus).abs() < 1e-12);
    }

    #[test]
    fn snr_unit_cases() {
        assert!((snr_from_spectrum(&[3.0, 0.5, 0.2], 1.0) - 3.0 / 0.7).abs() < 1e-12);
        assert_eq!(snr_from_spectrum(&[0.3, 0.2], 1.0), 0.0);
        assert_eq!(snr_from_spectrum(&[3.0, 2.0], 1.0), f64::INFINITY);
        assert_eq!(snr_from_spectrum(&[0.0, 0.0], 0.0), 0.0);
    }

    #[test]
    fn gaussian_matrices_have_low_snr() {
        for seed in 0..20 {
            let w = nn::normal_vec(&mut nn::rng(seed), 200 * 200);
            let s = snr(&w, 200, 200, SigmaPolicy::EntryStd).unwrap();
            assert!(s < 0.1, "seed {seed}: snr {s}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn snr_is_scale_invariant(seed in 0u64..10_000, m in 2usize..20, n in 2usize..20, c in 0.01f32..100.0) {
            let w = nn::normal_vec(&mut nn::rng(seed), m * n);
            let scaled: Vec<f32> = w.iter().map(|v| v * c).collect();
            let a = snr(&w, m, n, SigmaPolicy::EntryStd).unwrap();
            let b = snr(&scaled, m, n, SigmaPolicy::EntryStd).unwrap();
            prop_assert!(a == b || (a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
        }

        #[test]
        fn spectrum_is_sorted_and_non_negative(seed in 0u64..10_000, m in 1usize..12, n in 1usize..12) {
            let w = nn::normal_vec(&mut nn::rng(seed), m * n);
            let s = singular_spectrum(&w, m, n).unwrap();
            prop_assert_eq!(s.len(), m.min(n));
            prop_assert!(s.windows(2).all(|p| p[0] >= p[1]));
            prop_assert!(s.iter().all(|&v| v >= 0.0));
        }
    }

    fn planted(seed: u64, layers: &[(&str, bool)], d: usize) -> FlatWeights {
        let mut b = LayoutManifest::builder("planted");
        for (name, _) in layers {
            b = b.fc(name, d, d, false);
        }
        b = b.fc("head", d, 2, true);
        let manifest = Arc::new(b.build());
        let mut rng = nn::rng(seed);
        let mut values = Vec::new();
        for (_, signal) in layers {
            let mut w = nn::normal_vec(&mut rng, d * d);
            if *signal {
                let u = nn::normal_vec(&mut rng, d);
                let v = nn::normal_vec(&mut rng, d);
                for i in 0..d {
                    for j in 0..d {
                        w[i * d + j] += 0.5 * u[i] * v[j];
                    }
                }
            }
            values.extend(w);
        }
        values.extend(nn::normal_vec(&mut rng, 2 * d + 2));
        FlatWeights::new(values, manifest).unwrap()
    }

    #[test]
    fn planted_signal_outranks_noise() {
        let cfg = SelectConfig {
            grouping: Grouping::Single,
            ..Default::default()
        };
        for seed in 0..20 {
            let w = planted(seed, &[("noise", false), ("signal", true)], 60);
            let r = rank_and_select(&w, &cfg).unwrap();
            assert_eq!(r.ranking, vec!["signal.weight", "noise.weight"]);
            assert_eq!(r.selected, vec!["signal.weight"]);
            assert_eq!(r.excluded, vec!["head.weight"]);
            assert_eq!(r.always_included, vec!["head.bias"]);
        }
    }

    #[test]
    fn full_fraction_and_ties() {
        let manifest = Arc::new(
            LayoutManifest::builder("ties")
                .fc("a", 3, 3, false)
                .fc("b", 3, 3, false)
                .fc("c", 3, 3, false)
                .build(),
        );
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let w = FlatWeights::new(eye.repeat(3), manifest).unwrap();
        let cfg = SelectConfig {
            fraction: 1.0,
            exclude_output: false,
            grouping: Grouping::Single,
            ..Default::default()
        };
        let r = rank_and_select(&w, &cfg).unwrap();
        assert_eq!(r.ranking, vec!["a.weight", "b.weight", "c.weight"]);
        assert_eq!(r.selected, r.ranking);
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let w = planted(5, &[("l0", false), ("l1", true), ("l2", false), ("l3", true)], 30);
        let r = rank_and_select(&w, &SelectConfig::default()).unwrap();
        let mut brute: Vec<(String, f64)> = ["l0.weight", "l1.weight", "l2.weight", "l3.weight"]
            .iter()
            .map(|n| (n.to_string(), snr(w.segment(n).unwrap(), 30, 30, SigmaPolicy::EntryStd).unwrap()))
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        assert_eq!(r.ranking, brute.into_iter().map(|(n, _)| n).collect::<Vec<_>>());
        assert_eq!(r.groups["l.weight"].len(), 4);
        assert_eq!(r.selected.len(), 1);
    }

    #[test]
    fn no_eligible_layers_is_error() {
        let manifest = Arc::new(LayoutManifest::builder("one").fc("head", 2, 2, false).build());
        let w = FlatWeights::new(vec![1.0; 4], manifest).unwrap();
        assert!(matches!(rank_and_select(&w, &SelectConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn report_json_round_trip_with_infinite_snr() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Arc::new(LayoutManifest::builder("x").fc("a", 3, 3, false).build());
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let w = FlatWeights::new(eye.to_vec(), manifest).unwrap();
        let cfg = SelectConfig {
            exclude_output: false,
            sigma: SigmaPolicy::Fixed(0.1),
            ..Default::default()
        };
        let r = rank_and_select(&w, &cfg).unwrap();
        assert_eq!(r.layers[0].snr, f64::INFINITY);
        let p = dir.path().join("r.json");
        r.write_json(&p).unwrap();
        assert_eq!(SpectrumReport::read_json(&p).unwrap(), r);
    }

    #[test]
    fn chunk_plans_cover_layers() {
        let w = planted(1, &[("l0", true)], 10);
        let r = rank_and_select(&w, &SelectConfig::default()).unwrap();
        let plans = plan_chunks(&r, &w, 3).unwrap();
        assert_eq!(plans[0].chunk_length, 34);
        assert_eq!(plans[0].chunks, 3);
    }
}

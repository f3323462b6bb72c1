//! Conversion between structured model parameters and flat, padded, optionally
//! chunked weight vectors.
//!
//! A [`LayoutManifest`] records the order, kind and shape of every parameter
//! tensor. [`flatten`] concatenates tensors in manifest order and zero-pads to
//! `d_max`; [`FlatWeights::devectorize`] inverts it bit-exactly. Layer-wise
//! encoding splits each layer into equal-length chunks with [`chunk`] and puts
//! them back together with [`reassemble`].

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Fc,
    Conv,
    Norm,
    Bias,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

impl LayerEntry {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.length
    }

    /// Two-dimensional view used for spectral analysis: fc weights as stored,
    /// conv kernels as `(c_out, c_in * k_h * k_w)`.
    pub fn matrix_shape(&self) -> Option<(usize, usize)> {
        match (self.kind, self.shape.as_slice()) {
            (LayerKind::Fc | LayerKind::Other, [m, n]) => Some((*m, *n)),
            (LayerKind::Conv, [c_out, rest @ ..]) if !rest.is_empty() => {
                Some((*c_out, rest.iter().product()))
            }
            _ => None,
        }
    }
}

/// Order, kind and shape of every parameter tensor of one architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutManifest {
    pub architecture_id: String,
    #[serde(rename = "d")]
    pub total_length: usize,
    #[serde(rename = "d_max")]
    pub padded_length: usize,
    pub layers: Vec<LayerEntry>,
}

impl LayoutManifest {
    pub fn builder(architecture_id: impl Into<String>) -> LayoutBuilder {
        LayoutBuilder {
            architecture_id: architecture_id.into(),
            layers: Vec::new(),
            cursor: 0,
        }
    }

    /// Same layout, padded to `d_max`.
    pub fn with_padding(mut self, d_max: usize) -> Result<Self> {
        if d_max < self.total_length {
            return Err(Error::Config(format!(
                "padded length {d_max} is shorter than the parameter count {}",
                self.total_length
            )));
        }
        self.padded_length = d_max;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0usize;
        for layer in &self.layers {
            if layer.shape.is_empty() || layer.shape.contains(&0) {
                return Err(Error::layout(&layer.name, "shape must be non-empty and positive"));
            }
            if layer.shape.iter().product::<usize>() != layer.length {
                return Err(Error::layout(&layer.name, "length does not match shape"));
            }
            if layer.offset != cursor {
                return Err(Error::layout(
                    &layer.name,
                    format!("offset {} is not contiguous (expected {cursor})", layer.offset),
                ));
            }
            cursor += layer.length;
        }
        if cursor != self.total_length {
            return Err(Error::Corrupt(format!(
                "layer lengths sum to {cursor} but d = {}",
                self.total_length
            )));
        }
        if self.total_length > self.padded_length {
            return Err(Error::Corrupt(format!(
                "d = {} exceeds d_max = {}",
                self.total_length, self.padded_length
            )));
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Number of values owned by a named tensor or by every tensor under the
    /// `name.` prefix (e.g. `fc1` covers `fc1.weight` and `fc1.bias`).
    pub fn segment_length(&self, name: &str) -> usize {
        let prefix = format!("{name}.");
        self.layers
            .iter()
            .filter(|l| l.name == name || l.name.starts_with(&prefix))
            .map(|l| l.length)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Self = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

pub struct LayoutBuilder {
    architecture_id: String,
    layers: Vec<LayerEntry>,
    cursor: usize,
}

impl LayoutBuilder {
    pub fn tensor(mut self, name: impl Into<String>, kind: LayerKind, shape: Vec<usize>) -> Self {
        let length = shape.iter().product();
        self.layers.push(LayerEntry {
            name: name.into(),
            kind,
            shape,
            offset: self.cursor,
            length,
        });
        self.cursor += length;
        self
    }

    /// Fully connected layer stored as `weight: [d_in, d_out]` then `bias: [d_out]`.
    pub fn fc(self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let b = self.tensor(format!("{name}.weight"), LayerKind::Fc, vec![d_in, d_out]);
        if bias {
            b.tensor(format!("{name}.bias"), LayerKind::Bias, vec![d_out])
        } else {
            b
        }
    }

    /// Convolution stored as `weight: [c_out, c_in, k_h, k_w]` then `bias: [c_out]`.
    pub fn conv(self, name: &str, k_h: usize, k_w: usize, c_in: usize, c_out: usize, bias: bool) -> Self {
        let b = self.tensor(format!("{name}.weight"), LayerKind::Conv, vec![c_out, c_in, k_h, k_w]);
        if bias {
            b.tensor(format!("{name}.bias"), LayerKind::Bias, vec![c_out])
        } else {
            b
        }
    }

    pub fn build(self) -> LayoutManifest {
        LayoutManifest {
            architecture_id: self.architecture_id,
            total_length: self.cursor,
            padded_length: self.cursor,
            layers: self.layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Structured parameters of one model, in layer order.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelParams {
    pub tensors: Vec<NamedTensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// A model's parameters as one zero-padded vector of length `d_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatWeights {
    values: Vec<f32>,
    manifest: Arc<LayoutManifest>,
}

pub fn flatten(params: &ModelParams, manifest: &Arc<LayoutManifest>) -> Result<FlatWeights> {
    manifest.validate()?;
    let mut values = vec![0f32; manifest.padded_length];
    for (i, layer) in manifest.layers.iter().enumerate() {
        let Some(tensor) = params.tensors.get(i) else {
            return Err(Error::layout(&layer.name, "missing from model parameters"));
        };
        if tensor.name != layer.name {
            return Err(Error::layout(
                &layer.name,
                format!("found tensor `{}` in its position", tensor.name),
            ));
        }
        if tensor.shape != layer.shape || tensor.values.len() != layer.length {
            return Err(Error::layout(
                &layer.name,
                format!("shape {:?} does not match manifest {:?}", tensor.shape, layer.shape),
            ));
        }
        values[layer.range()].copy_from_slice(&tensor.values);
    }
    if let Some(extra) = params.tensors.get(manifest.layers.len()) {
        return Err(Error::layout(&extra.name, "not present in manifest"));
    }
    Ok(FlatWeights {
        values,
        manifest: Arc::clone(manifest),
    })
}

impl FlatWeights {
    /// Strict constructor: length must equal `d_max` and the padding region must be zero.
    pub fn new(values: Vec<f32>, manifest: Arc<LayoutManifest>) -> Result<Self> {
        manifest.validate()?;
        if values.len() != manifest.padded_length {
            return Err(Error::Corrupt(format!(
                "vector has {} values, manifest expects d_max = {}",
                values.len(),
                manifest.padded_length
            )));
        }
        if values[manifest.total_length..].iter().any(|v| *v != 0.0) {
            return Err(Error::Corrupt("padding region is not zero".into()));
        }
        Ok(Self { values, manifest })
    }

    /// Builds weights from a generated vector: truncates to `d` and re-pads
    /// with zeros, so whatever a decoder wrote into the padding is discarded.
    pub fn from_decoded(values: &[f32], manifest: Arc<LayoutManifest>) -> Result<Self> {
        manifest.validate()?;
        let d = manifest.total_length;
        if values.len() < d {
            return Err(Error::Corrupt(format!(
                "decoded vector has {} values, fewer than d = {d}",
                values.len()
            )));
        }
        let mut out = vec![0f32; manifest.padded_length];
        out[..d].copy_from_slice(&values[..d]);
        Ok(Self { values: out, manifest })
    }

    pub fn zeros(manifest: Arc<LayoutManifest>) -> Self {
        Self {
            values: vec![0f32; manifest.padded_length],
            manifest,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The unpadded prefix of length `d`.
    pub fn active(&self) -> &[f32] {
        &self.values[..self.manifest.total_length]
    }

    pub fn manifest(&self) -> &Arc<LayoutManifest> {
        &self.manifest
    }

    pub fn segment(&self, name: &str) -> Result<&[f32]> {
        let layer = self
            .manifest
            .layer(name)
            .ok_or_else(|| Error::layout(name, "not in manifest"))?;
        Ok(&self.values[layer.range()])
    }

    pub fn replace_segment(&mut self, name: &str, values: &[f32]) -> Result<()> {
        let layer = self
            .manifest
            .layer(name)
            .ok_or_else(|| Error::layout(name, "not in manifest"))?;
        if values.len() != layer.length {
            return Err(Error::Dimension {
                context: "segment replacement",
                expected: layer.length,
                got: values.len(),
            });
        }
        let range = layer.range();
        self.values[range].copy_from_slice(values);
        Ok(())
    }

    pub fn devectorize(&self) -> Result<ModelParams> {
        let m = &self.manifest;
        if m.total_length > self.values.len() {
            return Err(Error::Corrupt(format!(
                "manifest d = {} exceeds vector length {}",
                m.total_length,
                self.values.len()
            )));
        }
        m.validate()?;
        if self.values[m.total_length..].iter().any(|v| *v != 0.0) {
            return Err(Error::Corrupt("padding region is not zero".into()));
        }
        let tensors = m
            .layers
            .iter()
            .map(|l| NamedTensor {
                name: l.name.clone(),
                shape: l.shape.clone(),
                values: self.values[l.range()].to_vec(),
            })
            .collect();
        Ok(ModelParams { tensors })
    }

    /// Writes the on-disk format: one JSON header line, then `d_max`
    /// little-endian f32 values.
    pub fn write(&self, path: &Path, provenance: Option<&serde_json::Value>) -> Result<()> {
        let header = FlatHeader {
            manifest: (*self.manifest).clone(),
            provenance: provenance.cloned(),
        };
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        buf.reserve(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<(Self, Option<serde_json::Value>)> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: FlatHeader = serde_json::from_str(line.trim_end())?;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let expected = header.manifest.padded_length * 4;
        if bytes.len() != expected {
            return Err(Error::Corrupt(format!(
                "{}: payload has {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let flat = Self::new(values, Arc::new(header.manifest))?;
        Ok((flat, header.provenance))
    }
}

#[derive(Serialize, Deserialize)]
struct FlatHeader {
    #[serde(flatten)]
    manifest: LayoutManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

/// Equal-length pieces of one flattened segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkSet {
    pub chunk_length: usize,
    pub chunks: Vec<Vec<f32>>,
    pub chunk_indices: Vec<usize>,
    pub source_length: usize,
    pub source_layer: Option<String>,
}

/// Chunk length that splits `mn` values into `k` chunks.
pub fn chunk_length_for(mn: usize, k: usize) -> Result<usize> {
    if k == 0 || mn == 0 {
        return Err(Error::Config("chunk count and segment length must be positive".into()));
    }
    Ok(mn.div_ceil(k))
}

pub fn chunk(segment: &[f32], chunk_length: usize) -> Result<ChunkSet> {
    if chunk_length == 0 {
        return Err(Error::Config("chunk length must be positive".into()));
    }
    if segment.is_empty() {
        return Err(Error::Empty("cannot chunk an empty segment".into()));
    }
    let chunks: Vec<Vec<f32>> = segment
        .chunks(chunk_length)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(chunk_length, 0.0);
            v
        })
        .collect();
    Ok(ChunkSet {
        chunk_length,
        chunk_indices: (0..chunks.len()).collect(),
        chunks,
        source_length: segment.len(),
        source_layer: None,
    })
}

pub fn reassemble(set: &ChunkSet) -> Result<Vec<f32>> {
    if set.chunks.len() != set.chunk_indices.len() {
        return Err(Error::Corrupt("chunk and index counts differ".into()));
    }
    if let Some(bad) = set.chunks.iter().find(|c| c.len() != set.chunk_length) {
        return Err(Error::Dimension {
            context: "chunk",
            expected: set.chunk_length,
            got: bad.len(),
        });
    }
    let mut order: Vec<usize> = (0..set.chunks.len()).collect();
    order.sort_by_key(|&i| set.chunk_indices[i]);
    for (expected, &i) in order.iter().enumerate() {
        if set.chunk_indices[i] != expected {
            return Err(Error::IncompleteChunks { missing: expected });
        }
    }
    let k = set.chunks.len();
    if k * set.chunk_length < set.source_length {
        return Err(Error::IncompleteChunks { missing: k });
    }
    let mut out = Vec::with_capacity(k * set.chunk_length);
    for i in order {
        out.extend_from_slice(&set.chunks[i]);
    }
    out.truncate(set.source_length);
    Ok(out)
}

/// Layer-wise mode: every manifest tensor chunked separately, keyed by
/// `(layer name, chunk index)`.
pub fn layer_chunks(flat: &FlatWeights, chunk_length: usize) -> Result<Vec<ChunkSet>> {
    flat.manifest
        .layers
        .iter()
        .map(|l| {
            let mut set = chunk(&flat.values[l.range()], chunk_length)?;
            set.source_layer = Some(l.name.clone());
            Ok(set)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_manifest() -> Arc<LayoutManifest> {
        Arc::new(
            LayoutManifest::builder("mlp-2-3-2")
                .fc("fc1", 2, 3, true)
                .fc("fc2", 3, 2, true)
                .build(),
        )
    }

    fn params_for(m: &LayoutManifest) -> ModelParams {
        ModelParams {
            tensors: m
                .layers
                .iter()
                .map(|l| NamedTensor {
                    name: l.name.clone(),
                    shape: l.shape.clone(),
                    values: (0..l.length).map(|i| (l.offset + i) as f32 * 0.25 - 1.0).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn fc_segment_length() {
        let m = LayoutManifest::builder("fc").fc("fc", 2, 3, true).build();
        assert_eq!(m.segment_length("fc"), 9);
        assert_eq!(m.total_length, 9);
    }

    #[test]
    fn conv_segment_length() {
        let m = LayoutManifest::builder("conv").conv("conv", 3, 3, 2, 4, true).build();
        assert_eq!(m.segment_length("conv"), 76);
    }

    #[test]
    fn no_padding_when_d_equals_d_max() {
        let m = mlp_manifest();
        let flat = flatten(&params_for(&m), &m).unwrap();
        assert_eq!(flat.values().len(), m.total_length);
        assert_eq!(flat.active().len(), flat.values().len());
    }

    #[test]
    fn padding_region_is_zero() {
        let m = Arc::new((*mlp_manifest()).clone().with_padding(32).unwrap());
        let flat = flatten(&params_for(&m), &m).unwrap();
        assert_eq!(flat.values().len(), 32);
        assert!(flat.values()[m.total_length..].iter().all(|v| *v == 0.0));
        assert_eq!(flat.devectorize().unwrap(), params_for(&m));
    }

    #[test]
    fn shape_mismatch_names_first_offending_layer() {
        let m = mlp_manifest();
        let mut p = params_for(&m);
        p.tensors[2].shape = vec![2, 3];
        match flatten(&p, &m) {
            Err(Error::Layout { layer, .. }) => assert_eq!(layer, "fc2.weight"),
            other => panic!("expected layout error, got {other:?}"),
        }
    }

    #[test]
    fn nonzero_padding_is_rejected() {
        let m = Arc::new((*mlp_manifest()).clone().with_padding(20).unwrap());
        let mut values = vec![0.0; 20];
        values[19] = 1.0;
        assert!(matches!(FlatWeights::new(values, m), Err(Error::Corrupt(_))));
    }

    #[test]
    fn manifest_longer_than_vector_is_corruption() {
        let m = mlp_manifest();
        let flat = FlatWeights {
            values: vec![0.0; 3],
            manifest: m,
        };
        assert!(matches!(flat.devectorize(), Err(Error::Corrupt(_))));
    }

    #[test]
    fn bias_only_model() {
        let m = Arc::new(
            LayoutManifest::builder("bias")
                .tensor("b", LayerKind::Bias, vec![2])
                .build(),
        );
        let flat = FlatWeights::new(vec![0.5, -1.0], m).unwrap();
        let p = flat.devectorize().unwrap();
        assert_eq!(p.tensors[0].values, vec![0.5, -1.0]);
    }

    #[test]
    fn from_decoded_discards_padding() {
        let m = Arc::new((*mlp_manifest()).clone().with_padding(24).unwrap());
        let decoded = vec![1.0f32; 24];
        let flat = FlatWeights::from_decoded(&decoded, m.clone()).unwrap();
        assert!(flat.values()[m.total_length..].iter().all(|v| *v == 0.0));
        assert!(flat.devectorize().is_ok());
    }

    #[test]
    fn chunk_pads_last_chunk() {
        let v: Vec<f32> = (1..=10).map(|i| i as f32).collect();
        let set = chunk(&v, 4).unwrap();
        assert_eq!(set.chunks.len(), 3);
        assert_eq!(set.chunks[2], vec![9.0, 10.0, 0.0, 0.0]);
        assert_eq!(set.chunk_indices, vec![0, 1, 2]);
        assert_eq!(reassemble(&set).unwrap(), v);
    }

    #[test]
    fn single_chunk_is_identity() {
        let v = vec![3.0f32, -2.0, 7.5];
        let set = chunk(&v, 3).unwrap();
        assert_eq!(set.chunks.len(), 1);
        assert_eq!(reassemble(&set).unwrap(), v);
    }

    #[test]
    fn large_single_chunk() {
        let mn = 2_097_152;
        assert_eq!(chunk_length_for(mn, 1).unwrap(), mn);
        let v = vec![0.5f32; mn];
        assert_eq!(chunk(&v, mn).unwrap().chunks.len(), 1);
    }

    #[test]
    fn out_of_order_chunks_reassemble() {
        let v: Vec<f32> = (0..9).map(|i| i as f32).collect();
        let mut set = chunk(&v, 2).unwrap();
        set.chunks.reverse();
        set.chunk_indices.reverse();
        assert_eq!(reassemble(&set).unwrap(), v);
    }

    #[test]
    fn missing_chunk_is_reported() {
        let v: Vec<f32> = (0..9).map(|i| i as f32).collect();
        let mut set = chunk(&v, 2).unwrap();
        set.chunks.remove(1);
        set.chunk_indices.remove(1);
        assert!(matches!(reassemble(&set), Err(Error::IncompleteChunks { missing: 1 })));
    }

    #[test]
    fn empty_segment_and_zero_length_rejected() {
        assert!(matches!(chunk(&[], 4), Err(Error::Empty(_))));
        assert!(chunk(&[1.0], 0).is_err());
    }

    #[test]
    fn layer_chunks_are_keyed_by_layer() {
        let m = mlp_manifest();
        let flat = flatten(&params_for(&m), &m).unwrap();
        let sets = layer_chunks(&flat, 4).unwrap();
        assert_eq!(sets.len(), 4);
        assert_eq!(sets[0].source_layer.as_deref(), Some("fc1.weight"));
        assert_eq!(reassemble(&sets[2]).unwrap(), flat.segment("fc2.weight").unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Arc::new((*mlp_manifest()).clone().with_padding(20).unwrap());
        let flat = flatten(&params_for(&m), &m).unwrap();
        let path = dir.path().join("w.bin");
        let prov = serde_json::json!({"source": "test"});
        flat.write(&path, Some(&prov)).unwrap();
        let (back, p) = FlatWeights::read(&path).unwrap();
        assert_eq!(back, flat);
        assert_eq!(p, Some(prov));
        let header = std::fs::read(&path).unwrap();
        let newline = header.iter().position(|b| *b == b'\n').unwrap();
        let json: serde_json::Value = serde_json::from_slice(&header[..newline]).unwrap();
        assert_eq!(json["d"], 17);
        assert_eq!(json["d_max"], 20);
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = mlp_manifest();
        assert_eq!(LayoutManifest::from_json(&m.to_json().unwrap()).unwrap(), *m);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn chunk_round_trip(v in prop::collection::vec(-1e3f32..1e3, 1..64), extra in 0usize..4) {
                for l in 1..=v.len() + extra {
                    let set = chunk(&v, l).unwrap();
                    prop_assert!(set.chunks.len() * l >= v.len());
                    prop_assert_eq!(reassemble(&set).unwrap(), v.clone());
                }
            }

            #[test]
            fn flatten_is_stable_and_invertible(dims in prop::collection::vec(1usize..6, 2..5), pad in 0usize..5) {
                let mut b = LayoutManifest::builder("p");
                for (i, w) in dims.windows(2).enumerate() {
                    b = b.fc(&format!("l{i}"), w[0], w[1], i % 2 == 0);
                }
                let base = b.build();
                let d = base.total_length;
                let m = Arc::new(base.with_padding(d + pad).unwrap());
                let p = params_for(&m);
                let a = flatten(&p, &m).unwrap();
                let b2 = flatten(&p, &m).unwrap();
                prop_assert_eq!(a.values(), b2.values());
                prop_assert_eq!(a.devectorize().unwrap(), p);
            }
        }
    }
}

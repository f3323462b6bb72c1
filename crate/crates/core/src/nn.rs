//! Parameter storage, seeded initialization, checkpoint blobs and weight EMA
//! shared by every trainable component.
//!
//! Candle's CPU device cannot be seeded, so every random tensor in the crate
//! is drawn from a ChaCha stream and uploaded with [`tensor`].

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEVICE: Device = Device::Cpu;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Seed for a named substream of a root seed.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn tensor(values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &DEVICE)?)
}

pub fn to_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let t = t.flatten_from(1)?;
    Ok(t.to_vec2::<f32>()?)
}

pub fn scalar(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(DType::F32)?.to_scalar::<f32>()?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Named trainable variables in creation order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let var = Var::from_tensor(&tensor(values, shape)?)?;
        let t = var.as_tensor().clone();
        self.entries.push((name.into(), var));
        Ok(t)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f32, rng: &mut impl Rng) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, values, shape)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f32, rng: &mut impl Rng) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = normal_vec(rng, n).into_iter().map(|v| v * std).collect();
        self.add(name, values, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.add(name, vec![value; n], shape)
    }

    /// `y = x Wᵀ + b` with `W: (d_out, d_in)`, uniform ±1/√d_in init.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Linear> {
        let bound = 1.0 / (d_in as f32).sqrt();
        let w = self.uniform(format!("{name}.weight"), &[d_out, d_in], bound, rng)?;
        let b = self.uniform(format!("{name}.bias"), &[d_out], bound, rng)?;
        Ok(Linear::new(w, Some(b)))
    }

    /// Linear layer with all-zero weights and bias.
    pub fn linear_zeros(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        let w = self.constant(format!("{name}.weight"), &[d_out, d_in], 0.0)?;
        let b = self.constant(format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        cfg: Conv2dConfig,
        rng: &mut impl Rng,
    ) -> Result<Conv2d> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f32).sqrt();
        let w = self.uniform(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound, rng)?;
        let b = self.uniform(format!("{name}.bias"), &[c_out], bound, rng)?;
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    /// Registers an existing variable; storage stays shared with the caller.
    pub fn push(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    /// A store sharing every variable of `self`.
    pub fn share(&self) -> ParamStore {
        ParamStore {
            entries: self.entries.clone(),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn tensor_table(&self) -> Vec<TensorInfo> {
        self.entries
            .iter()
            .map(|(n, v)| TensorInfo {
                name: n.clone(),
                shape: v.dims().to_vec(),
            })
            .collect()
    }

    /// Deep copy of every variable.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().copy()?))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::Dimension {
                context: "parameter snapshot",
                expected: self.entries.len(),
                got: snapshot.len(),
            });
        }
        for ((_, var), t) in self.entries.iter().zip(snapshot) {
            var.set(t)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for (_, v) in &self.entries {
            if to_vec(v.as_tensor())?.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Concatenated little-endian f32 values in table order.
    pub fn write_blob(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.num_params() * 4);
        for (_, v) in &self.entries {
            for x in to_vec(v.as_tensor())? {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Loads a blob written by [`ParamStore::write_blob`] into a store with the
    /// same tensor table.
    pub fn read_blob(&self, path: &Path, table: &[TensorInfo]) -> Result<()> {
        if table != self.tensor_table().as_slice() {
            return Err(Error::Corrupt(format!(
                "{}: tensor table does not match the model",
                path.display()
            )));
        }
        let bytes = fs::read(path)?;
        if bytes.len() != self.num_params() * 4 {
            return Err(Error::Corrupt(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                self.num_params() * 4,
                bytes.len()
            )));
        }
        let mut cursor = 0;
        for (_, var) in &self.entries {
            let n = var.elem_count();
            let values: Vec<f32> = bytes[cursor..cursor + n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            var.set(&tensor(values, var.dims())?)?;
            cursor += n * 4;
        }
        Ok(())
    }
}

/// Exponential moving average of parameters with the usual warm-up,
/// `decay_t = min(decay, (1 + t) / (10 + t))`.
pub struct Ema {
    decay: f64,
    updates: usize,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f64) -> Result<Self> {
        Ok(Self {
            decay,
            updates: 0,
            shadow: store.snapshot()?,
        })
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        self.updates += 1;
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for (s, (_, var)) in self.shadow.iter_mut().zip(&store.entries) {
            *s = ((&*s * d)? + (var.as_tensor().detach() * (1.0 - d))?)?.detach();
        }
        Ok(())
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.linear("l", 4, 3, &mut rng(7)).unwrap();
        b.linear("l", 4, 3, &mut rng(7)).unwrap();
        for (x, y) in a.snapshot().unwrap().iter().zip(b.snapshot().unwrap().iter()) {
            assert_eq!(to_vec(x).unwrap(), to_vec(y).unwrap());
        }
    }

    #[test]
    fn derived_seeds_differ_by_name() {
        assert_ne!(derive_seed(1, "vae"), derive_seed(1, "zoo"));
        assert_eq!(derive_seed(1, "vae"), derive_seed(1, "vae"));
    }

    #[test]
    fn blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.linear("l", 5, 2, &mut rng(1)).unwrap();
        let path = dir.path().join("p.bin");
        a.write_blob(&path).unwrap();
        let mut b = ParamStore::new();
        b.linear("l", 5, 2, &mut rng(2)).unwrap();
        b.read_blob(&path, &a.tensor_table()).unwrap();
        for (x, y) in a.snapshot().unwrap().iter().zip(b.snapshot().unwrap().iter()) {
            assert_eq!(to_vec(x).unwrap(), to_vec(y).unwrap());
        }
    }

    #[test]
    fn ema_tracks_constant_parameters() {
        let mut s = ParamStore::new();
        s.constant("c", &[3], 2.0).unwrap();
        let mut ema = Ema::new(&s, 0.999).unwrap();
        for _ in 0..5 {
            ema.update(&s).unwrap();
        }
        for v in to_vec(&ema.weights()[0]).unwrap() {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }
}

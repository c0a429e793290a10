//! Named parameter storage with seeded initialization.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

struct Entry {
    var: Var,
    trainable: bool,
}

/// All tensors of a network, keyed by dotted name. Iteration order is the
/// lexicographic name order, which keeps initialization, gradient-norm sums
/// and checkpoints reproducible.
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            entries: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.entries.insert(name.to_string(), Entry { var, trainable });
        Ok(out)
    }

    /// Gaussian weights with standard deviation `sqrt(2 / fan_in)`.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let dist = Normal::new(0.0f64, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(v, shape, &self.device)?;
        self.insert(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<Tensor> {
        let t = Tensor::full(value, shape, &self.device)?;
        self.insert(name, t, trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trainable variables whose names start with none of `exclude`.
    pub fn trainable_vars(&self, exclude: &[&str]) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|(name, e)| e.trainable && !exclude.iter().any(|p| name.starts_with(p)))
            .map(|(_, e)| e.var.clone())
            .collect()
    }

    /// Number of trainable scalars under `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(name, e)| e.trainable && name.starts_with(prefix))
            .map(|(_, e)| e.var.elem_count())
            .sum()
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_tensor().clone()))
            .collect()
    }

    /// Overwrite values from `source`. With `strict`, every stored name must be
    /// present; names unknown to the store are always an error.
    pub fn load(&self, source: &HashMap<String, Tensor>, strict: bool) -> Result<()> {
        for name in source.keys() {
            if !self.entries.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        for (name, e) in &self.entries {
            match source.get(name) {
                Some(t) => {
                    if t.dims() != e.var.dims() {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{name}` has shape {:?}, expected {:?}",
                            t.dims(),
                            e.var.dims()
                        )));
                    }
                    e.var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
                }
                None if strict => {
                    return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
                }
                None => {}
            }
        }
        Ok(())
    }
}

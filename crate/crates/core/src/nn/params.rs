//! Named, seeded parameter storage.
//!
//! Every parameter draws its initial values from a ChaCha stream keyed by the
//! store seed and the parameter's full name, so model construction is
//! reproducible regardless of the order layers are built in.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
    /// He-normal for ReLU networks.
    Kaiming { fan_in: usize },
}

impl Init {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Const(v) => vec![v; n],
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Uniform { bound } => {
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                Init::Normal { std }.sample(n, rng)
            }
        }
    }
}

#[derive(Default)]
struct Inner {
    vars: BTreeMap<String, Var>,
    buffers: BTreeSet<String>,
}

/// Shared handle to a model's parameters and non-trainable buffers.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::default(),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn get_or_create(&self, name: String, shape: &[usize], init: Init, buffer: bool) -> Result<Var> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if let Some(v) = inner.vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name}: {shape:?}"),
                    actual: format!("{:?}", v.dims()),
                });
            }
            return Ok(v.clone());
        }
        let n: usize = shape.iter().product();
        let data = init.sample(n, &mut self.rng_for(&name));
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.vars.insert(name.clone(), var.clone());
        if buffer {
            inner.buffers.insert(name);
        }
        Ok(var)
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .filter(|(k, _)| !inner.buffers.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Snapshot of every parameter and buffer.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites existing entries from `tensors`. Every entry in the store must be present.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().expect("param store poisoned");
        for (name, var) in &inner.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self
            .store
            .get_or_create(self.full(name), shape, init, false)?
            .as_tensor()
            .clone())
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.get_or_create(self.full(name), shape, init, true)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values_regardless_of_order() {
        let a = ParamStore::new(7, DType::F32);
        let b = ParamStore::new(7, DType::F32);
        let init = Init::Normal { std: 1.0 };
        let a1 = a.root().pp("x").param("w", &[4], init).unwrap();
        let a2 = a.root().pp("y").param("w", &[4], init).unwrap();
        let b2 = b.root().pp("y").param("w", &[4], init).unwrap();
        let b1 = b.root().pp("x").param("w", &[4], init).unwrap();
        assert_eq!(a1.to_vec1::<f32>().unwrap(), b1.to_vec1::<f32>().unwrap());
        assert_eq!(a2.to_vec1::<f32>().unwrap(), b2.to_vec1::<f32>().unwrap());
        assert_ne!(a1.to_vec1::<f32>().unwrap(), a2.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn buffers_are_not_trainable() {
        let s = ParamStore::new(0, DType::F32);
        s.root().param("w", &[2], Init::Const(1.0)).unwrap();
        s.root().buffer("running", &[2], Init::Const(0.0)).unwrap();
        let names: Vec<_> = s.trainable().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["w".to_string()]);
        assert_eq!(s.tensors().len(), 2);
    }
}

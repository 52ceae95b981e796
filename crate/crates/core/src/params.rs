//! Named, seeded parameter storage.
//!
//! Candle's own variable map draws initial values from an unseeded RNG, which
//! breaks run-to-run reproducibility; this store owns a ChaCha stream instead.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&mut self) -> Init<'_> {
        Init {
            store: self,
            prefix: String::new(),
        }
    }

    fn insert(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Variables keyed by `prefix` + name, in name order.
    pub fn named_vars(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter, keyed by `prefix` + name.
    pub fn tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_detached_tensor()))
            .collect()
    }

    /// Overwrites parameter values in place from `tensors[prefix + name]`.
    /// Every parameter must be present with a matching shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let src = tensors
                .get(&key)
                .ok_or_else(|| Error::Config(format!("missing parameter {key}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {key}: stored {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Copies values from another store with identical names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load(&other.tensors(""), "")
    }

    /// SHA-256 over names and raw values, for freeze checks and run manifests.
    pub fn checksum(&self) -> Result<String> {
        checksum_tensors(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }
}

/// SHA-256 over `(name, tensor)` pairs in the given order, values widened to f64.
pub fn checksum_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        for x in t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
            h.update(x.to_le_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Scoped parameter builder; names are joined with `.`.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Init<'_> {
    pub fn push(&mut self, name: &str) -> Init<'_> {
        Init {
            prefix: self.key(name),
            store: self.store,
        }
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.store.rng.random_range(-bound..=bound))
            .collect();
        let key = self.key(name);
        self.store.insert(key, data, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.store.rng);
                z * std
            })
            .collect();
        let key = self.key(name);
        self.store.insert(key, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let key = self.key(name);
        self.store.insert(key, vec![value; n], shape)
    }
}

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Every trainable tensor of a model, keyed by module path. Iteration order
/// is the lexicographic path order, which fixes the layout of optimizer state
/// and checkpoints.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a new parameter initialized uniformly in `[-bound, bound]`.
    pub fn uniform<S: Into<Shape>>(&mut self, path: &str, shape: S, bound: f64) -> Result<Tensor> {
        if self.vars.contains_key(path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        let shape = shape.into();
        let dist =
            Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..shape.elem_count())
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(path.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, path: &str) -> Option<&Var> {
        self.vars.get(path)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameter values in place; every stored path must be present
    /// with the same shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (path, var) in &self.vars {
            let t = tensors
                .get(path)
                .ok_or_else(|| Error::Shape(format!("missing parameter {path}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {path}: stored {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }
}

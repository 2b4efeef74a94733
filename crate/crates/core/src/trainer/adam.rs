use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::ParamStore;

/// Adam with bias correction. The moment estimates are exposed so they can be
/// checkpointed and restored exactly.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (path, var) in params.vars() {
            m.insert(path.clone(), var.as_tensor().zeros_like()?.detach());
            v.insert(path.clone(), var.as_tensor().zeros_like()?.detach());
        }
        Ok(Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m,
            v,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.m
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.v
    }

    /// Replaces the optimizer state; shapes must match the current one.
    pub fn restore(
        &mut self,
        steps: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, new, old) in [("first", &m, &self.m), ("second", &v, &self.v)] {
            if new.len() != old.len() {
                return Err(Error::Shape(format!(
                    "{name} moments hold {} tensors, optimizer has {}",
                    new.len(),
                    old.len()
                )));
            }
            for (path, t) in old {
                match new.get(path) {
                    Some(n) if n.dims() == t.dims() => {}
                    _ => {
                        return Err(Error::Shape(format!(
                            "{name} moment for {path} missing or misshaped"
                        )))
                    }
                }
            }
        }
        self.steps = steps;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (path, var) in params.vars() {
            let theta = var.as_tensor();
            let g = match grads.get(theta) {
                Some(g) => g.clone(),
                None => theta.zeros_like()?,
            };
            let m = self.m.get_mut(path).expect("moments cover every parameter");
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = self.v.get_mut(path).expect("moments cover every parameter");
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&*v / c2)?.sqrt()? + self.eps)?;
            let update = ((&*m / c1)? / denom)?;
            var.set(&(theta.detach() - (update * lr)?)?)?;
        }
        Ok(())
    }
}

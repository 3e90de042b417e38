use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// Adam with bias correction. Moment estimates are exported for checkpoints.
pub struct Adam {
    vars: Vec<(String, Var)>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, lr: f64) -> Self {
        Self {
            vars,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var) else { continue };
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn state(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut out = BTreeMap::new();
        for (k, v) in &self.first {
            out.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("v.{k}"), v.clone());
        }
        (self.step, out)
    }

    pub fn load_state(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("m.") {
                self.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.second.insert(name.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{k}`")));
            }
        }
        Ok(())
    }
}

/// Sums gradients from several backward passes (gradient accumulation).
pub fn accumulate(into: &mut Option<GradStore>, next: GradStore, vars: &[(String, Var)]) -> Result<()> {
    match into {
        None => *into = Some(next),
        Some(acc) => {
            for (_, var) in vars {
                if let Some(g) = next.get(var) {
                    let sum = match acc.get(var) {
                        Some(a) => (a + g)?,
                        None => g.clone(),
                    };
                    acc.insert(var, sum);
                }
            }
        }
    }
    Ok(())
}

use std::collections::BTreeMap;

use super::graph::Gradients;
use super::tensor::ParameterSet;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Gradients for
    /// paths absent from `params` are an error; parameters without a
    /// gradient are left untouched. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        for (path, g) in &grads.0 {
            let t = params.get(path)?;
            if t.values.len() != g.len() {
                return Err(Error::shape(format!("gradient for {path} has {} values, expected {}", g.len(), t.values.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(path.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (path, g) in &grads.0 {
            let tensor = params.get_mut(path).expect("checked above");
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                tensor.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Functional form: a fresh optimizer state applied once.
pub fn adam_step(params: &ParameterSet, grads: &Gradients, lr: f64) -> Result<ParameterSet> {
    let mut out = params.clone();
    Adam::new(lr).step(&mut out, grads)?;
    Ok(out)
}

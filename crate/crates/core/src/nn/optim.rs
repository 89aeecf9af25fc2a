use serde::{Deserialize, Serialize};

use super::checkpoint::{NamedTensor, TensorStore};
use super::params::Parameters;
use crate::error::{ensure, Error, Result};

/// Gradient descent state. `momentum == 0` is plain SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, 0.0)
    }

    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        ensure!(learning_rate > 0.0 && learning_rate.is_finite(), Validation, "learning rate must be positive, got {learning_rate}");
        ensure!((0.0..1.0).contains(&momentum), Validation, "momentum must be in [0, 1), got {momentum}");
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
            step: 0,
        })
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor::scalar(format!("{prefix}.step"), self.step as f64)];
        for (i, v) in self.velocity.iter().enumerate() {
            out.push(NamedTensor::new(format!("{prefix}.velocity.{i}"), vec![v.len()], v.clone()));
        }
        out
    }

    pub fn load_tensors(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        self.step = store.expect(&format!("{prefix}.step"), &[1])?.values[0] as u64;
        self.velocity.clear();
        let mut i = 0;
        while let Some(t) = store.get(&format!("{prefix}.velocity.{i}")) {
            self.velocity.push(t.values.clone());
            i += 1;
        }
        Ok(())
    }
}

/// `w <- w - lr * v` with `v <- momentum * v + g`.
///
/// Gradients are checked for finiteness before any parameter is touched.
pub fn optimizer_step<P: Parameters>(params: &mut P, grads: &P, state: &mut OptimizerState) -> Result<()> {
    let grad_slices = grads.slices();
    let mut param_slices = params.slices_mut();
    ensure!(
        grad_slices.len() == param_slices.len()
            && grad_slices.iter().zip(&param_slices).all(|(g, p)| g.len() == p.len()),
        Shape,
        "gradient set is not congruent with parameters"
    );
    for (ti, g) in grad_slices.iter().enumerate() {
        if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {v} at tensor {ti}, element {i} (optimizer step {})",
                state.step
            )));
        }
    }
    let use_momentum = state.momentum > 0.0;
    if use_momentum && state.velocity.is_empty() {
        state.velocity = grad_slices.iter().map(|g| vec![0.0; g.len()]).collect();
    }
    for (ti, (p, g)) in param_slices.iter_mut().zip(&grad_slices).enumerate() {
        if use_momentum {
            let v = &mut state.velocity[ti];
            ensure!(v.len() == g.len(), Shape, "optimizer velocity does not match tensor {ti}");
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = state.momentum * *vi + gi;
                *pi -= state.learning_rate * *vi;
            }
        } else {
            for (pi, gi) in p.iter_mut().zip(g.iter()) {
                *pi -= state.learning_rate * gi;
            }
        }
    }
    state.step += 1;
    Ok(())
}

/// Piecewise-constant learning rate: `(epochs, lr)` phases run in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub phases: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            phases: vec![(30, 1e-3), (120, 1e-4)],
        }
    }
}

impl LrSchedule {
    pub fn constant(epochs: usize, lr: f64) -> Self {
        Self { phases: vec![(epochs, lr)] }
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.0).sum()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for &(n, lr) in &self.phases {
            end += n;
            if epoch < end {
                return lr;
            }
        }
        self.phases.last().map(|p| p.1).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.phases.is_empty(), Validation, "learning-rate schedule is empty");
        ensure!(
            self.phases.iter().all(|&(_, lr)| lr > 0.0 && lr.is_finite()),
            Validation,
            "learning rates must be positive"
        );
        Ok(())
    }
}

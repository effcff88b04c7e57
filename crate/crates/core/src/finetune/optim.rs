use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Module;
use crate::numerics::{Matrix, Parameter};

/// Adam with bias-corrected moments. State is keyed by parameter name and
/// only ever created for trainable parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    /// Advances the step counter; call once before the per-parameter updates
    /// of one optimization step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies the update to one parameter. Frozen parameters are skipped.
    pub fn update(&mut self, p: &mut Parameter) -> Result<()> {
        if !p.trainable {
            return Ok(());
        }
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
        let t = self.step.max(1) as i32;
        let (m, v) = self
            .state
            .entry(p.name.clone())
            .or_insert_with(|| (Matrix::zeros(p.value.rows(), p.value.cols()), Matrix::zeros(p.value.rows(), p.value.cols())));
        if m.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "adam state",
                left: m.shape(),
                right: p.value.shape(),
            });
        }
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let g = p.grad.as_slice();
        let w = p.value.as_mut_slice();
        for (((wi, gi), mi), vi) in w.iter_mut().zip(g).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *wi -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// One optimization step over every trainable parameter of `module`.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        self.begin_step();
        let mut status = Ok(());
        module.visit_mut(&mut |p| {
            if status.is_ok() {
                status = self.update(p);
            }
        });
        status
    }
}

/// Single Adam step over an explicit parameter list.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut Adam) -> Result<()> {
    state.begin_step();
    for p in params.iter_mut() {
        state.update(p)?;
    }
    Ok(())
}

use crate::error::{Error, Result};
use crate::model::{Linear, Module};
use crate::numerics::{Matrix, Parameter, Rng, Tape, Var};

/// `Linear → BatchNorm → GELU → Dropout → Linear` over pooled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub norm_gain: Parameter,
    pub norm_bias: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub dropout: f64,
    pub out: Linear,
}

impl ClassifierHead {
    pub fn new(d: usize, d_head: usize, n_classes: usize, dropout: f64, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new("head.hidden", d, d_head, true, rng),
            norm_gain: Parameter::new("head.norm.gain", Matrix::filled(1, d_head, 1.0)),
            norm_bias: Parameter::new("head.norm.bias", Matrix::zeros(1, d_head)),
            running_mean: vec![0.0; d_head],
            running_var: vec![1.0; d_head],
            momentum: 0.1,
            eps: 1e-5,
            dropout,
            out: Linear::new("head.out", d_head, n_classes, true, rng),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.out.shape().1
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.shape().0
    }

    /// Training-mode forward: batch statistics (layer-norm fallback for a
    /// single row), running averages updated, dropout drawn from `rng`.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var, rng: &mut Rng) -> Result<Var> {
        self.check_input(tape, x)?;
        let h = self.hidden.forward(tape, x)?;
        let g = tape.param(&self.norm_gain)?;
        let b = tape.param(&self.norm_bias)?;
        let h = if tape.value(h).rows() == 1 {
            tape.layer_norm(h, g, b, self.eps)?
        } else {
            let n = tape.value(h).rows() as f64;
            let (out, means, vars) = tape.batch_norm(h, g, b, self.eps)?;
            let m = self.momentum;
            for (j, (mu, var)) in means.iter().zip(&vars).enumerate() {
                self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mu;
                self.running_var[j] = (1.0 - m) * self.running_var[j] + m * var * n / (n - 1.0);
            }
            out
        };
        let mut h = tape.gelu(h)?;
        if self.dropout > 0.0 {
            let keep = 1.0 - self.dropout;
            let (r, c) = tape.value(h).shape();
            let mask = Matrix::from_fn(r, c, |_, _| if rng.uniform() < keep { 1.0 / keep } else { 0.0 });
            let mask = tape.constant(mask)?;
            h = tape.mul(h, mask)?;
        }
        self.out.forward(tape, h)
    }

    /// Evaluation-mode forward: running statistics, no dropout.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let h = self.hidden.forward(tape, x)?;
        let shift = Matrix::from_fn(1, self.running_mean.len(), |_, j| -self.running_mean[j]);
        let inv = Matrix::from_fn(1, self.running_var.len(), |_, j| 1.0 / (self.running_var[j] + self.eps).sqrt());
        let shift = tape.constant(shift)?;
        let inv = tape.constant(inv)?;
        let h = tape.add_row(h, shift)?;
        let h = tape.mul_row(h, inv)?;
        let g = tape.param(&self.norm_gain)?;
        let b = tape.param(&self.norm_bias)?;
        let h = tape.mul_row(h, g)?;
        let h = tape.add_row(h, b)?;
        let h = tape.gelu(h)?;
        self.out.forward(tape, h)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.1 != self.input_dim() {
            return Err(Error::Shape {
                op: "classifier head",
                left: shape,
                right: self.hidden.shape(),
            });
        }
        Ok(())
    }
}

impl Module for ClassifierHead {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.hidden.visit(f);
        f(&self.norm_gain);
        f(&self.norm_bias);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.hidden.visit_mut(f);
        f(&mut self.norm_gain);
        f(&mut self.norm_bias);
        self.out.visit_mut(f);
    }
}

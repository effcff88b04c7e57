use crate::error::Result;
use crate::numerics::{Matrix, Parameter, Rng, Tape, Var};
use crate::peft::{LoraAdapter, QuantizedMatrix};

use super::Module;

#[derive(Debug, Clone, PartialEq)]
pub enum LinearWeight {
    Dense(Parameter),
    /// Frozen NF4 weight; dequantized into a tape buffer on every forward.
    Quantized { name: String, q: QuantizedMatrix },
}

/// `Y = X·W (+ b)` with `W: d_in × d_out`, optionally carrying an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: LinearWeight,
    pub bias: Option<Parameter>,
    pub adapter: Option<LoraAdapter>,
}

impl Linear {
    /// Xavier-normal weight, zero bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        let w = Matrix::from_fn(d_in, d_out, |_, _| rng.normal() * std);
        Self {
            weight: LinearWeight::Dense(Parameter::new(format!("{name}.weight"), w)),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Matrix::zeros(1, d_out))),
            adapter: None,
        }
    }

    pub fn weight_name(&self) -> &str {
        match &self.weight {
            LinearWeight::Dense(p) => &p.name,
            LinearWeight::Quantized { name, .. } => name,
        }
    }

    /// Name prefix shared by weight, bias and adapter.
    pub fn name(&self) -> &str {
        self.weight_name().trim_end_matches(".weight")
    }

    pub fn shape(&self) -> (usize, usize) {
        match &self.weight {
            LinearWeight::Dense(p) => p.value.shape(),
            LinearWeight::Quantized { q, .. } => q.shape(),
        }
    }

    pub fn dense_weight(&self) -> Option<&Parameter> {
        match &self.weight {
            LinearWeight::Dense(p) => Some(p),
            LinearWeight::Quantized { .. } => None,
        }
    }

    pub fn dense_weight_mut(&mut self) -> Option<&mut Parameter> {
        match &mut self.weight {
            LinearWeight::Dense(p) => Some(p),
            LinearWeight::Quantized { .. } => None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = match &self.weight {
            LinearWeight::Dense(p) => tape.param(p)?,
            LinearWeight::Quantized { q, .. } => tape.dequantized_buffer(q.dequantize()?)?,
        };
        let mut y = tape.matmul(x, w)?;
        if let Some(ad) = &self.adapter {
            y = ad.apply(tape, x, y)?;
        }
        if let Some(b) = &self.bias {
            let bv = tape.param(b)?;
            y = tape.add_row(y, bv)?;
        }
        Ok(y)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        if let LinearWeight::Dense(p) = &self.weight {
            f(p);
        }
        if let Some(b) = &self.bias {
            f(b);
        }
        if let Some(ad) = &self.adapter {
            f(&ad.a);
            f(&ad.b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        if let LinearWeight::Dense(p) = &mut self.weight {
            f(p);
        }
        if let Some(b) = &mut self.bias {
            f(b);
        }
        if let Some(ad) = &mut self.adapter {
            f(&mut ad.a);
            f(&mut ad.b);
        }
    }

    fn visit_quantized(&self, f: &mut dyn FnMut(&str, &QuantizedMatrix)) {
        if let LinearWeight::Quantized { name, q } = &self.weight {
            f(name, q);
        }
    }
}

use serde::{Deserialize, Serialize};

use super::Matrix;

/// Storage class of a parameter, used by memory accounting and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionClass {
    Full,
    HighPrecisionException,
    QuantizedNf4,
}

impl PrecisionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            PrecisionClass::Full => "full",
            PrecisionClass::HighPrecisionException => "high_precision_exception",
            PrecisionClass::QuantizedNf4 => "quantized_nf4",
        }
    }
}

/// A named weight with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
    pub precision: PrecisionClass,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
            precision: PrecisionClass::Full,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

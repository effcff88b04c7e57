//! Low-rank adapters.
//!
//! Base weights are stored `d_in × d_out` and applied to row-major
//! activations as `Y = X·W`. An adapter keeps `A: r × d_in` and
//! `B: d_out × r`, so for a column input `x` the adapted map is
//! `Wᵀx + (α/r)·B·A·x`; in row form the update is
//! `Y += (α/r)·(X·Aᵀ)·Bᵀ`. The `α/r` factor is applied at forward time and
//! never folded into `A` or `B`.

use serde::{Deserialize, Serialize};

use super::nf4::QuantizedMatrix;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameter, Rng, Tape, Var};

/// Projection sites that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Ffn1,
    Ffn2,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Q,
        LoraTarget::K,
        LoraTarget::V,
        LoraTarget::O,
        LoraTarget::Ffn1,
        LoraTarget::Ffn2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
            LoraTarget::Ffn1 => "ffn1",
            LoraTarget::Ffn2 => "ffn2",
        }
    }
}

impl std::str::FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoraTarget::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown LoRA target `{s}`")))
    }
}

/// Which factor starts at zero. Either choice makes the initial update zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    AZeroBGaussian,
    BZeroAGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    pub init: InitScheme,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: LoraTarget::ALL.to_vec(),
            init: InitScheme::default(),
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize, alpha: f64) -> Self {
        Self {
            rank,
            alpha,
            ..Self::default()
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("LoRA alpha must be > 0, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target".into()));
        }
        Ok(())
    }

    /// Checks `rank < min(d_in, d_out)` for one projection.
    pub fn validate_for(&self, d_in: usize, d_out: usize) -> Result<()> {
        self.validate()?;
        if self.rank >= d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {} must be below min({d_in}, {d_out})",
                self.rank
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Parameter,
    pub b: Parameter,
    pub rank: usize,
    pub alpha: f64,
    pub init: InitScheme,
    pub layer_id: String,
    consumed: bool,
}

impl LoraAdapter {
    pub fn new(layer_id: &str, d_in: usize, d_out: usize, config: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        config.validate_for(d_in, d_out)?;
        let r = config.rank;
        let std = 1.0 / (r as f64).sqrt();
        let (a, b) = match config.init {
            InitScheme::AZeroBGaussian => (
                Matrix::zeros(r, d_in),
                Matrix::from_fn(d_out, r, |_, _| rng.normal() * std),
            ),
            InitScheme::BZeroAGaussian => (
                Matrix::from_fn(r, d_in, |_, _| rng.normal() * std),
                Matrix::zeros(d_out, r),
            ),
        };
        Ok(Self::from_factors(layer_id, a, b, config.alpha, config.init))
    }

    /// Builds an adapter from explicit factors (`A: r×d_in`, `B: d_out×r`).
    pub fn from_factors(layer_id: &str, a: Matrix, b: Matrix, alpha: f64, init: InitScheme) -> Self {
        let rank = a.rows();
        Self {
            a: Parameter::new(format!("{layer_id}.lora_a"), a),
            b: Parameter::new(format!("{layer_id}.lora_b"), b),
            rank,
            alpha,
            init,
            layer_id: layer_id.to_string(),
            consumed: false,
        }
    }

    pub fn d_in(&self) -> usize {
        self.a.value.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.value.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Dense update in the stored base orientation: `(α/r)·(B·A)ᵀ`.
    pub fn delta(&self) -> Result<Matrix> {
        Ok(self.a.value.matmul_tn(&self.b.value.transpose())?.scale(self.scaling()))
    }

    /// Adds the low-rank branch for input `x` to `base_out`.
    pub fn apply(&self, tape: &mut Tape, x: Var, base_out: Var) -> Result<Var> {
        let a = tape.param(&self.a)?;
        let b = tape.param(&self.b)?;
        let at = tape.transpose(a)?;
        let bt = tape.transpose(b)?;
        let down = tape.matmul(x, at)?;
        let up = tape.matmul(down, bt)?;
        let scaled = tape.scale(up, self.scaling())?;
        tape.add(base_out, scaled)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.a, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.a, &mut self.b]
    }
}

/// Creates an adapter for `base` (stored `d_in × d_out`) and freezes `base`.
pub fn lora_init(base: &mut Parameter, config: &LoraConfig, rng: &mut Rng) -> Result<LoraAdapter> {
    let (d_in, d_out) = base.value.shape();
    let adapter = LoraAdapter::new(&base.name, d_in, d_out, config, rng)?;
    base.trainable = false;
    Ok(adapter)
}

fn check_input(x: &Matrix, d_in: usize, adapter: &LoraAdapter, op: &'static str) -> Result<()> {
    if x.cols() != d_in || adapter.d_in() != d_in {
        return Err(Error::Shape {
            op,
            left: x.shape(),
            right: (adapter.d_in(), adapter.d_out()),
        });
    }
    Ok(())
}

/// `X·W + (α/r)·(X·Aᵀ)·Bᵀ` without materializing the update.
pub fn lora_forward(tape: &mut Tape, x: Var, base: &Parameter, adapter: &LoraAdapter) -> Result<Var> {
    check_input(tape.value(x), base.value.rows(), adapter, "lora_forward")?;
    if adapter.d_out() != base.value.cols() {
        return Err(Error::Shape {
            op: "lora_forward",
            left: base.value.shape(),
            right: (adapter.d_in(), adapter.d_out()),
        });
    }
    let w = tape.param(base)?;
    let y = tape.matmul(x, w)?;
    adapter.apply(tape, x, y)
}

/// Same as [`lora_forward`] over a dequantized NF4 base. The dense copy lives
/// only on this tape.
pub fn qlora_forward(tape: &mut Tape, x: Var, q: &QuantizedMatrix, adapter: &LoraAdapter) -> Result<Var> {
    check_input(tape.value(x), q.rows(), adapter, "qlora_forward")?;
    if adapter.d_out() != q.cols() {
        return Err(Error::Shape {
            op: "qlora_forward",
            left: q.shape(),
            right: (adapter.d_in(), adapter.d_out()),
        });
    }
    let w = tape.dequantized_buffer(q.dequantize()?)?;
    let y = tape.matmul(x, w)?;
    adapter.apply(tape, x, y)
}

/// Returns `W + (α/r)·(B·A)ᵀ` and marks the adapter consumed so it cannot be
/// merged a second time. `base` is not modified.
pub fn lora_merge(base: &Parameter, adapter: &mut LoraAdapter) -> Result<Matrix> {
    if adapter.consumed {
        return Err(Error::AdapterConsumed(adapter.layer_id.clone()));
    }
    let merged = base.value.add(&adapter.delta()?)?;
    adapter.consumed = true;
    Ok(merged)
}

/// Trainable adapter parameters versus dense parameters for the same
/// projections: `(Σ r·(d_in + d_out), Σ d_in·d_out)`.
pub fn lora_param_count(layer_dims: &[(usize, usize)], rank: usize) -> Result<(usize, usize)> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be >= 1".into()));
    }
    Ok(layer_dims.iter().fold((0, 0), |(t, f), &(i, o)| {
        (t + rank * (i + o), f + i * o)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_update_is_zero_for_both_schemes() {
        for init in [InitScheme::AZeroBGaussian, InitScheme::BZeroAGaussian] {
            let cfg = LoraConfig {
                init,
                ..LoraConfig::default()
            };
            let ad = LoraAdapter::new("l", 64, 64, &cfg, &mut Rng::new(1)).unwrap();
            assert!(ad.delta().unwrap().as_slice().iter().all(|v| *v == 0.0));
            assert_eq!(ad.a.value.shape(), (8, 64));
            assert_eq!(ad.b.value.shape(), (64, 8));
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = LoraConfig::default();
        let a = LoraAdapter::new("l", 32, 16, &cfg, &mut Rng::new(4)).unwrap();
        let b = LoraAdapter::new("l", 32, 16, &cfg, &mut Rng::new(4)).unwrap();
        assert_eq!(a.b.value, b.b.value);
    }

    #[test]
    fn rank_must_be_below_min_dim() {
        let cfg = LoraConfig::with_rank(8, 16.0);
        assert!(LoraAdapter::new("l", 8, 64, &cfg, &mut Rng::new(0)).is_err());
        let mut base = Parameter::new("w", Matrix::zeros(4, 4));
        assert!(lora_init(&mut base, &LoraConfig::with_rank(4, 1.0), &mut Rng::new(0)).is_err());
        assert!(base.trainable);
        let adapter = lora_init(&mut base, &LoraConfig::with_rank(2, 1.0), &mut Rng::new(0)).unwrap();
        assert!(!base.trainable);
        assert!(adapter.a.trainable && adapter.b.trainable);
    }

    #[test]
    fn hand_example() {
        // W = I, B = [[1],[0]], A = [[0,1]], alpha = 2, r = 1, x = [1,1] -> [3,1]
        let mut base = Parameter::new("w", Matrix::identity(2));
        base.trainable = false;
        let ad = LoraAdapter::from_factors(
            "w",
            Matrix::from_rows(&[&[0.0, 1.0]]),
            Matrix::from_rows(&[&[1.0], &[0.0]]),
            2.0,
            InitScheme::AZeroBGaussian,
        );
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[1.0, 1.0])).unwrap();
        let y = lora_forward(&mut tape, x, &base, &ad).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn merge_is_guarded() {
        let base = Parameter::new("w", Matrix::identity(4));
        let mut ad = LoraAdapter::new("w", 4, 4, &LoraConfig::with_rank(1, 1.0), &mut Rng::new(0)).unwrap();
        let merged = lora_merge(&base, &mut ad).unwrap();
        assert_eq!(merged, base.value);
        assert!(matches!(lora_merge(&base, &mut ad), Err(Error::AdapterConsumed(_))));
    }

    #[test]
    fn param_count_arithmetic() {
        assert_eq!(lora_param_count(&[(64, 64)], 8).unwrap(), (1024, 4096));
        assert!(lora_param_count(&[(64, 64)], 0).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let base = Parameter::new("w", Matrix::zeros(3, 4));
        let ad = LoraAdapter::new("w", 3, 4, &LoraConfig::with_rank(1, 1.0), &mut Rng::new(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 5)).unwrap();
        assert!(matches!(lora_forward(&mut tape, x, &base, &ad), Err(Error::Shape { .. })));
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameter, Rng, Tape, Var};
use crate::peft::{LoraConfig, LoraTarget, QuantizedMatrix};

use super::{patchify_batch, positional_encoding, Linear, Module, ModelConfig};

/// Pre-norm transformer block: `Z + MSA(LN(Z))`, then `Ẑ + FFN(LN(Ẑ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln1_gain: Parameter,
    pub ln1_bias: Parameter,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2_gain: Parameter,
    pub ln2_bias: Parameter,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub n_heads: usize,
    pub ln_eps: f64,
}

fn ln_pair(prefix: &str, d: usize) -> (Parameter, Parameter) {
    (
        Parameter::new(format!("{prefix}.gain"), Matrix::filled(1, d, 1.0)),
        Parameter::new(format!("{prefix}.bias"), Matrix::zeros(1, d)),
    )
}

impl EncoderBlock {
    pub fn new(prefix: &str, config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.embed_dim;
        let h = config.ffn_hidden;
        let (ln1_gain, ln1_bias) = ln_pair(&format!("{prefix}.ln1"), d);
        let (ln2_gain, ln2_bias) = ln_pair(&format!("{prefix}.ln2"), d);
        Self {
            ln1_gain,
            ln1_bias,
            q: Linear::new(&format!("{prefix}.attn.q"), d, d, false, rng),
            k: Linear::new(&format!("{prefix}.attn.k"), d, d, false, rng),
            v: Linear::new(&format!("{prefix}.attn.v"), d, d, false, rng),
            o: Linear::new(&format!("{prefix}.attn.o"), d, d, false, rng),
            ln2_gain,
            ln2_bias,
            ffn1: Linear::new(&format!("{prefix}.ffn1"), d, h, true, rng),
            ffn2: Linear::new(&format!("{prefix}.ffn2"), h, d, true, rng),
            n_heads: config.n_heads,
            ln_eps: config.ln_eps,
        }
    }

    pub fn linear(&self, target: LoraTarget) -> &Linear {
        match target {
            LoraTarget::Q => &self.q,
            LoraTarget::K => &self.k,
            LoraTarget::V => &self.v,
            LoraTarget::O => &self.o,
            LoraTarget::Ffn1 => &self.ffn1,
            LoraTarget::Ffn2 => &self.ffn2,
        }
    }

    pub fn linear_mut(&mut self, target: LoraTarget) -> &mut Linear {
        match target {
            LoraTarget::Q => &mut self.q,
            LoraTarget::K => &mut self.k,
            LoraTarget::V => &mut self.v,
            LoraTarget::O => &mut self.o,
            LoraTarget::Ffn1 => &mut self.ffn1,
            LoraTarget::Ffn2 => &mut self.ffn2,
        }
    }

    /// Multi-head self-attention over consecutive groups of `seq_len` rows.
    pub fn attention(&self, tape: &mut Tape, x: Var, seq_len: usize) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let heads = tape.attention(q, k, v, seq_len, self.n_heads)?;
        self.o.forward(tape, heads)
    }

    pub fn feed_forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.ffn1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.ffn2.forward(tape, h)
    }

    pub fn forward(&self, tape: &mut Tape, z: Var, seq_len: usize) -> Result<Var> {
        let (g1, b1) = (tape.param(&self.ln1_gain)?, tape.param(&self.ln1_bias)?);
        let n1 = tape.layer_norm(z, g1, b1, self.ln_eps)?;
        let a = self.attention(tape, n1, seq_len)?;
        let z = tape.add(z, a)?;
        let (g2, b2) = (tape.param(&self.ln2_gain)?, tape.param(&self.ln2_bias)?);
        let n2 = tape.layer_norm(z, g2, b2, self.ln_eps)?;
        let f = self.feed_forward(tape, n2)?;
        tape.add(z, f)
    }

    fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ffn1, &self.ffn2]
    }
}

impl Module for EncoderBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.ln1_gain);
        f(&self.ln1_bias);
        for l in self.linears() {
            l.visit(f);
        }
        f(&self.ln2_gain);
        f(&self.ln2_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.ln1_gain);
        f(&mut self.ln1_bias);
        for l in [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.ffn1,
            &mut self.ffn2,
        ] {
            l.visit_mut(f);
        }
        f(&mut self.ln2_gain);
        f(&mut self.ln2_bias);
    }

    fn visit_quantized(&self, f: &mut dyn FnMut(&str, &QuantizedMatrix)) {
        for l in self.linears() {
            l.visit_quantized(f);
        }
    }
}

/// How an encoder was adapted, if at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrapInfo {
    pub lora: LoraConfig,
    pub quantized: bool,
    pub block_size: usize,
    pub double_quant: bool,
}

/// Patch embedding plus the stack of encoder blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    pub embed: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub wrap: Option<WrapInfo>,
}

impl Encoder {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embed = Linear::new("encoder.embed", config.patch_dim(), config.embed_dim, true, rng);
        let blocks = (0..config.n_enc_layers)
            .map(|i| EncoderBlock::new(&format!("encoder.blocks.{i}"), config, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            blocks,
            wrap: None,
        })
    }

    /// `Linear(patch) + p_i` for every token of every window, `(B·T) × d`.
    pub fn embed_patches(&self, tape: &mut Tape, patches: &Matrix) -> Result<Var> {
        let t = self.config.num_tokens();
        if patches.cols() != self.config.patch_dim() || !patches.rows().is_multiple_of(t) {
            return Err(Error::Shape {
                op: "embed_patches",
                left: patches.shape(),
                right: (t, self.config.patch_dim()),
            });
        }
        let x = tape.constant(patches.clone())?;
        let e = self.embed.forward(tape, x)?;
        let pe = tiled_positions(patches.rows() / t, t, self.config.embed_dim);
        let pe = tape.constant(pe)?;
        tape.add(e, pe)
    }

    /// Runs the block stack over consecutive sequences of `seq_len` tokens.
    pub fn forward_tokens(&self, tape: &mut Tape, tokens: Var, seq_len: usize) -> Result<Var> {
        let mut z = tokens;
        for block in &self.blocks {
            z = block.forward(tape, z, seq_len)?;
        }
        Ok(z)
    }

    /// Encodes whole windows (no masking), `(B·T) × d`.
    pub fn forward_windows(&self, tape: &mut Tape, windows: &[&Matrix]) -> Result<Var> {
        self.check_windows(windows)?;
        let patches = patchify_batch(windows, self.config.patch_len)?;
        let tokens = self.embed_patches(tape, &patches)?;
        self.forward_tokens(tape, tokens, self.config.num_tokens())
    }

    pub fn check_windows(&self, windows: &[&Matrix]) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let want = (self.config.window_len, self.config.channels);
        for w in windows {
            if w.shape() != want {
                return Err(Error::Shape {
                    op: "encoder input",
                    left: w.shape(),
                    right: want,
                });
            }
        }
        Ok(())
    }

    pub fn num_adapters(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.linears())
            .filter(|l| l.adapter.is_some())
            .count()
    }
}

pub(crate) fn tiled_positions(batch: usize, tokens: usize, dim: usize) -> Matrix {
    let pe = positional_encoding(tokens, dim);
    Matrix::from_fn(batch * tokens, dim, |i, j| pe.get(i % tokens, j))
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.embed.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.embed.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }

    fn visit_quantized(&self, f: &mut dyn FnMut(&str, &QuantizedMatrix)) {
        for b in &self.blocks {
            b.visit_quantized(f);
        }
    }
}

//! Patch embedding, the pre-norm transformer encoder and the masked
//! autoencoder objective.

mod encoder;
mod linear;
mod mae;
mod patch;

use serde::{Deserialize, Serialize};

pub use encoder::{EncoderBlock, Encoder, WrapInfo};
pub use linear::{Linear, LinearWeight};
pub use mae::{
    mae_loss, pretrain, random_mask, MaeDecoder, MaeModel, MaskSpec, PretrainConfig, PretrainLog,
};
pub use patch::{patchify, patchify_batch, positional_encoding, unpatchify};

use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tape};
use crate::peft::QuantizedMatrix;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub window_len: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub embed_dim: usize,
    pub ffn_hidden: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub mask_ratio: f64,
    pub n_classes: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_len: 128,
            channels: 6,
            patch_len: 16,
            embed_dim: 64,
            ffn_hidden: 128,
            n_heads: 4,
            n_enc_layers: 6,
            n_dec_layers: 2,
            mask_ratio: 0.75,
            n_classes: 6,
            head_hidden: 64,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_len == 0 || !self.window_len.is_multiple_of(self.patch_len) {
            return err(format!(
                "patch_len {} must divide window_len {}",
                self.patch_len, self.window_len
            ));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return err(format!(
                "embed_dim {} must be divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return err(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.ffn_hidden == 0 || self.head_hidden == 0 {
            return err("dimensions must be positive".into());
        }
        if self.n_enc_layers == 0 {
            return err("at least one encoder layer is required".into());
        }
        if self.n_classes == 0 {
            return err("n_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return err("ln_eps must be > 0".into());
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.window_len / self.patch_len
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_len * self.channels
    }
}

/// Parameter traversal shared by every model component.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    /// Frozen NF4 weights, which are not [`Parameter`]s.
    fn visit_quantized(&self, _f: &mut dyn FnMut(&str, &QuantizedMatrix)) {}

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |p| p.trainable = trainable);
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        self.visit_quantized(&mut |_, q| n += q.numel());
        n
    }

    /// Adds the gradients recorded on `tape` into every trainable parameter.
    fn collect_grads(&mut self, tape: &Tape) -> Result<()> {
        let mut status = Ok(());
        self.visit_mut(&mut |p| {
            if status.is_ok() {
                status = tape.accumulate_into(p);
            }
        });
        status
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.clone()));
        names
    }
}

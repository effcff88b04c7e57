//! Low-rank adapters, NF4 quantization and model wrapping.

mod lora;
mod nf4;

pub use lora::{
    lora_forward, lora_init, lora_merge, lora_param_count, qlora_forward, InitScheme, LoraAdapter, LoraConfig,
    LoraTarget,
};
pub use nf4::{
    build_nf4_codebook, codebook, dequantize_nf4, nf4_storage_bytes, quantize_nf4, Nf4Bytes, Nf4Codebook,
    QuantizedMatrix, Scales, DEFAULT_BLOCK_SIZE, DOUBLE_QUANT_GROUP,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoder, LinearWeight, Module, WrapInfo};
use crate::numerics::{Parameter, PrecisionClass, Rng};

/// Storage options for quantized wrapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantOptions {
    pub block_size: usize,
    pub double_quant: bool,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            double_quant: true,
        }
    }
}

/// Attaches adapters to every targeted projection of every encoder block and
/// freezes the backbone. With `quantize`, targeted base weights are replaced
/// by NF4 copies and every other backbone tensor is marked as a
/// high-precision exception.
pub fn wrap_model(encoder: &mut Encoder, config: &LoraConfig, quantize: bool, rng: &mut Rng) -> Result<()> {
    let quant = quantize.then(QuantOptions::default);
    wrap_model_with(encoder, config, quant, rng)
}

pub fn wrap_model_with(
    encoder: &mut Encoder,
    config: &LoraConfig,
    quant: Option<QuantOptions>,
    rng: &mut Rng,
) -> Result<()> {
    if encoder.wrap.is_some() {
        return Err(Error::AlreadyWrapped);
    }
    config.validate()?;
    for block in &encoder.blocks {
        for &t in &config.targets {
            let (d_in, d_out) = block.linear(t).shape();
            config.validate_for(d_in, d_out)?;
        }
    }
    encoder.set_trainable(false);
    if quant.is_some() {
        encoder.visit_mut(&mut |p| p.precision = PrecisionClass::HighPrecisionException);
    }
    for block in &mut encoder.blocks {
        for &t in &config.targets {
            let lin = block.linear_mut(t);
            let (d_in, d_out) = lin.shape();
            let adapter = LoraAdapter::new(lin.name(), d_in, d_out, config, rng)?;
            if let Some(opts) = quant {
                if let LinearWeight::Dense(p) = &lin.weight {
                    let q = QuantizedMatrix::quantize(&p.value, opts.block_size, opts.double_quant)?;
                    lin.weight = LinearWeight::Quantized {
                        name: p.name.clone(),
                        q,
                    };
                }
            }
            lin.adapter = Some(adapter);
        }
    }
    let opts = quant.unwrap_or_default();
    encoder.wrap = Some(WrapInfo {
        lora: config.clone(),
        quantized: quant.is_some(),
        block_size: opts.block_size,
        double_quant: opts.double_quant,
    });
    Ok(())
}

/// Dense encoder with every adapter folded into its base weight. Quantized
/// bases are dequantized first. The input is left untouched.
pub fn merge_adapters(encoder: &Encoder) -> Result<Encoder> {
    let mut merged = encoder.clone();
    for block in &mut merged.blocks {
        for t in LoraTarget::ALL {
            let lin = block.linear_mut(t);
            let Some(mut adapter) = lin.adapter.take() else {
                continue;
            };
            let base = match &lin.weight {
                LinearWeight::Dense(p) => p.clone(),
                LinearWeight::Quantized { name, q } => Parameter::new(name.clone(), q.dequantize()?),
            };
            let mut w = Parameter::new(base.name.clone(), lora_merge(&base, &mut adapter)?);
            w.trainable = false;
            lin.weight = LinearWeight::Dense(w);
        }
    }
    merged.visit_mut(&mut |p| p.precision = PrecisionClass::Full);
    merged.wrap = None;
    Ok(merged)
}

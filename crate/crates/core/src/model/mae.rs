use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::Adam;
use crate::numerics::{Matrix, Parameter, Purpose, Rng, Tape, Var};
use crate::peft::QuantizedMatrix;

use super::encoder::tiled_positions;
use super::{patchify_batch, Encoder, EncoderBlock, Linear, Module, ModelConfig};

/// Token positions hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub total: usize,
}

impl MaskSpec {
    /// Builds a mask from explicit masked positions.
    pub fn from_masked(total: usize, masked: &[usize]) -> Result<Self> {
        let mut flags = vec![false; total];
        for &i in masked {
            if i >= total {
                return Err(Error::IndexOutOfRange { index: i, len: total });
            }
            flags[i] = true;
        }
        let masked: Vec<usize> = (0..total).filter(|&i| flags[i]).collect();
        if masked.is_empty() || masked.len() == total {
            return Err(Error::DegenerateMask {
                tokens: total,
                ratio: masked.len() as f64 / total.max(1) as f64,
                masked: masked.len(),
            });
        }
        let visible = (0..total).filter(|&i| !flags[i]).collect();
        Ok(Self {
            masked,
            visible,
            total,
        })
    }
}

/// Uniform random subset of `round(m·T)` positions (half rounds up).
pub fn random_mask(tokens: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSpec> {
    let degenerate = |masked| Error::DegenerateMask {
        tokens,
        ratio,
        masked,
    };
    if !(ratio > 0.0 && ratio < 1.0) || tokens < 2 {
        return Err(degenerate(0));
    }
    let n = (ratio * tokens as f64 + 0.5).floor() as usize;
    if n == 0 || n >= tokens {
        return Err(degenerate(n));
    }
    MaskSpec::from_masked(tokens, &rng.sample_indices(tokens, n))
}

/// `(1/|M|) Σ_{i∈M} ‖pred_i − target_i‖²` over token rows.
pub fn mae_loss(pred: &Matrix, target: &Matrix, mask: &MaskSpec) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rows() != mask.total {
        return Err(Error::Shape {
            op: "mae_loss",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    if mask.masked.is_empty() {
        return Err(Error::Config("mae_loss over an empty mask".into()));
    }
    let total: f64 = mask
        .masked
        .iter()
        .map(|&i| {
            pred.row(i)
                .iter()
                .zip(target.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(total / mask.masked.len() as f64)
}

/// Reconstructs masked patches from the encoded visible tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeDecoder {
    pub mask_token: Parameter,
    pub blocks: Vec<EncoderBlock>,
    pub pred: Linear,
    pub embed_dim: usize,
}

impl MaeDecoder {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.embed_dim;
        let mask_token = Parameter::new(
            "decoder.mask_token",
            Matrix::from_fn(1, d, |_, _| 0.02 * rng.normal()),
        );
        let blocks = (0..config.n_dec_layers)
            .map(|i| EncoderBlock::new(&format!("decoder.blocks.{i}"), config, rng))
            .collect();
        let pred = Linear::new("decoder.pred", d, config.patch_dim(), true, rng);
        Self {
            mask_token,
            blocks,
            pred,
            embed_dim: d,
        }
    }

    /// `encoded` holds `|visible|` rows per window, in mask order. Returns
    /// `(B·T) × patch_dim` predictions.
    pub fn decode(&self, tape: &mut Tape, encoded: Var, masks: &[MaskSpec]) -> Result<Var> {
        let Some(first) = masks.first() else {
            return Err(Error::Data("decode called with no masks".into()));
        };
        let t = first.total;
        let n_vis = first.visible.len();
        let rows = tape.value(encoded).rows();
        if rows != n_vis * masks.len() {
            return Err(Error::Shape {
                op: "mae_decode",
                left: tape.value(encoded).shape(),
                right: (n_vis * masks.len(), self.embed_dim),
            });
        }
        let mut plan = Vec::with_capacity(masks.len() * t);
        for (b, mask) in masks.iter().enumerate() {
            if mask.total != t || mask.visible.len() != n_vis {
                return Err(Error::Config("masks in a batch must share token counts".into()));
            }
            let mut slot = vec![None; t];
            for (j, &pos) in mask.visible.iter().enumerate() {
                slot[pos] = Some(b * n_vis + j);
            }
            plan.extend(slot);
        }
        let fill = tape.param(&self.mask_token)?;
        let full = tape.assemble(encoded, fill, plan)?;
        let pe = tape.constant(tiled_positions(masks.len(), t, self.embed_dim))?;
        let mut z = tape.add(full, pe)?;
        for block in &self.blocks {
            z = block.forward(tape, z, t)?;
        }
        self.pred.forward(tape, z)
    }
}

impl Module for MaeDecoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.mask_token);
        for b in &self.blocks {
            b.visit(f);
        }
        self.pred.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.mask_token);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.pred.visit_mut(f);
    }

    fn visit_quantized(&self, f: &mut dyn FnMut(&str, &QuantizedMatrix)) {
        for b in &self.blocks {
            b.visit_quantized(f);
        }
    }
}

/// Encoder plus reconstruction decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeModel {
    pub encoder: Encoder,
    pub decoder: MaeDecoder,
}

impl MaeModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::substream(seed, Purpose::Init, 0);
        let encoder = Encoder::new(config, &mut rng)?;
        let decoder = MaeDecoder::new(config, &mut rng);
        Ok(Self { encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    /// Records the reconstruction of every window under its mask and returns
    /// `(prediction, loss)`. Masked tokens never enter the encoder.
    pub fn forward(&self, tape: &mut Tape, windows: &[&Matrix], masks: &[MaskSpec]) -> Result<(Var, Var)> {
        self.encoder.check_windows(windows)?;
        if windows.len() != masks.len() {
            return Err(Error::Config(format!(
                "{} windows but {} masks",
                windows.len(),
                masks.len()
            )));
        }
        let cfg = self.config();
        let t = cfg.num_tokens();
        let patches = patchify_batch(windows, cfg.patch_len)?;
        let tokens = self.encoder.embed_patches(tape, &patches)?;
        let mut visible = Vec::new();
        let mut masked = Vec::new();
        for (b, mask) in masks.iter().enumerate() {
            if mask.total != t {
                return Err(Error::Config(format!(
                    "mask covers {} tokens, model has {t}",
                    mask.total
                )));
            }
            visible.extend(mask.visible.iter().map(|&i| b * t + i));
            masked.extend(mask.masked.iter().map(|&i| b * t + i));
        }
        let n_vis = masks[0].visible.len();
        let vis = tape.gather_rows(tokens, visible)?;
        let enc = self.encoder.forward_tokens(tape, vis, n_vis)?;
        let pred = self.decoder.decode(tape, enc, masks)?;
        let loss = tape.masked_mse(pred, patches, masked)?;
        Ok((pred, loss))
    }

    /// One random mask per window.
    pub fn draw_masks(&self, n: usize, rng: &mut Rng) -> Result<Vec<MaskSpec>> {
        let cfg = self.config();
        (0..n).map(|_| random_mask(cfg.num_tokens(), cfg.mask_ratio, rng)).collect()
    }
}

impl Module for MaeModel {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }

    fn visit_quantized(&self, f: &mut dyn FnMut(&str, &QuantizedMatrix)) {
        self.encoder.visit_quantized(f);
        self.decoder.visit_quantized(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_losses: Vec<f64>,
    pub seconds: f64,
}

/// MAE pretraining with Adam over shuffled mini-batches.
pub fn pretrain(model: &mut MaeModel, windows: &[&Matrix], config: &PretrainConfig) -> Result<PretrainLog> {
    if windows.is_empty() {
        return Err(Error::Data("no pretraining windows".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let start = Instant::now();
    let mut adam = Adam::new(config.learning_rate);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        Rng::substream(config.seed, Purpose::Shuffle, epoch as u32).shuffle(&mut order);
        let mut mask_rng = Rng::substream(config.seed, Purpose::Mask, epoch as u32);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Matrix> = chunk.iter().map(|&i| windows[i]).collect();
            let masks = model.draw_masks(batch.len(), &mut mask_rng)?;
            let mut tape = Tape::new();
            let (_, loss) = model.forward(&mut tape, &batch, &masks)?;
            total += tape.value(loss).get(0, 0);
            batches += 1;
            tape.backward(loss)?;
            model.collect_grads(&tape)?;
            adam.step(model)?;
            model.zero_grad();
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(PretrainLog {
        epoch_losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mask_count() {
        let mut rng = Rng::new(3);
        let m = random_mask(16, 0.75, &mut rng).unwrap();
        assert_eq!(m.masked.len(), 12);
        assert_eq!(m.visible.len(), 4);
        assert_eq!(random_mask(8, 0.75, &mut rng).unwrap().masked.len(), 6);
    }

    #[test]
    fn degenerate_masks_rejected() {
        let mut rng = Rng::new(0);
        assert!(matches!(random_mask(4, 0.1, &mut rng), Err(Error::DegenerateMask { .. })));
        assert!(matches!(random_mask(4, 0.9, &mut rng), Err(Error::DegenerateMask { .. })));
        assert!(random_mask(1, 0.5, &mut rng).is_err());
        // 0.5·3 = 1.5 rounds up to 2.
        assert_eq!(random_mask(3, 0.5, &mut rng).unwrap().masked.len(), 2);
    }

    #[test]
    fn loss_hand_example() {
        let target = Matrix::zeros(2, 4);
        let mut pred = Matrix::zeros(2, 4);
        pred.row_mut(1).copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        pred.set(0, 0, 9.0);
        let mask = MaskSpec::from_masked(2, &[1]).unwrap();
        assert_eq!(mae_loss(&pred, &target, &mask).unwrap(), 4.0);
        assert_eq!(mae_loss(&target, &target, &mask).unwrap(), 0.0);
    }
}

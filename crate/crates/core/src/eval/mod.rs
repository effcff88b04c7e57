//! Metrics, parameter and memory accounting, experiment harnesses and
//! report rendering.

mod experiments;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use experiments::{
    derive_seed, finetune_on_target, pretrain_backbone, rank_sweep, run_fold, run_lodo, split_sweep, ExperimentConfig,
    LodoRecord, RankRow, SplitRow, TargetRun, DEFAULT_RANKS, DEFAULT_SPLITS,
};
pub use report::{
    lodo_csv, lodo_table, memory_table, params_table, rank_csv, rank_plot_svg, rank_table, split_csv, split_table,
    time_table, Report,
};

use crate::error::{Error, Result};
use crate::finetune::FineTuneModel;
use crate::model::Module;
use crate::numerics::{Matrix, PrecisionClass, Tape};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Data("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &y) in preds.iter().zip(labels) {
        for v in [p, y] {
            if v >= k {
                return Err(Error::IndexOutOfRange { index: v, len: k });
            }
        }
        cm.counts[y][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

/// Per-class precision, recall and F1 with every `0/0` taken as 0; absent
/// classes stay in the unweighted macro means.
pub fn per_class(cm: &ConfusionMatrix) -> Vec<(f64, f64, f64)> {
    let k = cm.n_classes();
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    (0..k)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
            let actual: u64 = cm.counts[c].iter().sum();
            let p = ratio(tp, predicted as f64);
            let r = ratio(tp, actual as f64);
            (p, r, ratio(2.0 * p * r, p + r))
        })
        .collect()
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 || cm.n_classes() == 0 {
        return Err(Error::Data("metrics of an empty confusion matrix".into()));
    }
    let pc = per_class(cm);
    let k = pc.len() as f64;
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: pc.iter().map(|c| c.0).sum::<f64>() / k,
        macro_recall: pc.iter().map(|c| c.1).sum::<f64>() / k,
        macro_f1: pc.iter().map(|c| c.2).sum::<f64>() / k,
    })
}

/// `(trainable, total)` over every parameter, quantized weights included.
pub fn count_parameters<M: Module + ?Sized>(model: &M) -> (usize, usize) {
    let mut trainable = 0;
    model.visit(&mut |p| {
        if p.trainable {
            trainable += p.numel()
        }
    });
    (trainable, model.num_params())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ResourceReport {
    pub trainable_params: usize,
    pub total_params: usize,
    /// Frozen storage as held in memory (8 bytes per dense value).
    pub frozen_param_bytes: usize,
    /// Frozen storage with dense values counted at 4 bytes.
    pub frozen_param_bytes_f32: usize,
    pub trainable_param_bytes: usize,
    pub trainable_param_bytes_f32: usize,
    /// Dequantization buffers alive during one forward pass (8-byte values).
    pub buffer_bytes_peak: usize,
    pub buffer_bytes_peak_f32: usize,
    /// Frozen bytes as stored, per precision class.
    pub frozen_bytes_by_class: BTreeMap<String, usize>,
    pub wall_seconds: f64,
}

pub const F64_BYTES: usize = 8;
pub const F32_BYTES: usize = 4;

pub fn to_megabytes(bytes: usize) -> f64 {
    bytes as f64 / 1e6
}

/// Storage accounting plus the dequantization buffer peak of one
/// single-window forward pass.
pub fn measure_memory(model: &FineTuneModel) -> Result<ResourceReport> {
    let mut r = ResourceReport::default();
    let (trainable, total) = count_parameters(model);
    r.trainable_params = trainable;
    r.total_params = total;
    model.visit(&mut |p| {
        let n = p.numel();
        if p.trainable {
            r.trainable_param_bytes += n * F64_BYTES;
            r.trainable_param_bytes_f32 += n * F32_BYTES;
        } else {
            r.frozen_param_bytes += n * F64_BYTES;
            r.frozen_param_bytes_f32 += n * F32_BYTES;
            *r.frozen_bytes_by_class.entry(p.precision.as_str().to_string()).or_default() += n * F64_BYTES;
        }
    });
    model.visit_quantized(&mut |_, q| {
        let b = q.storage_bytes().total();
        r.frozen_param_bytes += b;
        r.frozen_param_bytes_f32 += b;
        *r
            .frozen_bytes_by_class
            .entry(PrecisionClass::QuantizedNf4.as_str().to_string())
            .or_default() += b;
    });
    let cfg = &model.encoder.config;
    let probe = Matrix::zeros(cfg.window_len, cfg.channels);
    let mut tape = Tape::new();
    model.logits_eval(&mut tape, &[&probe])?;
    r.buffer_bytes_peak = tape.buffer_peak_bytes();
    r.buffer_bytes_peak_f32 = r.buffer_bytes_peak / F64_BYTES * F32_BYTES;
    Ok(r)
}

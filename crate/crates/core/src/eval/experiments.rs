use serde::{Deserialize, Serialize};

use super::{MetricsReport, ResourceReport};
use crate::data::{lodo_folds, split_train_eval, DatasetBundle, Fold};
use crate::error::{Error, Result};
use crate::finetune::{train, FineTuneModel, Strategy, TrainConfig, TrainLog};
use crate::model::{pretrain, Encoder, MaeModel, ModelConfig, PretrainConfig, PretrainLog};
use crate::numerics::{Purpose, Rng};
use crate::peft::LoraConfig;

pub const DEFAULT_RANKS: [usize; 6] = [8, 16, 20, 32, 48, 64];
pub const DEFAULT_SPLITS: [f64; 5] = [0.7, 0.6, 0.5, 0.4, 0.3];

/// Everything a LODO run or sweep needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Fine-tuning template; `strategy` and `lora` are set per run.
    pub finetune: TrainConfig,
    pub lora: LoraConfig,
    pub seed: u64,
}


/// Sub-seed for one purpose of one run: the first draw of the matching
/// substream of the master seed.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u32) -> u64 {
    Rng::substream(seed, purpose, index).next_u64()
}

impl ExperimentConfig {
    pub fn train_config(&self, strategy: Strategy, fold: u32) -> TrainConfig {
        TrainConfig {
            strategy,
            lora: strategy.uses_adapters().then(|| self.lora.clone()),
            seed: derive_seed(self.seed, Purpose::Shuffle, fold),
            ..self.finetune.clone()
        }
    }

    fn pretrain_config(&self, fold: u32) -> PretrainConfig {
        PretrainConfig {
            seed: derive_seed(self.seed, Purpose::Mask, fold),
            ..self.pretrain.clone()
        }
    }
}

/// MAE-pretrains a fresh model on `bundle` and returns its encoder.
pub fn pretrain_backbone(bundle: &DatasetBundle, cfg: &ExperimentConfig, fold: u32) -> Result<(Encoder, PretrainLog)> {
    let model_cfg = ModelConfig {
        n_classes: bundle.n_classes().max(1),
        ..cfg.model.clone()
    };
    let mut mae = MaeModel::new(&model_cfg, derive_seed(cfg.seed, Purpose::Init, fold))?;
    let log = pretrain(&mut mae, &bundle.values(), &cfg.pretrain_config(fold))?;
    Ok((mae.encoder, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoRecord {
    pub fold: usize,
    pub target_domain: String,
    pub strategy: Strategy,
    pub metrics: MetricsReport,
    pub resources: ResourceReport,
    pub log: TrainLog,
    pub pretrain_losses: Vec<f64>,
    pub seed: u64,
    pub finetune_seed: u64,
    pub split_seed: u64,
    pub train_windows: usize,
    pub eval_windows: usize,
}

/// A fine-tuned model together with its held-out score.
#[derive(Debug, Clone)]
pub struct TargetRun {
    pub model: FineTuneModel,
    pub metrics: MetricsReport,
    pub log: TrainLog,
    pub train_windows: usize,
    pub eval_windows: usize,
}

/// Splits `target`, fine-tunes a copy of `backbone` on the training part and
/// scores it on the rest.
pub fn finetune_on_target(
    backbone: &Encoder,
    target: &DatasetBundle,
    fraction: f64,
    split_seed: u64,
    tc: &TrainConfig,
) -> Result<TargetRun> {
    let split = split_train_eval(target, fraction, split_seed)?;
    let (train_set, eval_set) = (split.train.labeled()?, split.eval.labeled()?);
    if eval_set.is_empty() {
        return Err(Error::Data(format!("target `{}` leaves no evaluation windows", target.name)));
    }
    let mut model = FineTuneModel::prepare(backbone, target.n_classes(), tc)?;
    let mut log = train(&mut model, &train_set, &eval_set, tc)?;
    log.warnings.extend(split.warnings);
    let metrics = model.evaluate(&eval_set, tc.batch_size)?;
    Ok(TargetRun {
        model,
        metrics,
        log,
        train_windows: train_set.len(),
        eval_windows: eval_set.len(),
    })
}

/// Pretrains on the fold's pooled source domains, then fine-tunes and scores
/// every strategy on the held-out domain.
pub fn run_fold(fold_index: usize, fold: &Fold, strategies: &[Strategy], cfg: &ExperimentConfig) -> Result<Vec<LodoRecord>> {
    let f = fold_index as u32;
    let (backbone, plog) = pretrain_backbone(&fold.pretrain, cfg, f)?;
    let split_seed = derive_seed(cfg.seed, Purpose::Split, f);
    strategies
        .iter()
        .map(|&s| {
            let tc = cfg.train_config(s, f);
            let run = finetune_on_target(&backbone, &fold.target, tc.train_fraction, split_seed, &tc)?;
            Ok(LodoRecord {
                fold: fold_index,
                target_domain: fold.target_domain.clone(),
                strategy: s,
                metrics: run.metrics,
                resources: run.log.resources.clone(),
                log: run.log,
                pretrain_losses: plog.epoch_losses.clone(),
                seed: cfg.seed,
                finetune_seed: tc.seed,
                split_seed,
                train_windows: run.train_windows,
                eval_windows: run.eval_windows,
            })
        })
        .collect()
}

/// Every fold, every strategy: `D × |strategies|` records in fold order.
pub fn run_lodo(bundles: &[DatasetBundle], strategies: &[Strategy], cfg: &ExperimentConfig) -> Result<Vec<LodoRecord>> {
    if strategies.is_empty() {
        return Err(Error::Config("no strategies requested".into()));
    }
    let folds = lodo_folds(bundles)?;
    let mut out = Vec::new();
    for (i, fold) in folds.iter().enumerate() {
        out.extend(run_fold(i, fold, strategies, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub seconds: f64,
    pub trainable: usize,
}

/// One LoRA fine-tune per rank at a fixed seed.
pub fn rank_sweep(backbone: &Encoder, target: &DatasetBundle, ranks: &[usize], cfg: &ExperimentConfig) -> Result<Vec<RankRow>> {
    if ranks.is_empty() {
        return Err(Error::Config("rank list is empty".into()));
    }
    let split_seed = derive_seed(cfg.seed, Purpose::Split, 0);
    ranks
        .iter()
        .map(|&rank| {
            let mut tc = cfg.train_config(Strategy::Lora, 0);
            let lora = LoraConfig {
                rank,
                ..cfg.lora.clone()
            };
            tc.lora = Some(lora);
            let run = finetune_on_target(backbone, target, tc.train_fraction, split_seed, &tc)?;
            Ok(RankRow {
                rank,
                macro_f1: run.metrics.macro_f1,
                accuracy: run.metrics.accuracy,
                seconds: run.log.wall_seconds,
                trainable: run.log.resources.trainable_params,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub fraction: f64,
    pub accuracy: Vec<(Strategy, f64)>,
    /// LoRA accuracy divided by full fine-tuning accuracy, when both ran.
    pub lora_full_ratio: Option<f64>,
}

impl SplitRow {
    pub fn accuracy_of(&self, s: Strategy) -> Option<f64> {
        self.accuracy.iter().find(|(st, _)| *st == s).map(|(_, a)| *a)
    }
}

pub fn split_sweep(
    backbone: &Encoder,
    target: &DatasetBundle,
    fractions: &[f64],
    strategies: &[Strategy],
    cfg: &ExperimentConfig,
) -> Result<Vec<SplitRow>> {
    if fractions.is_empty() || strategies.is_empty() {
        return Err(Error::Config("split sweep needs fractions and strategies".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Error::Config(format!("split fraction must be in (0, 1), got {f}")));
    }
    let split_seed = derive_seed(cfg.seed, Purpose::Split, 0);
    fractions
        .iter()
        .map(|&fraction| {
            let accuracy = strategies
                .iter()
                .map(|&s| {
                    let tc = TrainConfig {
                        train_fraction: fraction,
                        ..cfg.train_config(s, 0)
                    };
                    let run = finetune_on_target(backbone, target, fraction, split_seed, &tc)?;
                    Ok((s, run.metrics.accuracy))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut row = SplitRow {
                fraction,
                accuracy,
                lora_full_ratio: None,
            };
            row.lora_full_ratio = match (row.accuracy_of(Strategy::Lora), row.accuracy_of(Strategy::Full)) {
                (Some(l), Some(f)) if f > 0.0 => Some(l / f),
                _ => None,
            };
            Ok(row)
        })
        .collect()
}

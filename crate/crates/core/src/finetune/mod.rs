//! Classification head, adaptation strategies, Adam and the training loop.

mod head;
mod optim;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use head::ClassifierHead;
pub use optim::{adam_step, Adam};

use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, ResourceReport};
use crate::model::{Encoder, Module};
use crate::numerics::{Matrix, Parameter, Purpose, Rng, Tape, Var};
use crate::peft::{wrap_model_with, LoraConfig, QuantOptions, QuantizedMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Full,
    Lora,
    Qlora,
    FrozenHead,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Full, Strategy::Lora, Strategy::Qlora, Strategy::FrozenHead];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Lora => "lora",
            Strategy::Qlora => "qlora",
            Strategy::FrozenHead => "frozen_head",
        }
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, Strategy::Lora | Strategy::Qlora)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (full, lora, qlora, frozen_head)")))
    }
}

/// Windows with class ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub windows: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn refs(&self) -> Vec<&Matrix> {
        self.windows.iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub lora: Option<LoraConfig>,
    pub quant: QuantOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Full,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            train_fraction: 0.7,
            lora: None,
            quant: QuantOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            lora: strategy.uses_adapters().then(LoraConfig::default),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        match (self.strategy.uses_adapters(), &self.lora) {
            (true, None) => Err(Error::Config(format!("strategy {} needs a LoRA config", self.strategy))),
            (false, Some(_)) => Err(Error::Config(format!(
                "strategy {} does not take a LoRA config",
                self.strategy
            ))),
            (true, Some(l)) => l.validate(),
            (false, None) => Ok(()),
        }
    }
}

/// Backbone plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneModel {
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl FineTuneModel {
    /// Fresh head on top of `encoder`; the backbone is used as given.
    pub fn new(encoder: Encoder, n_classes: usize, seed: u64) -> Self {
        let cfg = &encoder.config;
        let mut rng = Rng::substream(seed, Purpose::Init, 2);
        let head = ClassifierHead::new(cfg.embed_dim, cfg.head_hidden, n_classes, cfg.dropout, &mut rng);
        Self { encoder, head }
    }

    /// Copies `backbone`, wraps it as `config.strategy` requires, attaches a
    /// head and selects the trainable set.
    pub fn prepare(backbone: &Encoder, n_classes: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut encoder = backbone.clone();
        if encoder.wrap.is_some() {
            return Err(Error::StrategyMismatch {
                strategy: config.strategy.as_str(),
                reason: "backbone already carries adapters".into(),
            });
        }
        if let Some(lora) = &config.lora {
            let quant = (config.strategy == Strategy::Qlora).then_some(config.quant);
            let mut rng = Rng::substream(config.seed, Purpose::Init, 1);
            wrap_model_with(&mut encoder, lora, quant, &mut rng)?;
        }
        let mut model = Self::new(encoder, n_classes, config.seed);
        select_trainable(&mut model, config.strategy)?;
        Ok(model)
    }

    /// Logits `B × K` in training mode.
    pub fn logits_train(&mut self, tape: &mut Tape, windows: &[&Matrix], rng: &mut Rng) -> Result<Var> {
        let enc = self.encoder.forward_windows(tape, windows)?;
        let pooled = tape.mean_pool(enc, self.encoder.config.num_tokens())?;
        self.head.forward_train(tape, pooled, rng)
    }

    /// Logits `B × K` in evaluation mode.
    pub fn logits_eval(&self, tape: &mut Tape, windows: &[&Matrix]) -> Result<Var> {
        let enc = self.encoder.forward_windows(tape, windows)?;
        pool_and_classify(tape, enc, self.encoder.config.num_tokens(), &self.head)
    }

    pub fn predict(&self, windows: &[&Matrix], batch_size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let logits = self.logits_eval(&mut tape, chunk)?;
            let l = tape.value(logits);
            for r in 0..l.rows() {
                let row = l.row(r);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, set: &LabeledSet, batch_size: usize) -> Result<MetricsReport> {
        let preds = self.predict(&set.refs(), batch_size)?;
        let cm = eval::confusion(&preds, &set.labels, self.head.n_classes())?;
        eval::metrics(&cm)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| {
            if p.trainable {
                names.push(p.name.clone())
            }
        });
        names
    }
}

impl Module for FineTuneModel {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.encoder.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }

    fn visit_quantized(&self, f: &mut dyn FnMut(&str, &QuantizedMatrix)) {
        self.encoder.visit_quantized(f);
    }
}

/// Mean-pools each window's `seq_len` tokens and applies the head in
/// evaluation mode.
pub fn pool_and_classify(tape: &mut Tape, encoded: Var, seq_len: usize, head: &ClassifierHead) -> Result<Var> {
    let pooled = tape.mean_pool(encoded, seq_len)?;
    head.forward_eval(tape, pooled)
}

/// Sets trainable flags for `strategy` and returns the trainable names.
pub fn select_trainable(model: &mut FineTuneModel, strategy: Strategy) -> Result<Vec<String>> {
    let mismatch = |reason: &str| Error::StrategyMismatch {
        strategy: strategy.as_str(),
        reason: reason.to_string(),
    };
    match (strategy, &model.encoder.wrap) {
        (Strategy::Full | Strategy::FrozenHead, Some(_)) => {
            return Err(mismatch("backbone carries adapters"));
        }
        (Strategy::Lora | Strategy::Qlora, None) => return Err(mismatch("backbone has no adapters")),
        (Strategy::Lora, Some(w)) if w.quantized => return Err(mismatch("backbone is quantized")),
        (Strategy::Qlora, Some(w)) if !w.quantized => return Err(mismatch("backbone is not quantized")),
        _ => {}
    }
    let adapter_names: Vec<String> = model
        .encoder
        .blocks
        .iter()
        .flat_map(|b| crate::peft::LoraTarget::ALL.map(|t| b.linear(t).adapter.clone()))
        .flatten()
        .flat_map(|a| [a.a.name, a.b.name])
        .collect();
    model.encoder.visit_mut(&mut |p| {
        p.trainable = match strategy {
            Strategy::Full => true,
            Strategy::FrozenHead => false,
            Strategy::Lora | Strategy::Qlora => adapter_names.contains(&p.name),
        }
    });
    model.head.set_trainable(true);
    Ok(model.trainable_names())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub strategy: Strategy,
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
    pub warnings: Vec<String>,
    pub resources: ResourceReport,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// One JSON record per epoch.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Shuffled mini-batch training with cross-entropy and Adam. Only parameters
/// flagged trainable change. `val` may be empty.
pub fn train(model: &mut FineTuneModel, data: &LabeledSet, val: &LabeledSet, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if data.windows.len() != data.labels.len() {
        return Err(Error::Data("windows and labels differ in length".into()));
    }
    let k = model.head.n_classes();
    let mut counts = vec![0usize; k];
    for &y in &data.labels {
        if y >= k {
            return Err(Error::IndexOutOfRange { index: y, len: k });
        }
        counts[y] += 1;
    }
    let warnings: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(c, _)| format!("class {c} has no training windows"))
        .collect();

    let mut adam = Adam::new(config.learning_rate);
    let mut epochs = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::substream(config.seed, Purpose::Shuffle, epoch as u32).shuffle(&mut order);
        let mut drop_rng = Rng::substream(config.seed, Purpose::Dropout, epoch as u32);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Matrix> = chunk.iter().map(|&i| &data.windows[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let logits = model.logits_train(&mut tape, &batch, &mut drop_rng)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            total += tape.value(loss).get(0, 0) * chunk.len() as f64;
            seen += chunk.len();
            tape.backward(loss)?;
            model.collect_grads(&tape)?;
            adam.step(model)?;
            model.zero_grad();
        }
        let seconds = t0.elapsed().as_secs_f64();
        let (val_accuracy, val_macro_f1) = if val.is_empty() {
            (None, None)
        } else {
            let m = model.evaluate(val, config.batch_size)?;
            (Some(m.accuracy), Some(m.macro_f1))
        };
        epochs.push(EpochRecord {
            epoch,
            loss: total / seen as f64,
            val_accuracy,
            val_macro_f1,
            seconds,
        });
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    let mut resources = eval::measure_memory(model)?;
    resources.wall_seconds = wall_seconds;
    Ok(TrainLog {
        strategy: config.strategy,
        epochs,
        wall_seconds,
        warnings,
        resources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_parsing() {
        assert_eq!("QLoRA".parse::<Strategy>().unwrap(), Strategy::Qlora);
        assert_eq!("frozen-head".parse::<Strategy>().unwrap(), Strategy::FrozenHead);
        assert!("bitfit".parse::<Strategy>().is_err());
    }

    #[test]
    fn lora_config_presence() {
        let mut c = TrainConfig::for_strategy(Strategy::Lora);
        assert!(c.validate().is_ok());
        c.lora = None;
        assert!(c.validate().is_err());
        let mut f = TrainConfig::for_strategy(Strategy::Full);
        f.lora = Some(LoraConfig::default());
        assert!(f.validate().is_err());
    }
}

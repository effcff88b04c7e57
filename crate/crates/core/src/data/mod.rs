//! Sensor recordings, preprocessing to fixed windows, synthetic domains and
//! leave-one-dataset-out folds.

mod ingest;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use ingest::{load_corpus, load_manifest, read_domain_csv, write_domain_csv, write_manifest, DomainEntry, Manifest};
pub use synthetic::{generate_recordings, generate_synthetic, ClassSignal, DomainShift, SyntheticSpec};

use crate::error::{Error, Result};
use crate::finetune::LabeledSet;
use crate::numerics::{Matrix, Purpose, Rng};

pub const TARGET_RATE: f64 = 50.0;
pub const WINDOW_LEN: usize = 128;
pub const WINDOW_STEP: usize = 64;

/// One contiguous recording of a single activity.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecording {
    /// `n × C`, one row per sample.
    pub samples: Matrix,
    pub sample_rate: f64,
    pub activity: String,
    pub domain: String,
    pub subject: Option<String>,
}

/// A `128 × C` segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub values: Matrix,
    pub activity: String,
    pub domain: String,
}

/// Windows plus the sorted label vocabulary they are classified against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub name: String,
    pub windows: Vec<Window>,
    pub vocabulary: Vec<String>,
}

impl DatasetBundle {
    /// Vocabulary taken from the windows themselves.
    pub fn from_windows(name: impl Into<String>, windows: Vec<Window>) -> Self {
        let vocabulary = windows
            .iter()
            .map(|w| w.activity.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self {
            name: name.into(),
            windows,
            vocabulary,
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn class_id(&self, activity: &str) -> Result<usize> {
        self.vocabulary
            .binary_search_by(|v| v.as_str().cmp(activity))
            .map_err(|_| Error::Data(format!("activity `{activity}` is not in the vocabulary")))
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.windows.iter().map(|w| self.class_id(&w.activity)).collect()
    }

    pub fn labeled(&self) -> Result<LabeledSet> {
        Ok(LabeledSet {
            windows: self.windows.iter().map(|w| w.values.clone()).collect(),
            labels: self.labels()?,
        })
    }

    pub fn values(&self) -> Vec<&Matrix> {
        self.windows.iter().map(|w| &w.values).collect()
    }

    /// Replaces the vocabulary with `vocab`, which must cover every window.
    pub fn with_vocabulary(mut self, vocab: &[String]) -> Result<Self> {
        self.vocabulary = vocab.to_vec();
        self.labels()?;
        Ok(self)
    }
}

/// Resamples to 50 Hz. Integer ratios use a boxcar (block-mean) prefilter
/// and keep one output per block; other ratios use linear interpolation.
pub fn resample_to_50hz(rec: &SensorRecording) -> Result<SensorRecording> {
    let rate = rec.sample_rate;
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::Data(format!("invalid sample rate {rate}")));
    }
    if rate < TARGET_RATE {
        return Err(Error::UnsupportedUpsampling(rate));
    }
    let out = |samples| SensorRecording {
        samples,
        sample_rate: TARGET_RATE,
        ..rec.clone()
    };
    if rate == TARGET_RATE {
        return Ok(out(rec.samples.clone()));
    }
    let (n, c) = rec.samples.shape();
    let ratio = rate / TARGET_RATE;
    let k = ratio.round() as usize;
    if (ratio - k as f64).abs() < 1e-9 {
        let m = n / k;
        let samples = Matrix::from_fn(m, c, |i, j| {
            (0..k).map(|s| rec.samples.get(i * k + s, j)).sum::<f64>() / k as f64
        });
        return Ok(out(samples));
    }
    let m = ((n - 1) as f64 / ratio).floor() as usize + 1;
    let samples = Matrix::from_fn(m, c, |i, j| {
        let pos = i as f64 * ratio;
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = pos - lo as f64;
        rec.samples.get(lo, j) * (1.0 - frac) + rec.samples.get(hi, j) * frac
    });
    Ok(out(samples))
}

const STD_FLOOR: f64 = 1e-12;

/// Per-channel mean and population standard deviation over all samples.
pub fn channel_stats(recs: &[&Matrix]) -> (Vec<f64>, Vec<f64>) {
    let c = recs.first().map_or(0, |m| m.cols());
    let n: usize = recs.iter().map(|m| m.rows()).sum();
    let mut mean = vec![0.0; c];
    for m in recs {
        for r in 0..m.rows() {
            for (acc, v) in mean.iter_mut().zip(m.row(r)) {
                *acc += v;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    let mut var = vec![0.0; c];
    for m in recs {
        for r in 0..m.rows() {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
    }
    let std = var.iter().map(|v| (v / n.max(1) as f64).sqrt()).collect();
    (mean, std)
}

/// Z-normalizes each channel with statistics pooled over all recordings of
/// one domain. Channels with (near) zero spread become zeros.
pub fn znormalize(recs: &mut [SensorRecording]) {
    let (mean, std) = channel_stats(&recs.iter().map(|r| &r.samples).collect::<Vec<_>>());
    for rec in recs {
        let s = &mut rec.samples;
        for r in 0..s.rows() {
            for (j, v) in s.row_mut(r).iter_mut().enumerate() {
                *v = if std[j] < STD_FLOOR { 0.0 } else { (*v - mean[j]) / std[j] };
            }
        }
    }
}

/// Windows of 128 samples every 64 samples, fully inside the recording.
pub fn segment_windows(rec: &SensorRecording) -> Result<Vec<Window>> {
    if rec.sample_rate != TARGET_RATE {
        return Err(Error::Data(format!(
            "segmentation expects {TARGET_RATE} Hz, got {} Hz",
            rec.sample_rate
        )));
    }
    let n = rec.samples.rows();
    if n < WINDOW_LEN {
        return Ok(Vec::new());
    }
    Ok((0..=(n - WINDOW_LEN) / WINDOW_STEP)
        .map(|i| Window {
            values: rec.samples.slice_rows(i * WINDOW_STEP, i * WINDOW_STEP + WINDOW_LEN),
            activity: rec.activity.clone(),
            domain: rec.domain.clone(),
        })
        .collect())
}

/// Resample, normalize per domain, then segment.
pub fn preprocess_domain(name: &str, recs: &[SensorRecording]) -> Result<DatasetBundle> {
    let mut resampled = recs.iter().map(resample_to_50hz).collect::<Result<Vec<_>>>()?;
    znormalize(&mut resampled);
    let mut windows = Vec::new();
    for r in &resampled {
        windows.extend(segment_windows(r)?);
    }
    Ok(DatasetBundle::from_windows(name, windows))
}

/// Sorted union of the activity names of all bundles.
pub fn label_union(bundles: &[DatasetBundle]) -> Vec<String> {
    bundles
        .iter()
        .flat_map(|b| b.windows.iter().map(|w| w.activity.clone()).chain(b.vocabulary.iter().cloned()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Pools several domains under the union vocabulary.
pub fn build_label_union(bundles: &[DatasetBundle]) -> Result<DatasetBundle> {
    if bundles.is_empty() {
        return Err(Error::Data("no domains to combine".into()));
    }
    let vocabulary = label_union(bundles);
    let name = bundles.iter().map(|b| b.name.as_str()).collect::<Vec<_>>().join("+");
    let windows = bundles.iter().flat_map(|b| b.windows.iter().cloned()).collect();
    Ok(DatasetBundle {
        name,
        windows,
        vocabulary,
    })
}

/// One leave-one-dataset-out fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub target_domain: String,
    pub pretrain: DatasetBundle,
    pub target: DatasetBundle,
}

/// `D` folds; fold `i` targets domain `i` and pretrains on the rest. Both
/// sides use the union vocabulary of all domains.
pub fn lodo_folds(bundles: &[DatasetBundle]) -> Result<Vec<Fold>> {
    if bundles.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-dataset-out needs at least 2 domains, got {}",
            bundles.len()
        )));
    }
    let names: BTreeSet<&str> = bundles.iter().map(|b| b.name.as_str()).collect();
    if names.len() != bundles.len() {
        return Err(Error::Protocol("domain names must be unique".into()));
    }
    let vocab = label_union(bundles);
    bundles
        .iter()
        .enumerate()
        .map(|(i, target)| {
            let rest: Vec<DatasetBundle> = bundles
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| b.clone())
                .collect();
            Ok(Fold {
                target_domain: target.name.clone(),
                pretrain: build_label_union(&rest)?.with_vocabulary(&vocab)?,
                target: target.clone().with_vocabulary(&vocab)?,
            })
        })
        .collect()
}

/// Result of [`split_train_eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: DatasetBundle,
    pub eval: DatasetBundle,
    pub warnings: Vec<String>,
}

/// Class-stratified split. The overall train size is `round(fraction·N)`,
/// distributed over classes by largest remainder; every class with at least
/// two windows keeps one on each side, and singleton classes go to train.
pub fn split_train_eval(target: &DatasetBundle, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, w) in target.windows.iter().enumerate() {
        by_class.entry(&w.activity).or_default().push(i);
    }
    let mut rng = Rng::substream(seed, Purpose::Split, 0);
    for idx in by_class.values_mut() {
        rng.shuffle(idx);
    }

    let total = (fraction * target.len() as f64).round() as usize;
    let classes: Vec<(&str, Vec<usize>)> = by_class.into_iter().collect();
    let ideal: Vec<f64> = classes.iter().map(|(_, v)| fraction * v.len() as f64).collect();
    let bounds: Vec<(usize, usize)> = classes
        .iter()
        .map(|(_, v)| if v.len() < 2 { (v.len(), v.len()) } else { (1, v.len() - 1) })
        .collect();
    let mut take: Vec<usize> = ideal
        .iter()
        .zip(&bounds)
        .map(|(x, &(lo, hi))| (x.floor() as usize).clamp(lo, hi))
        .collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut assigned: usize = take.iter().sum();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if assigned >= total {
            break;
        }
        if take[c] < bounds[c].1 && (take[c] as f64) < ideal[c].ceil() {
            take[c] += 1;
            assigned += 1;
        }
    }

    let mut warnings = Vec::new();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for ((name, idx), &n) in classes.iter().zip(&take) {
        if idx.len() == 1 {
            warnings.push(format!("class `{name}` has a single window; placed in the training split"));
        }
        let mut sorted_train: Vec<usize> = idx[..n].to_vec();
        let mut sorted_eval: Vec<usize> = idx[n..].to_vec();
        sorted_train.sort_unstable();
        sorted_eval.sort_unstable();
        train.extend(sorted_train);
        eval.extend(sorted_eval);
    }
    train.sort_unstable();
    eval.sort_unstable();
    let pick = |ids: &[usize]| DatasetBundle {
        name: target.name.clone(),
        windows: ids.iter().map(|&i| target.windows[i].clone()).collect(),
        vocabulary: target.vocabulary.clone(),
    };
    Ok(Split {
        train: pick(&train),
        eval: pick(&eval),
        warnings,
    })
}

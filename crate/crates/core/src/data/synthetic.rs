use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{preprocess_domain, DatasetBundle, SensorRecording};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Purpose, Rng};

/// Oscillatory signal family for one activity class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignal {
    pub name: String,
    /// Fundamental frequency in Hz.
    pub base_freq: f64,
    pub amplitude: f64,
    /// Relative amplitude of the fundamental and each following harmonic.
    pub harmonics: Vec<f64>,
    /// Per-channel constant level (posture-like component).
    pub offsets: Vec<f64>,
}

/// Covariate shift applied to every recording of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub name: String,
    pub sample_rate: f64,
    pub amplitude_scale: f64,
    pub freq_offset: f64,
    pub noise_std: f64,
    pub channel_gain: Vec<f64>,
    /// Classes recorded in this domain; all when absent.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

impl DomainShift {
    pub fn null(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            sample_rate: 50.0,
            amplitude_scale: 1.0,
            freq_offset: 0.0,
            noise_std: 0.0,
            channel_gain: vec![1.0; channels],
            classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub classes: Vec<ClassSignal>,
    pub domains: Vec<DomainShift>,
    pub recordings_per_class: usize,
    /// Length of each recording in seconds.
    pub seconds: f64,
    pub seed: u64,
}

const ACTIVITIES: [&str; 8] = [
    "walk", "run", "sit", "stand", "upstairs", "downstairs", "bike", "lie",
];
const RATES: [f64; 5] = [50.0, 100.0, 200.0, 75.0, 100.0];

impl Default for SyntheticSpec {
    /// Five shifted domains of six activities at mixed sample rates.
    fn default() -> Self {
        Self::separable(5, 6, 0)
    }
}

impl SyntheticSpec {
    /// `n_domains` shifted domains sharing `n_classes` well separated signal
    /// families. Class `c` oscillates at `0.7 + 0.55·c` Hz and carries its
    /// own per-channel offsets.
    pub fn separable(n_domains: usize, n_classes: usize, seed: u64) -> Self {
        let channels = 6;
        let mut rng = Rng::substream(seed, Purpose::Synthesis, u32::MAX);
        let classes = (0..n_classes)
            .map(|c| ClassSignal {
                name: ACTIVITIES
                    .get(c)
                    .map_or_else(|| format!("activity{c}"), |s| s.to_string()),
                base_freq: 0.7 + 0.55 * c as f64,
                amplitude: 0.8 + 0.15 * (c % 3) as f64,
                harmonics: vec![1.0, 0.45, 0.2],
                offsets: (0..channels).map(|_| 2.0 * rng.uniform() - 1.0).collect(),
            })
            .collect();
        let domains = (0..n_domains)
            .map(|d| DomainShift {
                name: format!("domain{d}"),
                sample_rate: RATES[d % RATES.len()],
                amplitude_scale: 0.85 + 0.3 * rng.uniform(),
                freq_offset: 0.3 * (2.0 * rng.uniform() - 1.0),
                noise_std: 0.05 + 0.1 * rng.uniform(),
                channel_gain: (0..channels).map(|_| 0.8 + 0.4 * rng.uniform()).collect(),
                classes: None,
            })
            .collect();
        Self {
            channels,
            classes,
            domains,
            recordings_per_class: 4,
            seconds: 12.8,
            seed,
        }
    }

    /// Same classes, every domain replaced by a shift-free copy.
    pub fn without_shift(mut self) -> Self {
        let c = self.channels;
        self.domains = self.domains.iter().map(|d| DomainShift::null(&d.name, c)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one class".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one domain".into()));
        }
        if self.channels == 0 || self.recordings_per_class == 0 || !(self.seconds > 0.0) {
            return Err(Error::Config("channels, recordings and duration must be positive".into()));
        }
        for (i, a) in self.classes.iter().enumerate() {
            if a.offsets.len() != self.channels || a.harmonics.is_empty() || !(a.base_freq > 0.0) {
                return Err(Error::Config(format!("class `{}` is malformed", a.name)));
            }
            for b in &self.classes[i + 1..] {
                if a.name == b.name || (a.base_freq == b.base_freq && a.offsets == b.offsets) {
                    return Err(Error::Config(format!(
                        "classes `{}` and `{}` are not distinct",
                        a.name, b.name
                    )));
                }
            }
        }
        for d in &self.domains {
            if d.channel_gain.len() != self.channels || !(d.sample_rate > 0.0) || d.noise_std < 0.0 {
                return Err(Error::Config(format!("domain `{}` is malformed", d.name)));
            }
        }
        Ok(())
    }
}

/// Raw recordings at each domain's native rate, one list per domain.
///
/// Recording phases and per-recording amplitude jitter depend only on the
/// class and recording index, so shift-free domains are identical.
pub fn generate_recordings(spec: &SyntheticSpec) -> Result<Vec<Vec<SensorRecording>>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.domains.len());
    for (d, dom) in spec.domains.iter().enumerate() {
        let mut recs = Vec::new();
        for (c, class) in spec.classes.iter().enumerate() {
            if let Some(list) = &dom.classes {
                if !list.contains(&class.name) {
                    continue;
                }
            }
            for r in 0..spec.recordings_per_class {
                let key = (c * 1000 + r) as u32;
                let mut phase_rng = Rng::substream(spec.seed, Purpose::Synthesis, key);
                let jitter = 1.0 + 0.1 * (2.0 * phase_rng.uniform() - 1.0);
                let phases: Vec<Vec<f64>> = (0..spec.channels)
                    .map(|_| class.harmonics.iter().map(|_| 2.0 * PI * phase_rng.uniform()).collect())
                    .collect();
                let mut noise = Rng::substream(spec.seed, Purpose::Noise, (d as u32) << 20 | key);
                let n = (spec.seconds * dom.sample_rate).round() as usize;
                let f = class.base_freq + dom.freq_offset;
                let amp = class.amplitude * dom.amplitude_scale * jitter;
                let samples = Matrix::from_fn(n.max(1), spec.channels, |i, j| {
                    let t = i as f64 / dom.sample_rate;
                    let wave: f64 = class
                        .harmonics
                        .iter()
                        .enumerate()
                        .map(|(h, w)| w * (2.0 * PI * (h + 1) as f64 * f * t + phases[j][h]).sin())
                        .sum();
                    dom.channel_gain[j] * (amp * wave + class.offsets[j]) + dom.noise_std * noise.normal()
                });
                recs.push(SensorRecording {
                    samples,
                    sample_rate: dom.sample_rate,
                    activity: class.name.clone(),
                    domain: dom.name.clone(),
                    subject: Some(format!("s{r}")),
                });
            }
        }
        out.push(recs);
    }
    Ok(out)
}

/// Generated, preprocessed and windowed domains.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DatasetBundle>> {
    generate_recordings(spec)?
        .iter()
        .zip(&spec.domains)
        .map(|(recs, dom)| preprocess_domain(&dom.name, recs))
        .collect()
}

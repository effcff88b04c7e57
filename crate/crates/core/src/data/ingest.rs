//! Tabular text ingestion.
//!
//! Each domain is one CSV file with a mandatory header. Every column before
//! `activity` is a channel (canonically
//! `acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z`), then `activity`, then an
//! optional `subject`. Consecutive rows sharing activity and subject form
//! one recording. A TOML manifest lists the domains:
//!
//! ```toml
//! [[domain]]
//! name = "pamap2"
//! path = "pamap2.csv"
//! sample_rate = 100.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{preprocess_domain, DatasetBundle, SensorRecording};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHANNEL_NAMES: [&str; 6] = ["acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub name: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub sample_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    #[serde(rename = "domain", default)]
    pub domains: Vec<DomainEntry>,
}

impl Manifest {
    pub fn names(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.name.as_str()).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let m: Manifest = toml::from_str(&text)?;
    if m.domains.is_empty() {
        return Err(Error::Config(format!("{} lists no domains", path.display())));
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    fs::write(path, toml::to_string(manifest)?)?;
    Ok(())
}

/// Reads one domain file into recordings.
pub fn read_domain_csv(path: &Path, domain: &str, sample_rate: f64) -> Result<Vec<SensorRecording>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let act_col = header
        .iter()
        .position(|h| h.trim() == "activity")
        .ok_or_else(|| Error::Data(format!("{}: header lacks an `activity` column", path.display())))?;
    if act_col == 0 {
        return Err(Error::Data(format!("{}: no channel columns", path.display())));
    }
    let subj_col = header.iter().position(|h| h.trim() == "subject");
    let channels = act_col;

    let mut recs: Vec<SensorRecording> = Vec::new();
    let mut current: Option<(String, Option<String>, Vec<f64>)> = None;
    let flush = |cur: Option<(String, Option<String>, Vec<f64>)>, recs: &mut Vec<SensorRecording>| -> Result<()> {
        if let Some((activity, subject, values)) = cur {
            let n = values.len() / channels;
            recs.push(SensorRecording {
                samples: Matrix::from_vec(n, channels, values)?,
                sample_rate,
                activity,
                domain: domain.to_string(),
                subject,
            });
        }
        Ok(())
    };
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let activity = row.get(act_col).unwrap_or("").trim().to_string();
        if activity.is_empty() {
            return Err(Error::Data(format!("{}: row {} has no activity", path.display(), line + 2)));
        }
        let subject = subj_col
            .and_then(|c| row.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        let same = matches!(&current, Some((a, s, _)) if *a == activity && *s == subject);
        if !same {
            flush(current.take(), &mut recs)?;
            current = Some((activity, subject, Vec::new()));
        }
        let buf = &mut current.as_mut().expect("set above").2;
        for c in 0..channels {
            let field = row.get(c).unwrap_or("").trim();
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!("{}: row {} column {}: `{field}` is not a number", path.display(), line + 2, c + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("{}: row {} has a non-finite value", path.display(), line + 2)));
            }
            buf.push(v);
        }
    }
    flush(current, &mut recs)?;
    Ok(recs)
}

/// Writes recordings in the format read by [`read_domain_csv`].
pub fn write_domain_csv(path: &Path, recs: &[SensorRecording]) -> Result<()> {
    let channels = recs.first().map_or(CHANNEL_NAMES.len(), |r| r.samples.cols());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = if channels == CHANNEL_NAMES.len() {
        CHANNEL_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..channels).map(|c| format!("ch{c}")).collect()
    };
    header.push("activity".into());
    header.push("subject".into());
    w.write_record(&header)?;
    for rec in recs {
        let subject = rec.subject.clone().unwrap_or_default();
        for r in 0..rec.samples.rows() {
            let mut fields: Vec<String> = rec.samples.row(r).iter().map(|v| format!("{v:?}")).collect();
            fields.push(rec.activity.clone());
            fields.push(subject.clone());
            w.write_record(&fields)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads and preprocesses every domain listed in the manifest.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<DatasetBundle>> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .domains
        .iter()
        .map(|d| {
            let path = if d.path.is_absolute() { d.path.clone() } else { base.join(&d.path) };
            let recs = read_domain_csv(&path, &d.name, d.sample_rate)?;
            preprocess_domain(&d.name, &recs)
        })
        .collect()
}

//! Configuration layering and run manifests.
//!
//! Settings resolve as built-in defaults, then the TOML file given with
//! `--config`, then individual flags. The file mirrors
//! [`ExperimentConfig`]:
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! embed_dim = 64
//! n_enc_layers = 6
//!
//! [pretrain]
//! epochs = 10
//!
//! [finetune]
//! epochs = 50
//! learning_rate = 0.001
//!
//! [lora]
//! rank = 8
//! alpha = 16.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use harpeft_core::eval::ExperimentConfig;
use serde::Serialize;

use crate::Failure;

pub const OUT_DIR_ENV: &str = "HARPEFT_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "harpeft-out";

/// Training knobs that may override the config file.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// Fine-tuning epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// MAE pretraining epochs.
    #[arg(long, global = true)]
    pub pretrain_epochs: Option<usize>,
    /// Mini-batch size for fine-tuning and pretraining.
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Fine-tuning learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
        }
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig, seed: Option<u64>) {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.finetune.epochs = e;
        }
        if let Some(e) = self.pretrain_epochs {
            cfg.pretrain.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.finetune.batch_size = b;
            cfg.pretrain.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.finetune.learning_rate = lr;
        }
    }
}

/// `--out`, else `$HARPEFT_OUT_DIR`, else `./harpeft-out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Everything needed to replay a command.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub argv: Vec<String>,
    pub config: &'a C,
    pub seed: u64,
    pub inputs: Vec<(String, PathBuf)>,
    pub out_dir: &'a Path,
    pub version: &'static str,
    pub timestamp_unix: u64,
}

impl<'a, C: Serialize> RunManifest<'a, C> {
    pub fn new(command: &'a str, config: &'a C, seed: u64, out_dir: &'a Path) -> Self {
        Self {
            command,
            argv: std::env::args().collect(),
            config,
            seed,
            inputs: Vec::new(),
            out_dir,
            version: env!("CARGO_PKG_VERSION"),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn input(mut self, role: &str, path: &Path) -> Self {
        self.inputs.push((role.to_string(), path.to_path_buf()));
        self
    }

    /// Creates the output directory and writes `run_manifest.json`.
    pub fn write(&self) -> Result<(), Failure> {
        fs::create_dir_all(self.out_dir)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Failure::runtime(e.to_string()))?;
        fs::write(self.out_dir.join("run_manifest.json"), json + "\n")?;
        Ok(())
    }
}

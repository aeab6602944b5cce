//! Run configuration: TOML file plus dotted `key=value` overrides.
//!
//! ```toml
//! seed = 7
//! epochs = 250
//!
//! [backbone]
//! dim = 128
//!
//! [decoder]
//! layers = 6
//! ```
//!
//! Unknown keys are rejected so typos fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::decoder::DecoderConfig;
use crate::drawing::synth::GeneratorSpec;
use crate::error::{Error, Result};
use crate::lfe::LfeConfig;
use crate::loss::LossConfig;
use crate::metrics::WeightMode;
use crate::pgt::{EncodingKind, PgtConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Drawings per optimizer step (gradient accumulation).
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            min_lr: 0.0,
            weight_decay: 0.1,
            schedule: Schedule::Cosine,
            clip_norm: 1.0,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Weighting of wF1: `log_length` (default) or `length`.
    pub f1_weighting: WeightMode,
    /// Synthetic set used when no training file is given.
    pub synthetic_count: usize,
    pub synthetic: GeneratorSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            eval: None,
            f1_weighting: WeightMode::LogLength,
            synthetic_count: 10,
            synthetic: GeneratorSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub output_dir: PathBuf,
    /// Evaluate on the training set every this many epochs (0: never).
    pub eval_every: usize,
    /// Worker threads for evaluation (0: available parallelism).
    pub threads: usize,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub lfe: LfeConfig,
    pub pgt: PgtConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 250,
            output_dir: PathBuf::from("runs/default"),
            eval_every: 0,
            threads: 0,
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            lfe: LfeConfig::default(),
            pgt: PgtConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Sets `key` (dot-separated path) in `root` to the TOML value `raw`, or to
/// the bare string when `raw` is not valid TOML.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override '{assignment}' has an empty key")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{part}' in '{key}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Copy of `self` with `overrides` applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&self.to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = self.backbone.dim;
        if d == 0 || self.backbone.k == 0 || self.backbone.levels == 0 || self.backbone.ratio < 2 {
            return bad("backbone.dim, k and levels must be positive and ratio at least 2".into());
        }
        if self.decoder.heads == 0 || !d.is_multiple_of(self.decoder.heads) {
            return bad(format!("backbone.dim {d} must be divisible by decoder.heads {}", self.decoder.heads));
        }
        if self.decoder.num_queries == 0 {
            return bad("decoder.num_queries must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.decoder.tau_mask) || !(0.0..=1.0).contains(&self.decoder.tau_cls) {
            return bad("decoder thresholds must lie in [0, 1]".into());
        }
        match self.pgt.encoding {
            EncodingKind::Fourier if !d.is_multiple_of(2) => return bad("fourier encoding needs an even backbone.dim".into()),
            EncodingKind::Sine if !d.is_multiple_of(4) => return bad("sine encoding needs backbone.dim divisible by 4".into()),
            _ => {}
        }
        if !(self.pgt.epsilon >= 0.0 && self.pgt.epsilon.is_finite()) {
            return bad("pgt.epsilon must be finite and non-negative".into());
        }
        if self.lfe.hidden_dim == 0 {
            return bad("lfe.hidden_dim must be positive".into());
        }
        // negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.optim.lr > 0.0) || self.optim.min_lr < 0.0 || self.optim.batch_size == 0 || self.optim.clip_norm < 0.0 {
            return bad("optim.lr and batch_size must be positive; min_lr and clip_norm non-negative".into());
        }
        self.loss.validate()
    }
}

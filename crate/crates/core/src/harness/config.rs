//! Training configuration: TOML file plus `MATCNN_` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossFlags, LossWeights};
use crate::optim::AdamConfig;
use crate::saliency::{MaskMethod, DEFAULT_QUANTILE};

/// Prefix of environment variables that override config keys. Nested keys
/// are joined with `__`, e.g. `MATCNN_LOSS_WEIGHTS__ALPHA=7`.
pub const ENV_PREFIX: &str = "MATCNN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Quantile,
    Otsu,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub method: MaskKind,
    pub quantile: f64,
    /// Directory of per-source mask images named like the infrared files.
    pub dir: Option<PathBuf>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            method: MaskKind::Quantile,
            quantile: DEFAULT_QUANTILE,
            dir: None,
        }
    }
}

impl MaskConfig {
    /// Method for computed masks; external masks are resolved per source.
    pub fn computed_method(&self) -> MaskMethod {
        match self.method {
            MaskKind::Otsu => MaskMethod::Otsu,
            _ => MaskMethod::Quantile { q: self.quantile },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lr_hold_epochs: usize,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub loss_flags: LossFlags,
    pub mask: MaskConfig,
    /// Shuffling seed.
    pub seed: u64,
    pub msfm_seed: u64,
    pub gfem_seed: u64,
    /// Root holding `ir/` and `vis/`.
    pub data_dir: Option<PathBuf>,
    pub patch_size: usize,
    pub stride: usize,
    /// Systematic subsample of the patch set when set.
    pub max_patches: Option<usize>,
    pub checkpoint_dir: PathBuf,
    pub keep_last: usize,
    /// Defaults to `loss.csv` inside the checkpoint directory.
    pub loss_log: Option<PathBuf>,
    /// Archive to take extractor weights from instead of seeded init.
    pub gfem_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 110,
            lr_initial: 0.2,
            lr_final: 0.05,
            lr_hold_epochs: 100,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            loss_flags: LossFlags::default(),
            mask: MaskConfig::default(),
            seed: 0,
            msfm_seed: 0,
            gfem_seed: 0,
            data_dir: None,
            patch_size: crate::dataio::PATCH_SIZE,
            stride: crate::dataio::PATCH_STRIDE,
            max_patches: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            keep_last: 3,
            loss_log: None,
            gfem_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite() && self.lr_final > 0.0 && self.lr_final <= self.lr_initial) {
            return bad(format!(
                "need 0 < lr_final ≤ lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            ));
        }
        if self.patch_size == 0 || self.stride == 0 {
            return bad("patch_size and stride must be positive".into());
        }
        if self.keep_last == 0 {
            return bad("keep_last must be at least 1".into());
        }
        if !(self.mask.quantile > 0.0 && self.mask.quantile <= 1.0) {
            return bad(format!("mask quantile must be in (0, 1], got {}", self.mask.quantile));
        }
        if self.mask.method == MaskKind::External && self.mask.dir.is_none() {
            return bad("external masks need mask.dir".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        self.loss_weights.validate()
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.loss_log
            .clone()
            .unwrap_or_else(|| self.checkpoint_dir.join("loss.csv"))
    }

    /// Parses TOML text, applies overrides, validates.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let table = value
            .as_table_mut()
            .ok_or_else(|| Error::Config("config root must be a table".into()))?;
        for (k, v) in env {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
                set_path(table, &path, parse_scalar(&v))?;
            }
        }
        let cfg: TrainConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file with overrides from the process environment.
    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with_env(&text, std::env::vars())?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.checkpoint_dir);
        for p in [
            self.data_dir.as_mut(),
            self.loss_log.as_mut(),
            self.gfem_checkpoint.as_mut(),
            self.mask.dir.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], v: toml::Value) -> Result<()> {
    match path {
        [] => Err(Error::Config("empty override key".into())),
        [leaf] => {
            table.insert(leaf.clone(), v);
            Ok(())
        }
        [head, rest @ ..] => {
            let entry = table
                .entry(head.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let sub = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override descends into non-table key {head}")))?;
            set_path(sub, rest, v)
        }
    }
}

/// Learning rate for a zero-based epoch: `lr_initial` for the first
/// `lr_hold_epochs`, then linear steps reaching `lr_final` on the last epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::OutOfRange(format!("epoch {epoch} of {}", config.epochs)));
    }
    let hold = config.lr_hold_epochs;
    if epoch < hold || config.epochs <= hold {
        return Ok(config.lr_initial);
    }
    let frac = (epoch - hold + 1) as f64 / (config.epochs - hold) as f64;
    Ok(config.lr_initial - (config.lr_initial - config.lr_final) * frac)
}

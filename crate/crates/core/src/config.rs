//! Experiment configuration: one TOML file describing data, model,
//! mechanism and evaluation, with dotted-key overrides (`mechanism.seed=3`).
//!
//! ```toml
//! output_dir = "runs/ideal"
//!
//! [data.synthetic]          # or: [data] folder = "path", image_size = 32
//! num_base_shapes = 6
//! image_size = 32
//!
//! [model]
//! embedding_dim = 128
//! conv_channels = [16, 32, 64]
//!
//! [mechanism]
//! mode = "ideal"            # data-aug | multi-model | ideal
//! domains = [0, 1, 2, 3]
//! split_heads = true
//! epochs = 20
//! seed = 0
//!
//! [mechanism.loss]
//! kind = "multi-similarity" # contrastive | triplet | multi-similarity
//!
//! [eval]
//! domains = [0, 1, 2, 3]
//! ks = [1, 2, 4, 8]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    generate_synthetic, load_image_folder, split_train_test, DataError, Dataset, GlyphConfig,
};
use crate::model::{ConvStage, ModelConfig};
use crate::trainer::{EvalConfig, Mechanism, MechanismConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("override `{0}` must look like key.path=value")]
    Override(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid(key: &str, message: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Generate a synthetic glyph dataset with these settings.
    pub synthetic: Option<GlyphConfig>,
    /// Or load an image folder (`root/<class>/<image>`).
    pub folder: Option<PathBuf>,
    /// Channels and square size images are decoded to (folders only).
    pub channels: usize,
    pub image_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            synthetic: None,
            folder: None,
            channels: 1,
            image_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embedding_dim: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            conv_channels: vec![16, 32, 64],
            kernel: 3,
            stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelSection,
    pub mechanism: MechanismConfig,
    pub eval: EvalConfig,
}

/// Parses `value` as a TOML value, falling back to a plain string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.into()));
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(&parts[..=i].join("."), "is not a table"))?;
    }
    cur.insert(
        parts[parts.len() - 1].to_string(),
        parse_value(value.trim()),
    );
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML `text` (named `origin` in errors), applies `overrides`
    /// and validates the result.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let parse_err = |e: toml::de::Error| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string(),
        };
        // parse once as written so errors carry line numbers
        let cfg: ExperimentConfig = toml::from_str(text).map_err(parse_err)?;
        let cfg = if overrides.is_empty() {
            cfg
        } else {
            let mut table: toml::Table = text.parse().map_err(parse_err)?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| ConfigError::Parse {
                    path: format!("{origin} (after overrides)"),
                    message: e.to_string(),
                })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string(), overrides)
    }

    /// Cross-field checks, each naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.data.synthetic, &self.data.folder) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "data",
                    "set either data.synthetic or data.folder, not both",
                ))
            }
            (None, None) => return Err(invalid("data", "set data.synthetic or data.folder")),
            (Some(g), None) => g.validate().map_err(|e| invalid("data.synthetic", e))?,
            (None, Some(dir)) => {
                if !dir.is_dir() {
                    return Err(invalid(
                        "data.folder",
                        format!("{} is not a directory", dir.display()),
                    ));
                }
                if self.data.channels != 1 && self.data.channels != 3 {
                    return Err(invalid("data.channels", "must be 1 or 3"));
                }
            }
        }
        let m = &self.mechanism;
        if m.split_heads && m.mode != Mechanism::Ideal {
            return Err(invalid(
                "mechanism.split_heads",
                "only the ideal mechanism has split heads",
            ));
        }
        m.loss
            .validate()
            .map_err(|e| invalid("mechanism.loss", e))?;
        m.optimizer
            .validate()
            .map_err(|e| invalid("mechanism.optimizer", e))?;
        m.data_aug
            .validate()
            .map_err(|e| invalid("mechanism.data_aug", e))?;
        m.sampler
            .validate()
            .map_err(|e| invalid("mechanism.sampler", e))?;
        let k = m.domains.len();
        if m.split_heads && self.model.embedding_dim % k != 0 {
            return Err(invalid(
                "model.embedding_dim",
                format!(
                    "{} is not divisible by the {k} domains in mechanism.domains",
                    self.model.embedding_dim
                ),
            ));
        }
        if self.model.embedding_dim == 0 {
            return Err(invalid("model.embedding_dim", "must be positive"));
        }
        if self.model.conv_channels.is_empty() || self.model.conv_channels.contains(&0) {
            return Err(invalid(
                "model.conv_channels",
                "needs at least one positive channel count",
            ));
        }
        if self.model.kernel == 0 || self.model.stride == 0 {
            return Err(invalid("model", "kernel and stride must be positive"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(invalid("eval.ks", "must list K values >= 1"));
        }
        if m.mode != Mechanism::DataAug && !(m.mode == Mechanism::Ideal && !m.split_heads) {
            if let Some(r) = self
                .eval
                .domains
                .rotations()
                .iter()
                .find(|r| !m.domains.rotations().contains(r))
            {
                return Err(invalid(
                    "eval.domains",
                    format!("rotation {r} is not among mechanism.domains, so no model or head serves it"),
                ));
            }
        }
        let [_, h, w] = self.input_shape();
        if let Err(e) = self.model_template().validate() {
            return Err(invalid("model", e));
        }
        if let Some(c) = m.data_aug.crop_size {
            if c != h || c != w {
                return Err(invalid(
                    "mechanism.data_aug.crop_size",
                    format!("must equal the image size {h}"),
                ));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match &self.data.synthetic {
            Some(g) => [1, g.image_size, g.image_size],
            None => [
                self.data.channels,
                self.data.image_size,
                self.data.image_size,
            ],
        }
    }

    /// Model layout; the mechanism decides domain count and heads.
    pub fn model_template(&self) -> ModelConfig {
        ModelConfig {
            input_shape: self.input_shape(),
            conv_stages: self
                .model
                .conv_channels
                .iter()
                .map(|&out_channels| ConvStage {
                    out_channels,
                    kernel: self.model.kernel,
                    stride: self.model.stride,
                })
                .collect(),
            embedding_dim: self.model.embedding_dim,
            num_domains: self.mechanism.domains.len(),
            split_heads: self.mechanism.split_heads,
        }
    }

    /// The full dataset described by `[data]`.
    pub fn load_dataset(&self) -> Result<Dataset, DataError> {
        match (&self.data.synthetic, &self.data.folder) {
            (Some(g), _) => generate_synthetic(g),
            (None, Some(dir)) => load_image_folder(dir, self.data.channels, self.data.image_size),
            (None, None) => Err(DataError::Config("no data source configured".into())),
        }
    }

    /// Class-disjoint train and test splits.
    pub fn load_splits(&self) -> Result<(Dataset, Dataset), DataError> {
        split_train_test(&self.load_dataset()?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e.to_string())
    }
}

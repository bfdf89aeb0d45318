//! `key = value` configuration files covering both model and training
//! settings. Blank lines and `#` comments are ignored; unknown keys are
//! errors.

use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::model::{default_ca_ratio, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses `text`; `origin` names the source in error messages.
    /// `seed` sets both the model and training seed. Unless `ca_ratio` is
    /// given it follows `channels`.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut explicit_ca = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: String| Error::ConfigSyntax {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let in_model = cfg
                .model
                .set(key, value)
                .map_err(|m| syntax(format!("{key}: {m}")))?;
            let in_train = cfg
                .train
                .set(key, value)
                .map_err(|m| syntax(format!("{key}: {m}")))?;
            if !in_model && !in_train {
                return Err(syntax(format!("unknown key `{key}`")));
            }
            explicit_ca |= key == "ca_ratio";
        }
        if !explicit_ca {
            cfg.model.ca_ratio = default_ca_ratio(cfg.model.channels);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }
}

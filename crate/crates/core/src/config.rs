//! Experiment configuration files (TOML).
//!
//! A file holds both domain specs, the training config and the output
//! location. Unknown keys are rejected, and [`ExperimentConfig::dump`] writes
//! every setting explicitly, so a dumped default is a complete, commented
//! starting point. Settings that can be derived from the data are written as
//! the string `"auto"`.

use crate::data::{DomainKind, DomainSpec};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory receiving datasets, checkpoints and metrics.
    pub output_dir: PathBuf,
    /// Fraction of target identities held out for testing.
    pub test_fraction: f64,
    /// Counterparts per target training sample; `"auto"` means C − 1.
    #[serde(with = "auto")]
    pub counterparts: Option<usize>,
    /// Write a checkpoint every this many epochs (0 disables; the final
    /// epoch is always saved).
    pub checkpoint_every: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            test_fraction: 0.3,
            counterparts: None,
            checkpoint_every: 5,
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config document. Syntax errors carry the
    /// line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("line {line}: ")
                })
                .unwrap_or_default();
            Error::Config(format!("{location}{}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Every setting, defaults included.
    pub fn dump(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        self.train.validate()?;
        if self.source.kind != DomainKind::Source || self.target.kind != DomainKind::Target {
            return Err(Error::Config(
                "source.kind must be \"source\" and target.kind \"target\"".into(),
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must be in (0, 1)".into()));
        }
        let c = self.target.num_cameras;
        if self.train.toggles.ci && c < 2 {
            return Err(Error::Config("CI requires C ≥ 2".into()));
        }
        if let Some(n) = self.counterparts {
            if n > c - 1 {
                return Err(Error::Config(format!(
                    "counterparts = {n} but the target has only {c} cameras"
                )));
            }
            if self.train.toggles.ci && n == 0 {
                return Err(Error::Config("CI requires counterparts ≥ 1".into()));
            }
        }
        if self.source.in_dim != self.target.in_dim {
            return Err(Error::Config("source and target in_dim differ".into()));
        }
        Ok(())
    }
}

/// Serde adapter writing `None` as `"auto"`.
pub mod auto {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr<T> {
        Keyword(Keyword),
        Value(T),
    }

    #[derive(Deserialize)]
    enum Keyword {
        #[serde(rename = "auto")]
        Auto,
    }

    pub fn serialize<T: Serialize, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => v.serialize(s),
            None => s.serialize_str("auto"),
        }
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<Option<T>, D::Error>
    where
        T: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(match Repr::deserialize(d)? {
            Repr::Keyword(Keyword::Auto) => None,
            Repr::Value(v) => Some(v),
        })
    }
}

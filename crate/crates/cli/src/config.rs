//! Run configuration: JSON file, `--set key=value` overrides, validation.

use std::path::Path;

use clickdrop::clickstream::MAX_ORDER;
use clickdrop::dropout::{DropoutConfig, Variant};
use clickdrop::experiment::ExperimentConfig;
use clickdrop::ngram::NGramConfig;
use clickdrop::numeric::OptimConfig;
use clickdrop::synth::SynthConfig;
use clickdrop::video::{ExtractConfig, VideoClassifierConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Invalid configuration, reported with the offending key.
#[derive(Debug, thiserror::Error)]
#[error("invalid config: {field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every module config.
    pub seed: u64,
    /// Click n-gram order.
    pub n: usize,
    /// Course start (unix seconds) used when ingesting.
    pub course_start: i64,
    /// Course length in weeks used when ingesting.
    pub horizon: usize,
    pub variant: Variant,
    pub synth: SynthConfig,
    pub ngram: NGramConfig,
    pub video: VideoClassifierConfig,
    pub extract: ExtractConfig,
    pub dropout: DropoutConfig,
    pub runs: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub bootstrap_replicates: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: 0,
            n: 4,
            course_start: 0,
            horizon: 12,
            variant: Variant::ClickPretrainedVideo,
            synth: SynthConfig::default(),
            ngram: e.ngram,
            video: e.video,
            extract: e.extract,
            dropout: e.dropout,
            runs: e.runs,
            train_fraction: e.train_fraction,
            validation_fraction: e.validation_fraction,
            bootstrap_replicates: e.bootstrap_replicates,
        }
    }
}

impl RunConfig {
    /// Reads a JSON file (if any), applies `key=value` overrides in order,
    /// propagates the master seed and validates the result.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| ConfigError::new("config", format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !value.is_object() {
            return Err(ConfigError::new("config", "top level must be a JSON object"));
        }
        for (key, raw) in overrides {
            set_path(&mut value, key, raw)?;
        }
        let mut config: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError::new("config", e.to_string()))?;
        config.propagate_seed();
        config.validate()?;
        Ok(config)
    }

    fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.ngram.seed = self.seed;
        self.video.seed = self.seed;
        self.dropout.seed = self.seed;
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            runs: self.runs,
            seed: self.seed,
            train_fraction: self.train_fraction,
            validation_fraction: self.validation_fraction,
            ngram: self.ngram.clone(),
            video: self.video.clone(),
            extract: self.extract,
            dropout: self.dropout.clone(),
            bootstrap_replicates: self.bootstrap_replicates,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(ConfigError::new(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        let optim = |field: &str, o: &OptimConfig| {
            o.validate().map_err(|e| ConfigError::new(field, e.to_string()))
        };
        if !(1..=MAX_ORDER).contains(&self.n) {
            return Err(ConfigError::new("n", format!("must lie in 1..={MAX_ORDER}, got {}", self.n)));
        }
        positive("horizon", self.horizon)?;
        if self.course_start < 0 {
            return Err(ConfigError::new("course_start", "must be non-negative"));
        }
        self.synth.validate().map_err(|e| ConfigError::new("synth", e.to_string()))?;

        positive("ngram.m", self.ngram.m)?;
        positive("ngram.w", self.ngram.w)?;
        positive("ngram.batch_size", self.ngram.batch_size)?;
        optim("ngram.optim", &self.ngram.optim)?;
        if self.ngram.max_positions == Some(0) {
            return Err(ConfigError::new("ngram.max_positions", "must be positive when set"));
        }
        if self.ngram.eval_positions == Some(0) {
            return Err(ConfigError::new("ngram.eval_positions", "must be positive when set"));
        }

        positive("video.d_v", self.video.d_v)?;
        positive("video.batch_size", self.video.batch_size)?;
        optim("video.optim", &self.video.optim)?;
        if self.video.max_sequences == Some(0) {
            return Err(ConfigError::new("video.max_sequences", "must be positive when set"));
        }
        positive("extract.steps", self.extract.steps)?;
        if !(self.extract.rho.is_finite() && self.extract.rho > 0.0) {
            return Err(ConfigError::new("extract.rho", "must be positive"));
        }
        if !(self.extract.lr.is_finite() && self.extract.lr > 0.0) {
            return Err(ConfigError::new("extract.lr", "must be positive"));
        }

        positive("dropout.d_h", self.dropout.d_h)?;
        positive("dropout.m", self.dropout.m)?;
        positive("dropout.d_v", self.dropout.d_v)?;
        positive("dropout.batch_size", self.dropout.batch_size)?;
        optim("dropout.optim", &self.dropout.optim)?;
        if !(self.dropout.margin.is_finite() && self.dropout.margin >= 0.0) {
            return Err(ConfigError::new("dropout.margin", "must be non-negative"));
        }

        positive("runs", self.runs)?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(ConfigError::new("train_fraction", "must lie in (0, 1)"));
        }
        if !(self.validation_fraction >= 0.0 && self.train_fraction + self.validation_fraction < 1.0) {
            return Err(ConfigError::new("validation_fraction", "must be non-negative and leave a test split"));
        }
        if self.bootstrap_replicates < 100 {
            return Err(ConfigError::new("bootstrap_replicates", "must be at least 100"));
        }
        Ok(())
    }
}

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.to_string(), v.to_string()))
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ConfigError::new(key, format!("{} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

//! Flat `key=value` run configuration with built-in defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

/// Every recognized key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    // synthetic corpus
    ("synth.n_patients", "20"),
    ("synth.segments_per_patient", "50"),
    ("synth.hr_min", "50"),
    ("synth.hr_max", "130"),
    ("synth.policy", "alternating"),
    ("synth.duration_s", "30"),
    ("synth.sample_rate_hz", "40"),
    ("synth.test_fraction", "0.25"),
    // ingestion
    ("ingest.sample_rate_hz", "40"),
    ("ingest.target_hz", "40"),
    ("ingest.duration_s", "30"),
    // pairing and curriculum
    ("pair.window_s", "300"),
    ("pair.bad_threshold", "0.2"),
    ("pair.good_epsilon", "0"),
    ("pair.n_stages", "4"),
    // model
    ("model.n_blocks", "2"),
    ("model.base_channels", "8"),
    ("model.embedding_dim", "64"),
    ("model.input_length", "1200"),
    ("model.z_dim", "128"),
    // pretraining
    ("train.batch_size", "32"),
    ("train.learning_rate", "0.05"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "1e-4"),
    ("train.epochs_per_stage", "1"),
    ("train.precision", "f32"),
    // fine-tuning
    ("finetune.mode", "all"),
    ("finetune.task", "regression"),
    ("finetune.batch_size", "32"),
    ("finetune.learning_rate", "3e-4"),
    ("finetune.momentum", "0.9"),
    ("finetune.weight_decay", "1e-4"),
    ("finetune.epochs", "5"),
    // evaluation
    ("eval.split", "test"),
    ("atcurve.n_bins", "10"),
    ("atcurve.metric", "mae"),
    // gradient check
    ("gradcheck.cases", "100"),
    ("gradcheck.tolerance", "1e-4"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional config file, then `--set` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {item:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key:?} has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Usage(format!("config {key}={raw:?}: {e}")))
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nseed = 7\n\ntrain.batch_size=16 # trailing\n")
            .unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 7);
        assert_eq!(cfg.get::<usize>("train.batch_size").unwrap(), 16);
        cfg.set("seed", "9").unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 9);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(CliError::Usage(_))));
        assert!(cfg.apply_text("seed 3").is_err());
        cfg.set("seed", "abc").unwrap();
        assert!(cfg.get::<u64>("seed").is_err());
    }

    #[test]
    fn display_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("pair.n_stages", "6").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_string()).unwrap();
        assert_eq!(back, cfg);
    }
}

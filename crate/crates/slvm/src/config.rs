//! Flat key = value run configuration.
//!
//! One file drives a whole run: training hyperparameters (keys matching
//! the [`TrainConfig`] fields), the fold protocol, frozen-component seeds,
//! and evaluation settings. `preset = desk` starts from the desk-scale
//! profile instead of the reference one; later keys override. Digests are
//! taken over the canonical serialization, so formatting and comments do
//! not change a run's identity.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fingerprint::digest_bytes;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Dataset root; `SLVM_DATA_ROOT` is the fallback when absent.
    pub data_root: Option<PathBuf>,
    pub fold_sizes: Vec<usize>,
    /// Which fold is held out for testing.
    pub fold: usize,
    pub encoder_seed: u64,
    pub decoder_seed: u64,
    /// Episodes in a generated evaluation registry.
    pub registry_size: usize,
    /// Probability threshold for binarizing predictions.
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data_root: None,
            fold_sizes: vec![3, 2],
            fold: 1,
            encoder_seed: 0,
            decoder_seed: 1,
            registry_size: 1000,
            threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.fold_sizes.is_empty() || self.fold_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("fold_sizes must be non-empty and positive".into()));
        }
        if self.fold >= self.fold_sizes.len() {
            return Err(Error::Config(format!(
                "fold {} out of range for {} folds",
                self.fold,
                self.fold_sizes.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.registry_size == 0 {
            return Err(Error::Config("registry_size must be at least 1".into()));
        }
        Ok(())
    }

    /// The configured dataset root, falling back to `SLVM_DATA_ROOT`.
    pub fn resolve_data_root(&self) -> Result<PathBuf> {
        if let Some(root) = &self.data_root {
            return Ok(root.clone());
        }
        match std::env::var_os("SLVM_DATA_ROOT") {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::Config(
                "no data_root in config and SLVM_DATA_ROOT is unset".into(),
            )),
        }
    }

    /// Canonical serialization; also what run digests are taken over.
    pub fn to_canonical_string(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let sizes: Vec<String> = self.fold_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(out, "batch_size = {}", t.batch_size).unwrap();
        writeln!(out, "lr = {}", t.lr).unwrap();
        writeln!(out, "beta1 = {}", t.beta1).unwrap();
        writeln!(out, "weight_decay = {}", t.weight_decay).unwrap();
        writeln!(out, "epochs = {}", t.epochs).unwrap();
        writeln!(out, "episodes_per_epoch = {}", t.episodes_per_epoch).unwrap();
        writeln!(out, "alpha = {}", t.alpha).unwrap();
        writeln!(out, "beta = {}", t.beta).unwrap();
        writeln!(out, "phase_switch = {}", t.phase_switch).unwrap();
        writeln!(out, "shots = {}", t.shots).unwrap();
        writeln!(out, "image_size = {}", t.image_size).unwrap();
        writeln!(out, "augment = {}", t.augment).unwrap();
        writeln!(out, "seed = {}", t.seed).unwrap();
        if let Some(root) = &self.data_root {
            writeln!(out, "data_root = {}", root.display()).unwrap();
        }
        writeln!(out, "fold_sizes = {}", sizes.join(",")).unwrap();
        writeln!(out, "fold = {}", self.fold).unwrap();
        writeln!(out, "encoder_seed = {}", self.encoder_seed).unwrap();
        writeln!(out, "decoder_seed = {}", self.decoder_seed).unwrap();
        writeln!(out, "registry_size = {}", self.registry_size).unwrap();
        writeln!(out, "threshold = {}", self.threshold).unwrap();
        out
    }

    pub fn digest(&self) -> String {
        digest_bytes(self.to_canonical_string().as_bytes())
    }
}

pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig> {
    // presets apply first, regardless of position
    let mut config = RunConfig::default();
    for line in text.lines() {
        let line = line.trim();
        if let Some(value) = line.strip_prefix("preset") {
            let value = value.trim_start_matches([' ', '=']).trim();
            config = match value {
                "desk" => RunConfig::desk(),
                "reference" => RunConfig::default(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown preset `{other}` in {} (expected desk or reference)",
                        origin.display()
                    )))
                }
            };
        }
    }

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{} line {}: expected `key = value`",
                origin.display(),
                lineno + 1
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| {
            Error::Config(format!(
                "{} line {}: bad {what} value `{value}`",
                origin.display(),
                lineno + 1
            ))
        };
        match key {
            "preset" => {}
            "batch_size" => config.train.batch_size = value.parse().map_err(|_| bad(key))?,
            "lr" => config.train.lr = value.parse().map_err(|_| bad(key))?,
            "beta1" => config.train.beta1 = value.parse().map_err(|_| bad(key))?,
            "weight_decay" => config.train.weight_decay = value.parse().map_err(|_| bad(key))?,
            "epochs" => config.train.epochs = value.parse().map_err(|_| bad(key))?,
            "episodes_per_epoch" => {
                config.train.episodes_per_epoch = value.parse().map_err(|_| bad(key))?
            }
            "alpha" => config.train.alpha = value.parse().map_err(|_| bad(key))?,
            "beta" => config.train.beta = value.parse().map_err(|_| bad(key))?,
            "phase_switch" => config.train.phase_switch = value.parse().map_err(|_| bad(key))?,
            "shots" => config.train.shots = value.parse().map_err(|_| bad(key))?,
            "image_size" => config.train.image_size = value.parse().map_err(|_| bad(key))?,
            "augment" => {
                config.train.augment = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(bad(key)),
                }
            }
            "seed" => config.train.seed = value.parse().map_err(|_| bad(key))?,
            "data_root" => config.data_root = Some(PathBuf::from(value)),
            "fold_sizes" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                config.fold_sizes = parsed.map_err(|_| bad(key))?;
            }
            "fold" => config.fold = value.parse().map_err(|_| bad(key))?,
            "encoder_seed" => config.encoder_seed = value.parse().map_err(|_| bad(key))?,
            "decoder_seed" => config.decoder_seed = value.parse().map_err(|_| bad(key))?,
            "registry_size" => config.registry_size = value.parse().map_err(|_| bad(key))?,
            "threshold" => config.threshold = value.parse().map_err(|_| bad(key))?,
            other => {
                return Err(Error::Config(format!(
                    "{} line {}: unknown key `{other}`",
                    origin.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut config = RunConfig::desk();
        config.train.seed = 42;
        config.data_root = Some(PathBuf::from("fixtures/synth"));
        let text = config.to_canonical_string();
        let back = parse_config(&text, Path::new("c.cfg")).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.digest(), config.digest());
    }

    #[test]
    fn preset_applies_before_overrides() {
        let text = "epochs = 3\npreset = desk\n";
        let config = parse_config(text, Path::new("c.cfg")).unwrap();
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.train.image_size, TrainConfig::desk().image_size);
    }

    #[test]
    fn comments_and_formatting_do_not_change_the_digest() {
        let a = parse_config("preset = desk\nseed = 5\n", Path::new("a.cfg")).unwrap();
        let b = parse_config(
            "# a comment\npreset = desk\n\n  seed   =   5\n",
            Path::new("b.cfg"),
        )
        .unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(
            parse_config("bogus = 1\n", Path::new("c.cfg")),
            Err(Error::Config(_))
        ));
        assert!(parse_config("lr = fast\n", Path::new("c.cfg")).is_err());
    }

    #[test]
    fn validation_composes_with_train_config() {
        let mut config = RunConfig::desk();
        config.train.lr = -0.5;
        assert!(config.validate().is_err());
        config = RunConfig::desk();
        config.fold = 9;
        assert!(config.validate().is_err());
        config = RunConfig::desk();
        config.threshold = 1.5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn data_root_falls_back_to_the_environment() {
        let config = RunConfig::desk();
        // the variable is process-global; only exercise the configured path
        let mut with_root = config.clone();
        with_root.data_root = Some(PathBuf::from("/data"));
        assert_eq!(with_root.resolve_data_root().unwrap(), PathBuf::from("/data"));
    }
}

//! Run configuration: one TOML file pins everything a run needs, so a
//! (config, cohort) pair fully determines every reported number.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bix::BixMode;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelSpec, NoLocalityMode, VariantName};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: ModelDims,
    pub top_k_local: usize,
    pub top_k_global: usize,
    pub variant: VariantName,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Down-weights the censored survival term of the loss.
    pub censor_alpha: f64,
    pub folds: usize,
    /// Cohort directory; CLI flags override it.
    pub cohort: String,
    pub bix_mode: BixMode,
    pub no_locality_mode: NoLocalityMode,
    pub bix_tied: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dims: ModelDims {
                d_low: 64,
                d_high: 64,
                d: 32,
                d_out: 32,
                t_bins: 4,
            },
            top_k_local: 6,
            top_k_global: 8,
            variant: VariantName::Full,
            learning_rate: 1e-2,
            epochs: 100,
            weight_decay: 0.0,
            momentum: 0.9,
            censor_alpha: 0.0,
            folds: 4,
            cohort: String::new(),
            bix_mode: BixMode::Set,
            no_locality_mode: NoLocalityMode::RandomGroups,
            bix_tied: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.top_k_local == 0 || self.top_k_global == 0 {
            return Err(Error::Config("top_k must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.censor_alpha) {
            return Err(Error::Config(format!(
                "censor_alpha {} outside [0, 1]",
                self.censor_alpha
            )));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            dims: self.dims,
            variant: self.variant,
            top_k_local: self.top_k_local,
            top_k_global: self.top_k_global,
            bix_mode: self.bix_mode,
            no_locality_mode: self.no_locality_mode,
            bix_tied: self.bix_tied,
            seed: self.seed,
        }
    }

    pub fn with_variant(&self, variant: VariantName) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("config serialization: {e}")))
    }
}

/// `HMKG_SEED` overrides the seed of whatever file the CLI loaded.
pub fn env_seed_override() -> Result<Option<u64>> {
    match std::env::var("HMKG_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("HMKG_SEED must be an integer, got '{text}'"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn full_round_trip_fidelity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let config = RunConfig {
            seed: 99,
            dims: ModelDims {
                d_low: 24,
                d_high: 48,
                d: 16,
                d_out: 20,
                t_bins: 3,
            },
            top_k_local: 5,
            top_k_global: 7,
            variant: VariantName::NoLocality,
            learning_rate: 0.03,
            epochs: 17,
            weight_decay: 1e-4,
            momentum: 0.8,
            censor_alpha: 0.25,
            folds: 5,
            cohort: "cohorts/a".to_string(),
            bix_mode: BixMode::Vector,
            no_locality_mode: NoLocalityMode::GlobalGraph,
            bix_tied: true,
        };
        config.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), config);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\nvariant = \"single_scale\"\n").unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seed, 3);
        assert_eq!(config.variant, VariantName::SingleScale);
        assert_eq!(config.folds, 4);
        assert_eq!(config.dims.t_bins, 4);
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sede = 3\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut config = RunConfig::default();
        config.epochs = 0;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let mut config = RunConfig::default();
        config.folds = 1;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let mut config = RunConfig::default();
        config.learning_rate = 0.0;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let mut config = RunConfig::default();
        config.dims.d_out = 0;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn model_spec_mirrors_config() {
        let config = RunConfig::default();
        let spec = config.model_spec();
        assert_eq!(spec.dims, config.dims);
        assert_eq!(spec.variant, config.variant);
        assert_eq!(spec.seed, config.seed);
        assert_eq!(spec.top_k_local, 6);
        assert_eq!(spec.top_k_global, 8);
    }
}

//! Run configuration: model hyperparameters plus training, pretraining
//! and data settings, loaded from TOML with unknown keys rejected.

use std::path::Path;

use hrvvs_core::config::ModuleSwitches;
use hrvvs_core::datasets::SynthConfig;
use hrvvs_core::metrics::EvalMode;
use hrvvs_core::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub decay_power: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub t_clip: usize,
    pub stride: usize,
    /// Schedule length in optimizer steps; 0 means `epochs` full passes.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 2e-3,
            decay_power: 0.9,
            epochs: 100,
            batch_size: 1,
            t_clip: 4,
            stride: 1,
            max_steps: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Phase-0 prior-model steps run before end-to-end training; 0 skips.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub split_seed: u64,
    pub eval_mode: EvalMode,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            eval_mode: EvalMode::PerClass,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small model and budget for CPU runs on the synthetic set.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// Full-width model with the published schedule: Adam at 1e-5 for 15
    /// epochs, 32 windows per batch, polynomial decay 0.9.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig {
                height: 1088,
                width: 1920,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 1e-5,
                epochs: 15,
                batch_size: 32,
                max_steps: 0,
                ..TrainConfig::default()
            },
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.validate()?;
        let t = &self.train;
        let ok = t.lr > 0.0 && t.lr.is_finite() && t.decay_power >= 0.0 && t.batch_size >= 1 && t.t_clip >= 1 && t.stride >= 1;
        if !ok {
            return Err(Error::Config("lr must be positive; batch_size, t_clip and stride must be >= 1".into()));
        }
        if self.pretrain.steps > 0 && (self.pretrain.batch == 0 || self.pretrain.lr <= 0.0) {
            return Err(Error::Config("pretraining needs a positive batch and learning rate".into()));
        }
        Ok(())
    }

    /// Apply command-line ablation switches (each flag only disables).
    pub fn with_ablation(mut self, no_var: bool, no_msim: bool, no_dwfm: bool) -> Self {
        let m = &mut self.model.modules;
        m.var &= !no_var;
        m.msim &= !no_msim;
        m.dwfm &= !no_dwfm;
        self
    }

    pub fn with_modules(mut self, modules: ModuleSwitches) -> Self {
        self.model.modules = modules;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip_through_toml() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn paper_profile_keeps_published_schedule() {
        let p = RunConfig::paper();
        assert_eq!((p.train.epochs, p.train.batch_size, p.train.lr), (15, 32, 1e-5));
        assert_eq!(p.train.decay_power, 0.9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("colour = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model.msim]\nhead = 2\n"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("[train]\nseed = 7\n").unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.model, ModelConfig::desk());
    }

    #[test]
    fn ablation_flags_only_disable() {
        let c = RunConfig::desk().with_ablation(true, false, true);
        assert_eq!(
            c.model.modules,
            ModuleSwitches {
                var: false,
                msim: true,
                dwfm: false
            }
        );
        assert_eq!(RunConfig::desk().with_ablation(false, false, false), RunConfig::desk());
    }
}

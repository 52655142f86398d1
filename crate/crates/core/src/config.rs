//! Model hyperparameters. Every struct rejects unknown keys when
//! deserialized so typos in config files fail loudly.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::views::FRAME_MULTIPLE;

pub const NUM_STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frame height and width fed to the network.
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Background plus vessel classes.
    pub num_classes: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub var: ToyVarConfig,
    pub memory: MemoryConfig,
    pub msim: MsimConfig,
    pub dwfm: DwfmConfig,
    pub modules: ModuleSwitches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            in_channels: 3,
            num_classes: 3,
            stage_channels: [16, 32, 64, 128, 256],
            var: ToyVarConfig::default(),
            memory: MemoryConfig::default(),
            msim: MsimConfig::default(),
            dwfm: DwfmConfig::default(),
            modules: ModuleSwitches::default(),
        }
    }
}

impl ModelConfig {
    /// Small profile that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            stage_channels: [16, 16, 32, 32, 64],
            ..Self::default()
        }
    }

    pub fn view_size(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Spatial size of encoder stage `i` (1-based) for one view.
    pub fn stage_size(&self, i: usize) -> (usize, usize) {
        let (h, w) = self.view_size();
        (h >> i, w >> i)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.height.is_multiple_of(FRAME_MULTIPLE) && self.width.is_multiple_of(FRAME_MULTIPLE) && self.height > 0 && self.width > 0,
            Config,
            "resolution {}x{} must be a positive multiple of {FRAME_MULTIPLE}",
            self.height,
            self.width
        );
        ensure!(self.in_channels >= 1, Config, "in_channels must be >= 1");
        ensure!(self.num_classes >= 2, Config, "num_classes must be >= 2");
        ensure!(
            self.stage_channels.windows(2).all(|w| w[0] <= w[1]) && self.stage_channels[0] > 0,
            Config,
            "stage channels {:?} must be positive and non-decreasing",
            self.stage_channels
        );
        self.var.validate()?;
        ensure!(self.memory.capacity >= 1, Config, "memory capacity must be >= 1");
        ensure!(
            !self.memory.stages.is_empty() && self.memory.stages.iter().all(|&s| (1..=NUM_STAGES).contains(&s)),
            Config,
            "memory stages {:?} must lie in 1..=5",
            self.memory.stages
        );
        let c5 = self.stage_channels[4];
        ensure!(
            c5.is_multiple_of(self.msim.heads),
            Config,
            "msim heads {} must divide stage-5 channels {c5}",
            self.msim.heads
        );
        ensure!(
            (0.0..1.0).contains(&self.msim.dropout),
            Config,
            "msim dropout {} outside [0, 1)",
            self.msim.dropout
        );
        let c1 = self.stage_channels[0];
        ensure!(
            c1.is_multiple_of(self.dwfm.heads),
            Config,
            "dwfm heads {} must divide stage-1 channels {c1}",
            self.dwfm.heads
        );
        ensure!(
            self.dwfm.delta > 0.0 && self.dwfm.delta < 1.0,
            Config,
            "delta {} must lie in (0, 1)",
            self.dwfm.delta
        );
        ensure!(
            self.dwfm.mix_init.iter().all(|&v| v > 0.0 && v.is_finite()),
            Config,
            "mixing coefficients {:?} must be positive",
            self.dwfm.mix_init
        );
        let (h1, w1) = self.stage_size(1);
        ensure!(
            h1 % self.dwfm.reference_side == 0 && w1 % self.dwfm.reference_side == 0,
            Config,
            "dwfm reference side {} must divide stage-1 size {h1}x{w1}",
            self.dwfm.reference_side
        );
        Ok(())
    }
}

/// Which of the three contributed components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleSwitches {
    pub var: bool,
    pub msim: bool,
    pub dwfm: bool,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        Self {
            var: true,
            msim: true,
            dwfm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyVarConfig {
    /// Views are resampled to this square side before quantization.
    pub input_size: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    /// Token-map sides, coarse to fine.
    pub scales: [usize; NUM_STAGES],
    pub enc_channels: usize,
    pub dec_channels: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub adapter_bottleneck: usize,
    /// Encoder stages (1-based order) that receive a prior.
    pub prior_stages: [bool; NUM_STAGES],
}

impl Default for ToyVarConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            code_dim: 32,
            codebook_size: 64,
            scales: [1, 2, 4, 8, 16],
            enc_channels: 16,
            dec_channels: 16,
            heads: 2,
            mlp_hidden: 64,
            adapter_bottleneck: 8,
            prior_stages: [true; NUM_STAGES],
        }
    }
}

impl ToyVarConfig {
    /// Side of the continuous latent grid (the finest scale).
    pub fn latent_side(&self) -> usize {
        self.scales[NUM_STAGES - 1]
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.codebook_size >= 2, Config, "codebook needs at least 2 entries");
        ensure!(self.code_dim >= 1, Config, "code_dim must be >= 1");
        ensure!(
            self.scales.windows(2).all(|w| w[0] < w[1]) && self.scales[0] >= 1,
            Config,
            "scales {:?} must be strictly increasing",
            self.scales
        );
        let top = self.latent_side();
        ensure!(
            self.scales.iter().all(|&s| top.is_multiple_of(s)),
            Config,
            "every scale must divide the finest scale {top}"
        );
        ensure!(
            self.input_size == 4 * top,
            Config,
            "input_size {} must be 4x the finest scale {top}",
            self.input_size
        );
        ensure!(
            self.code_dim.is_multiple_of(self.heads),
            Config,
            "heads {} must divide code_dim {}",
            self.heads,
            self.code_dim
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Number of stored frames.
    pub capacity: usize,
    /// Pooling exponent cap: an entry of age `a` is pooled by `2^min(a, max_age_exponent)`.
    pub max_age_exponent: u32,
    pub pos_dim: usize,
    /// Encoder stages whose global features form the memory tokens.
    pub stages: Vec<usize>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 4,
            max_age_exponent: 3,
            pos_dim: 16,
            stages: vec![5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsimConfig {
    pub heads: usize,
    pub dropout: f64,
    /// Average-pooling factors applied to the locals before they update the global.
    pub local_pool_factors: Vec<usize>,
    /// Add a view-index encoding to pooled local tokens.
    pub local_view_encoding: bool,
}

impl Default for MsimConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            dropout: 0.1,
            local_pool_factors: vec![1, 2, 4],
            local_view_encoding: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DwfmConfig {
    pub heads: usize,
    /// Historical weight decay in `W_h <- delta W_h + (1 - delta) W_final`.
    pub delta: f64,
    /// Reference features are average-pooled to this many tokens per side.
    pub reference_side: usize,
    /// Initial `alpha`, `beta`, `gamma`; normalized before use.
    pub mix_init: [f64; 3],
}

impl Default for DwfmConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            delta: 0.9,
            reference_side: 8,
            mix_init: [1.0 / 3.0; 3],
        }
    }
}

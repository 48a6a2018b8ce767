//! Run configuration: built-in defaults, overridden by a TOML file, then by
//! command-line flags. Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{SyntheticSpec, PAPER_SPLIT};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::roles::{IoConfig, Method};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_samples: usize,
    pub h: usize,
    pub w: usize,
    pub scale: usize,
    pub seed: u64,
    pub split_ratios: [f64; 3],
    /// Per-channel e-folding lags (TS, PRECT, topography); grid-size based when absent.
    pub correlation_length: Option<[f64; 3]>,
    pub spectrum_exponent: Option<[f64; 3]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 730,
            h: 48,
            w: 48,
            scale: 4,
            seed: 0,
            split_ratios: PAPER_SPLIT,
            correlation_length: None,
            spectrum_exponent: None,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::desk(self.n_samples, self.h, self.w, self.seed);
        if let Some(c) = self.correlation_length {
            spec.correlation_length = c;
        }
        if let Some(p) = self.spectrum_exponent {
            spec.spectrum_exponent = p;
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { timesteps: DEFAULT_TIMESTEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub cond_channels: usize,
    pub target_channels: usize,
    pub base_width: usize,
    pub level_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub srresnet_width: usize,
    pub srresnet_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cond_channels: 3,
            target_channels: 1,
            base_width: 32,
            level_multipliers: vec![1, 1, 2, 2, 4],
            blocks_per_level: 1,
            time_embed_dim: 128,
            srresnet_width: 64,
            srresnet_blocks: 8,
        }
    }
}

impl ModelConfig {
    pub fn io(&self) -> Result<IoConfig> {
        match (self.cond_channels, self.target_channels) {
            (3, 1) => Ok(IoConfig::ThreeInOneOut),
            (3, 3) => Ok(IoConfig::ThreeInThreeOut),
            (c, t) => {
                Err(Error::Config(format!("{c} condition / {t} target channels match neither 3in1out nor 3in3out")))
            }
        }
    }

    pub fn set_io(&mut self, io: IoConfig) {
        self.cond_channels = 3;
        self.target_channels = io.num_targets();
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            cond_channels: self.cond_channels,
            target_channels: self.target_channels,
            base_width: self.base_width,
            level_multipliers: self.level_multipliers.clone(),
            blocks_per_level: self.blocks_per_level,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub iters: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Write a resumable checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { method: Method::Ddpm, iters: 10_000, batch_size: 4, lr: 2e-5, seed: 0, checkpoint_every: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub io_configs: Vec<IoConfig>,
    pub scales: Vec<usize>,
    /// Evaluate only the first `limit` test samples; 0 uses the whole split.
    pub limit: usize,
    /// Seed for the reverse-diffusion noise of sampled outputs.
    pub sample_seed: u64,
    /// Average RMSE per sample instead of pooling all elements.
    pub per_sample_rmse: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Bilinear, Method::Bicubic],
            io_configs: IoConfig::ALL.to_vec(),
            scales: vec![4, 8],
            limit: 0,
            sample_seed: 0,
            per_sample_rmse: false,
        }
    }
}

/// Learning rate under the reduced budget, where the default would barely
/// move the weights. Higher rates keep the denoiser on its initial plateau
/// for longer.
pub const REDUCED_LR: f64 = 3e-4;
/// Iteration cap per learned model under the reduced budget.
pub const REDUCED_ITERS: u64 = 360;
/// Test samples scored per cell under the reduced budget.
pub const REDUCED_TEST_SAMPLES: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Short-budget variant: fewer iterations at [`REDUCED_LR`] and a capped test split.
    pub fn reduced(&self) -> Self {
        let mut c = self.clone();
        c.train.iters = c.train.iters.min(REDUCED_ITERS);
        c.train.lr = REDUCED_LR;
        if c.eval.limit == 0 || c.eval.limit > REDUCED_TEST_SAMPLES {
            c.eval.limit = REDUCED_TEST_SAMPLES;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        d.synthetic_spec().validate()?;
        if d.scale != 4 && d.scale != 8 {
            return Err(Error::Config(format!("data.scale must be 4 or 8, got {}", d.scale)));
        }
        self.diffusion.schedule()?;
        self.model.io()?;
        self.model.denoiser().validate()?;
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("train.batch_size and train.lr must be positive".into()));
        }
        if let Some(s) = self.eval.scales.iter().find(|s| **s != 4 && **s != 8) {
            return Err(Error::Config(format!("eval.scales entries must be 4 or 8, got {s}")));
        }
        Ok(())
    }
}

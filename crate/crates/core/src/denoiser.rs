//! Conditional noise predictor `ε_θ(x_LR, x_t, t)`.
//!
//! The network input is the bicubic-upsampled condition followed by the noisy
//! target along the channel axis; the output has the target channel count.

use std::path::Path;

use climdiff_autograd::rng::Rng;
use climdiff_autograd::{read_checkpoint, write_checkpoint, Graph, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::unet::{UNet, UNetConfig};

pub const DENOISER_LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub cond_channels: usize,
    pub target_channels: usize,
    pub base_width: usize,
    pub level_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            cond_channels: 3,
            target_channels: 1,
            base_width: 128,
            level_multipliers: vec![1, 1, 2, 2, 4],
            blocks_per_level: 2,
            time_embed_dim: 128,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_multipliers.len() != DENOISER_LEVELS {
            return Err(Error::Config(format!(
                "the denoiser has {DENOISER_LEVELS} resolution levels, got {} multipliers",
                self.level_multipliers.len()
            )));
        }
        if self.cond_channels == 0 || self.target_channels == 0 {
            return Err(Error::Config("condition and target channel counts must be positive".into()));
        }
        self.unet().validate()
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.cond_channels + self.target_channels,
            out_channels: self.target_channels,
            base_width: self.base_width,
            level_multipliers: self.level_multipliers.clone(),
            blocks_per_level: self.blocks_per_level,
            time_embed_dim: Some(self.time_embed_dim),
        }
    }
}

/// Stacks equally shaped fields into an `[N, C, H, W]` tensor.
pub fn fields_to_tensor<T: Real>(fields: &[Field]) -> Result<Tensor<T>> {
    let first = fields.first().ok_or_else(|| Error::Missing("empty batch".into()))?;
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(fields.len() * c * h * w);
    for f in fields {
        if f.dims() != (c, h, w) {
            return Err(Error::DimensionMismatch(format!("batch mixes {:?} with {:?}", first.dims(), f.dims())));
        }
        data.extend(f.data().iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::new(vec![fields.len(), c, h, w], data)?)
}

/// Splits an `[N, C, H, W]` tensor into fields with the given channel names.
pub fn tensor_to_fields<T: Real>(t: &Tensor<T>, channels: &[String]) -> Result<Vec<Field>> {
    let (n, c, h, w) = t.dims4()?;
    if c != channels.len() {
        return Err(Error::ChannelMismatch(format!("{c} tensor channels for {} names", channels.len())));
    }
    t.data()
        .chunks(c * h * w)
        .take(n)
        .map(|s| Field::new(channels.to_vec(), h, w, s.iter().map(|v| v.as_f64() as f32).collect()))
        .collect()
}

/// Condition channels first, then the noisy target channels. The noisy
/// channels are renamed `<name>_t` so names stay unique when the target is
/// also a condition variable.
pub fn concat_condition(lr_upsampled: &Field, x_t: &Field) -> Result<Field> {
    if x_t.num_channels() == 0 {
        return Err(Error::ChannelMismatch("the noisy target has no channels".into()));
    }
    let noisy = Field::new(
        x_t.channels().iter().map(|c| format!("{c}_t")).collect(),
        x_t.height(),
        x_t.width(),
        x_t.data().to_vec(),
    )?;
    lr_upsampled.concat(&noisy)
}

#[derive(Clone, Debug)]
pub struct Denoiser<T = f32> {
    pub config: DenoiserConfig,
    pub net: UNet,
    pub params: ParamStore<T>,
}

impl<T: Real> Denoiser<T> {
    pub fn build(config: DenoiserConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = UNet::new(&mut params, config.unet(), &mut Rng::stream(init_seed, "init", 0))?;
        Ok(Self { config, net, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Records the forward pass for `[N, cond + target, H, W]` input.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, t: &[usize]) -> Result<Var> {
        self.net.forward(g, &self.params, x, Some(t))
    }

    /// Predicted noise for a batch of conditions and noisy targets at step `t`.
    pub fn predict(&self, cond: &[Field], x_t: &[Field], t: &[usize]) -> Result<Vec<Field>> {
        if cond.len() != x_t.len() {
            return Err(Error::DimensionMismatch(format!("{} conditions for {} targets", cond.len(), x_t.len())));
        }
        let joined = cond.iter().zip(x_t).map(|(c, x)| concat_condition(c, x)).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let x = g.input(fields_to_tensor(&joined)?);
        let y = self.forward(&mut g, x, t)?;
        tensor_to_fields(g.value(y), x_t[0].channels())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_checkpoint(path, &self.params.named_values())?)
    }

    pub fn load(config: DenoiserConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut d = Self::build(config, 0)?;
        load_params(&mut d.params, path)?;
        Ok(d)
    }
}

/// Replaces store values from a checkpoint, reporting layout mismatches as
/// incompatible checkpoints.
pub fn load_params<T: Real>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let values = read_checkpoint(path)?;
    store.load_values(values).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))
}

//! Comparison methods: parameter-free interpolation and two directly
//! regressed networks (a residual U-Net and an SRResNet-style upsampler).

use climdiff_autograd::layers::{Conv2d, GroupNorm, Init};
use climdiff_autograd::rng::Rng;
use climdiff_autograd::{Adam, AdamConfig, CosineLr, Graph, ParamStore, Real, Var};
use serde::{Deserialize, Serialize};

use crate::datagen::upsample_condition;
use crate::denoiser::{fields_to_tensor, load_params, tensor_to_fields};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::resample::bilinear_resize;
use crate::unet::{UNet, UNetConfig};

pub fn bilinear_upscale(lr: &Field, scale: usize) -> Result<Field> {
    bilinear_resize(lr, lr.height() * scale, lr.width() * scale)
}

pub fn bicubic_upscale(lr: &Field, scale: usize) -> Result<Field> {
    upsample_condition(lr, scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrResNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub blocks: usize,
    /// Power of two; one nearest-2× + conv stage per doubling.
    pub scale: usize,
}

impl SrResNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_power_of_two() || self.scale < 2 {
            return Err(Error::Config(format!("SRResNet scale {} must be a power of two ≥ 2", self.scale)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 || self.blocks == 0 {
            return Err(Error::Config("SRResNet channel counts, width and depth must be positive".into()));
        }
        if self.width >= 8 && !self.width.is_multiple_of(8) {
            return Err(Error::Config(format!("width {} is not compatible with 8-group normalisation", self.width)));
        }
        Ok(())
    }
}

/// Residual trunk at LR resolution followed by an upsampling tail.
#[derive(Clone, Debug)]
pub struct SrResNet {
    head: Conv2d,
    blocks: Vec<(Conv2d, GroupNorm, Conv2d, GroupNorm)>,
    trunk_out: Conv2d,
    trunk_norm: GroupNorm,
    tail: Vec<Conv2d>,
    out: Conv2d,
}

impl SrResNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, c: &SrResNetConfig, rng: &mut Rng) -> Result<Self> {
        c.validate()?;
        let w = c.width;
        let conv = |store: &mut ParamStore<T>, name: String, i, o, rng: &mut Rng| {
            Conv2d::new(store, &name, i, o, 3, 1, Init::HeNormal, rng)
        };
        let head = conv(store, "head".into(), c.in_channels, w, rng)?;
        let mut blocks = Vec::new();
        for b in 0..c.blocks {
            blocks.push((
                conv(store, format!("block{b}.conv1"), w, w, rng)?,
                GroupNorm::new(store, &format!("block{b}.norm1"), w)?,
                conv(store, format!("block{b}.conv2"), w, w, rng)?,
                GroupNorm::new(store, &format!("block{b}.norm2"), w)?,
            ));
        }
        let trunk_out = conv(store, "trunk_out".into(), w, w, rng)?;
        let trunk_norm = GroupNorm::new(store, "trunk_norm", w)?;
        let tail = (0..c.scale.trailing_zeros())
            .map(|i| conv(store, format!("tail{i}"), w, w, rng))
            .collect::<climdiff_autograd::Result<Vec<_>>>()?;
        let out = conv(store, "out".into(), w, c.out_channels, rng)?;
        Ok(Self { head, blocks, trunk_out, trunk_norm, tail, out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h0 = self.head.forward(g, store, x)?;
        let h0 = g.silu(h0);
        let mut h = h0;
        for (c1, n1, c2, n2) in &self.blocks {
            let r = c1.forward(g, store, h)?;
            let r = n1.forward(g, store, r)?;
            let r = g.silu(r);
            let r = c2.forward(g, store, r)?;
            let r = n2.forward(g, store, r)?;
            h = g.add(h, r)?;
        }
        let t = self.trunk_out.forward(g, store, h)?;
        let t = self.trunk_norm.forward(g, store, t)?;
        let mut h = g.add(t, h0)?;
        for conv in &self.tail {
            let u = g.upsample2x(h)?;
            let u = conv.forward(g, store, u)?;
            h = g.silu(u);
        }
        Ok(self.out.forward(g, store, h)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RegressionArch {
    /// Consumes the bicubic-upsampled LR fields.
    UNet(UNetConfig),
    /// Consumes the raw LR fields and learns its own upsampling.
    SrResNet(SrResNetConfig),
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum RegressionNet {
    UNet(UNet),
    SrResNet(SrResNet),
}

/// A network trained to map LR fields straight to HR target channels.
#[derive(Clone, Debug)]
pub struct RegressionModel<T = f32> {
    pub arch: RegressionArch,
    pub scale: usize,
    net: RegressionNet,
    pub params: ParamStore<T>,
}

impl<T: Real> RegressionModel<T> {
    pub fn build(arch: RegressionArch, scale: usize, init_seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = Rng::stream(init_seed, "init", 0);
        let net = match &arch {
            RegressionArch::UNet(c) => {
                if c.time_embed_dim.is_some() {
                    return Err(Error::Config("the regression U-Net takes no timestep".into()));
                }
                RegressionNet::UNet(UNet::new(&mut params, c.clone(), &mut rng)?)
            }
            RegressionArch::SrResNet(c) => {
                if c.scale != scale {
                    return Err(Error::Config(format!("SRResNet built for {}x used at {scale}x", c.scale)));
                }
                RegressionNet::SrResNet(SrResNet::new(&mut params, c, &mut rng)?)
            }
        };
        Ok(Self { arch, scale, net, params })
    }

    pub fn out_channels(&self) -> usize {
        match &self.arch {
            RegressionArch::UNet(c) => c.out_channels,
            RegressionArch::SrResNet(c) => c.out_channels,
        }
    }

    /// Network input for one LR sample.
    pub fn input(&self, lr: &Field) -> Result<Field> {
        match self.net {
            RegressionNet::UNet(_) => upsample_condition(lr, self.scale),
            RegressionNet::SrResNet(_) => Ok(lr.clone()),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match &self.net {
            RegressionNet::UNet(n) => n.forward(g, &self.params, x, None),
            RegressionNet::SrResNet(n) => n.forward(g, &self.params, x),
        }
    }

    /// HR predictions (normalised units) named by `target_channels`.
    pub fn predict(&self, lr: &[Field], target_channels: &[String]) -> Result<Vec<Field>> {
        if target_channels.len() != self.out_channels() {
            return Err(Error::ChannelMismatch(format!(
                "model produces {} channels, {} names given",
                self.out_channels(),
                target_channels.len()
            )));
        }
        let inputs = lr.iter().map(|f| self.input(f)).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let x = g.input(fields_to_tensor(&inputs)?);
        let y = self.forward(&mut g, x)?;
        tensor_to_fields(g.value(y), target_channels)
    }

    pub fn load_from(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        load_params(&mut self.params, path)
    }
}

/// Prepared network inputs and HR targets for one step.
#[derive(Clone, Debug)]
pub struct RegressionBatch {
    pub inputs: Vec<Field>,
    pub targets: Vec<Field>,
}

impl RegressionBatch {
    /// Samples `batch_size` (input, target) pairs with replacement from the
    /// stream for iteration `iter`.
    pub fn draw(data: &[(Field, Field)], batch_size: usize, seed: u64, iter: u64) -> Result<Self> {
        if data.is_empty() || batch_size == 0 {
            return Err(Error::Missing("training needs at least one pair and a positive batch size".into()));
        }
        let mut rng = Rng::stream(seed, "batch", iter);
        let (inputs, targets) = (0..batch_size).map(|_| data[rng.below(data.len())].clone()).unzip();
        Ok(Self { inputs, targets })
    }
}

#[derive(Clone, Debug)]
pub struct RegressionTrainer {
    pub model: RegressionModel<f32>,
    pub adam: Adam<f32>,
    pub lr: CosineLr,
}

impl RegressionTrainer {
    pub fn new(model: RegressionModel<f32>, lr: CosineLr) -> Self {
        let adam = Adam::new(&model.params, AdamConfig::default());
        Self { model, adam, lr }
    }

    /// One Adam step on the mean absolute error of the batch.
    pub fn train_step(&mut self, batch: &RegressionBatch) -> Result<f32> {
        let first = batch.targets.first().ok_or_else(|| Error::Missing("empty batch".into()))?;
        if first.num_channels() != self.model.out_channels() {
            return Err(Error::ChannelMismatch(format!(
                "targets have {} channels, model produces {}",
                first.num_channels(),
                self.model.out_channels()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(fields_to_tensor(&batch.inputs)?);
        let y = g.input(fields_to_tensor(&batch.targets)?);
        let pred = self.model.forward(&mut g, x)?;
        let loss = g.l1_loss(pred, y)?;
        self.model.params.zero_grad();
        g.backward(loss, &mut self.model.params)?;
        let lr = self.lr.lr(self.adam.step);
        self.adam.step(&mut self.model.params, lr);
        Ok(g.value(loss).data()[0])
    }
}

//! Parameterised building blocks. Each layer owns only [`ParamId`]s; values
//! live in the [`ParamStore`] passed to `forward`.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    HeNormal,
    Zeros,
}

impl Conv2d {
    /// `kernel × kernel` convolution; padding `kernel / 2` keeps stride-1 sizes.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shape = vec![out_channels, in_channels, kernel, kernel];
        let weight = match init {
            Init::HeNormal => {
                store.add_he_normal(format!("{name}.weight"), shape, in_channels * kernel * kernel, rng)?
            }
            Init::Zeros => store.add_zeros(format!("{name}.weight"), shape)?,
        };
        let bias = store.add_zeros(format!("{name}.bias"), vec![out_channels])?;
        Ok(Self { weight, bias, in_channels, out_channels, kernel, stride, padding: kernel / 2 })
    }

    pub fn num_params(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel * kernel + out_channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add_he_normal(format!("{name}.weight"), vec![d_out, d_in], d_in, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), vec![d_out])?;
        Ok(Self { weight, bias })
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// 8 groups, or one group per channel below 8 channels.
    pub fn default_groups(channels: usize) -> usize {
        channels.clamp(1, 8)
    }

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add_full(format!("{name}.gamma"), vec![channels], T::one())?;
        let beta = store.add_zeros(format!("{name}.beta"), vec![channels])?;
        Ok(Self { gamma, beta, groups: Self::default_groups(channels) })
    }

    pub fn num_params(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

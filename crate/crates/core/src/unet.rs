//! Residual U-Net shared by the diffusion denoiser and the regression baseline.
//!
//! Layout for `L` levels with widths `w_l = base_width · level_multipliers[l]`:
//!
//! ```text
//! conv_in ─► [B res blocks → skip_l → stride-2 conv]  for l < L−1
//!            [B res blocks → skip_{L−1}]
//!         ─► mid res block
//!         ─► [concat skip_l → B res blocks → nearest 2× + conv]  for l = L−1 … 1
//!            [concat skip_0 → B res blocks]
//!         ─► GroupNorm → SiLU → conv_out (zero-initialised)
//! ```
//!
//! With a time embedding, every residual block adds a per-channel projection
//! of the embedding after its first norm.

use climdiff_autograd::layers::{Conv2d, GroupNorm, Init, Linear};
use climdiff_autograd::rng::Rng;
use climdiff_autograd::{Graph, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub level_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    /// `None` builds a network without timestep conditioning.
    pub time_embed_dim: Option<usize>,
}

impl UNetConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.level_multipliers.iter().map(|m| m * self.base_width).collect()
    }

    pub fn levels(&self) -> usize {
        self.level_multipliers.len()
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("network needs at least one input and one output channel".into());
        }
        if self.levels() == 0 || self.blocks_per_level == 0 || self.base_width == 0 {
            return bad("levels, blocks per level and base width must be positive".into());
        }
        for w in self.widths() {
            if w == 0 || (w >= 8 && w % 8 != 0) {
                return bad(format!("feature width {w} is not compatible with 8-group normalisation"));
            }
        }
        if let Some(e) = self.time_embed_dim {
            if e == 0 || e % 2 != 0 {
                return bad(format!("time embedding dimension {e} must be even and positive"));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn num_params(&self) -> usize {
        let widths = self.widths();
        let b = self.blocks_per_level;
        let e = self.time_embed_dim;
        let conv3 = |i, o| Conv2d::num_params(i, o, 3);
        let res = |i: usize, o: usize| {
            conv3(i, o)
                + conv3(o, o)
                + 2 * GroupNorm::num_params(o)
                + e.map_or(0, |e| Linear::num_params(e, o))
                + if i != o { Conv2d::num_params(i, o, 1) } else { 0 }
        };
        let mut n = conv3(self.in_channels, widths[0]);
        n += e.map_or(0, |e| 2 * Linear::num_params(e, e));
        let mut ch = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            for _ in 0..b {
                n += res(ch, w);
                ch = w;
            }
            if l + 1 < widths.len() {
                n += conv3(w, w);
            }
        }
        n += res(ch, ch);
        for (l, &w) in widths.iter().enumerate().rev() {
            n += res(ch + w, w);
            for _ in 1..b {
                n += res(w, w);
            }
            ch = w;
            if l > 0 {
                n += conv3(w, w);
            }
        }
        n + GroupNorm::num_params(ch) + conv3(ch, self.out_channels)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    time: Option<Linear>,
    conv2: Conv2d,
    norm2: GroupNorm,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        temb: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, Init::HeNormal, rng)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cout)?,
            time: temb.map(|e| Linear::new(store, &format!("{name}.time"), e, cout, rng)).transpose()?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, Init::HeNormal, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout)?,
            skip: (cin != cout)
                .then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, Init::HeNormal, rng))
                .transpose()?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, temb: Option<Var>) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let mut h = self.norm1.forward(g, store, h)?;
        // Shift after the norm so the following nonlinearity keeps the timestep signal.
        if let (Some(proj), Some(e)) = (&self.time, temb) {
            let shift = proj.forward(g, store, e)?;
            h = g.add_channel(h, shift)?;
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.silu(h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        Ok(g.add(h, skip)?)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    resample: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    conv_in: Conv2d,
    time_mlp: Option<(Linear, Linear)>,
    down: Vec<Level>,
    mid: ResBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Sinusoidal embedding of the 1-based timestep `t + 1`, shape `[N, dim]`.
pub fn timestep_embedding<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let pos = (ti + 1) as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| pos * f).collect();
        data.extend(args.iter().map(|a| T::lit(a.sin())));
        data.extend(args.iter().map(|a| T::lit(a.cos())));
    }
    Tensor::new(vec![t.len(), dim], data).expect("embedding shape")
}

impl UNet {
    /// Registers every parameter in `store`, drawing initial weights from `rng`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: UNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let b = config.blocks_per_level;
        let e = config.time_embed_dim;
        let conv_in = Conv2d::new(store, "conv_in", config.in_channels, widths[0], 3, 1, Init::HeNormal, rng)?;
        let time_mlp = match e {
            Some(e) => Some((Linear::new(store, "time.fc1", e, e, rng)?, Linear::new(store, "time.fc2", e, e, rng)?)),
            None => None,
        };
        let mut down = Vec::new();
        let mut ch = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for i in 0..b {
                blocks.push(ResBlock::new(store, &format!("down{l}.block{i}"), ch, w, e, rng)?);
                ch = w;
            }
            let resample = (l + 1 < widths.len())
                .then(|| Conv2d::new(store, &format!("down{l}.downsample"), w, w, 3, 2, Init::HeNormal, rng))
                .transpose()?;
            down.push(Level { blocks, resample });
        }
        let mid = ResBlock::new(store, "mid", ch, ch, e, rng)?;
        let mut up = Vec::new();
        for (l, &w) in widths.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for i in 0..b {
                let cin = if i == 0 { ch + w } else { w };
                blocks.push(ResBlock::new(store, &format!("up{l}.block{i}"), cin, w, e, rng)?);
            }
            ch = w;
            let resample = (l > 0)
                .then(|| Conv2d::new(store, &format!("up{l}.upsample"), w, w, 3, 1, Init::HeNormal, rng))
                .transpose()?;
            up.push(Level { blocks, resample });
        }
        let norm_out = GroupNorm::new(store, "norm_out", ch)?;
        let conv_out = Conv2d::new(store, "conv_out", ch, config.out_channels, 3, 1, Init::Zeros, rng)?;
        Ok(Self { config, conv_in, time_mlp, down, mid, up, norm_out, conv_out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// `x` is `[N, in_channels, H, W]`; `t` holds one 0-based timestep per
    /// sample and is required exactly when the network has a time embedding.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        t: Option<&[usize]>,
    ) -> Result<Var> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::ChannelMismatch(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::DimensionMismatch(format!("spatial dims {h}x{w} must be divisible by {m}")));
        }
        let temb = match (&self.time_mlp, t) {
            (Some((fc1, fc2)), Some(t)) => {
                if t.len() != n {
                    return Err(Error::DimensionMismatch(format!("{} timesteps for a batch of {n}", t.len())));
                }
                let emb = g.input(timestep_embedding(t, self.config.time_embed_dim.unwrap_or(0)));
                let e = fc1.forward(g, store, emb)?;
                let e = g.silu(e);
                let e = fc2.forward(g, store, e)?;
                Some(g.silu(e))
            }
            (None, None) => None,
            (Some(_), None) => return Err(Error::Config("timestep required by a time-conditioned network".into())),
            (None, Some(_)) => return Err(Error::Config("network has no time embedding".into())),
        };

        let mut hcur = self.conv_in.forward(g, store, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            for blk in &level.blocks {
                hcur = blk.forward(g, store, hcur, temb)?;
            }
            skips.push(hcur);
            if let Some(conv) = &level.resample {
                hcur = conv.forward(g, store, hcur)?;
            }
        }
        hcur = self.mid.forward(g, store, hcur, temb)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            hcur = g.concat_channels(hcur, skip)?;
            for blk in &level.blocks {
                hcur = blk.forward(g, store, hcur, temb)?;
            }
            if let Some(conv) = &level.resample {
                let u = g.upsample2x(hcur)?;
                hcur = conv.forward(g, store, u)?;
            }
        }
        let hcur = self.norm_out.forward(g, store, hcur)?;
        let hcur = g.silu(hcur);
        Ok(self.conv_out.forward(g, store, hcur)?)
    }
}

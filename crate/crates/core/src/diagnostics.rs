//! Finite-difference gradient checks over every layer type and a small
//! complete U-Net, run in `f64`.

use climdiff_autograd::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use climdiff_autograd::layers::{Conv2d, GroupNorm, Init, Linear};
use climdiff_autograd::rng::Rng;
use climdiff_autograd::{Graph, ParamStore, Tensor, Var};

use crate::error::Result;
use crate::unet::{UNet, UNetConfig};

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

fn random(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Smooth scalar readout `Σ y ⊙ R` with a fixed random `R`.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> climdiff_autograd::Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = g.input(random(shape, &mut Rng::stream(seed, "readout", 0)));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Gives zero-initialised tensors random values so every path carries gradient.
fn randomise(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
}

fn case(
    name: &str,
    store: &mut ParamStore<f64>,
    opts: &GradCheckOptions,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> climdiff_autograd::Result<Var>,
) -> Result<GradCheckCase> {
    let report: GradCheckReport = check_gradients(store, loss, opts)?;
    Ok(GradCheckCase { name: name.into(), checked: report.checked(), max_rel_error: report.max_rel_error() })
}

/// Width-16, three-level U-Net with time embedding, as used by [`gradient_suite`].
pub fn small_unet_config() -> UNetConfig {
    UNetConfig {
        in_channels: 4,
        out_channels: 1,
        base_width: 16,
        level_multipliers: vec![1, 1, 2],
        blocks_per_level: 1,
        time_embed_dim: Some(16),
    }
}

/// Checks every layer type in isolation and then the full small U-Net,
/// sampling at most `per_param` elements of each parameter tensor.
pub fn gradient_suite(seed: u64, per_param: usize) -> Result<Vec<GradCheckCase>> {
    let opts = GradCheckOptions { step: 1e-3, max_per_param: Some(per_param), seed };
    let mut rng = Rng::stream(seed, "gradcheck-data", 0);
    let x = random(vec![2, 3, 6, 6], &mut rng);
    let mut out = Vec::new();

    for (name, kernel, stride) in [("conv3x3", 3, 1), ("conv3x3-stride2", 3, 2), ("conv1x1", 1, 1)] {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 3, 4, kernel, stride, Init::HeNormal, &mut rng)?;
        randomise(&mut store, &mut rng);
        out.push(case(name, &mut store, &opts, |g, s| {
            let xi = g.input(x.clone());
            let y = conv.forward(g, s, xi)?;
            project(g, y, seed)
        })?);
    }

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "linear", 5, 3, &mut rng)?;
    randomise(&mut store, &mut rng);
    let v = random(vec![4, 5], &mut rng);
    out.push(case("linear", &mut store, &opts, |g, s| {
        let vi = g.input(v.clone());
        let y = lin.forward(g, s, vi)?;
        project(g, y, seed)
    })?);

    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "conv", 3, 16, 3, 1, Init::HeNormal, &mut rng)?;
    let norm = GroupNorm::new(&mut store, "norm", 16)?;
    randomise(&mut store, &mut rng);
    out.push(case("groupnorm+silu", &mut store, &opts, |g, s| {
        let xi = g.input(x.clone());
        let h = conv.forward(g, s, xi)?;
        let h = norm.forward(g, s, h)?;
        let h = g.silu(h);
        project(g, h, seed)
    })?);

    let mut store = ParamStore::new();
    let a = Conv2d::new(&mut store, "a", 3, 2, 3, 1, Init::HeNormal, &mut rng)?;
    let b = Conv2d::new(&mut store, "b", 3, 2, 3, 2, Init::HeNormal, &mut rng)?;
    let proj = Linear::new(&mut store, "proj", 5, 4, &mut rng)?;
    randomise(&mut store, &mut rng);
    let v2 = random(vec![2, 5], &mut rng);
    out.push(case("upsample+concat+add-channel", &mut store, &opts, |g, s| {
        let xi = g.input(x.clone());
        let ha = a.forward(g, s, xi)?;
        let hb = b.forward(g, s, xi)?;
        let hb = g.upsample2x(hb)?;
        let h = g.concat_channels(ha, hb)?;
        let vi = g.input(v2.clone());
        let shift = proj.forward(g, s, vi)?;
        let h = g.add_channel(h, shift)?;
        project(g, h, seed)
    })?);

    let mut store = ParamStore::new();
    let net = UNet::new(&mut store, small_unet_config(), &mut rng)?;
    randomise(&mut store, &mut rng);
    let xu = random(vec![2, 4, 8, 8], &mut rng);
    out.push(case("unet(width 16, 3 levels)", &mut store, &opts, |g, s| {
        let xi = g.input(xu.clone());
        let y =
            net.forward(g, s, xi, Some(&[3, 71])).map_err(|e| climdiff_autograd::NnError::Malformed(e.to_string()))?;
        project(g, y, seed)
    })?);
    Ok(out)
}

//! Forward noising, the ε-prediction objective and the ancestral sampler.
//!
//! Timesteps are 0-based: internal `t` is step `t + 1` of a `T`-step chain.
//! Field arithmetic runs in `f64` and rounds to `f32` once per step.

use climdiff_autograd::rng::Rng;
use climdiff_autograd::{Adam, AdamConfig, CosineLr, Graph, Real, Var};

use crate::datagen::upsample_condition;
use crate::denoiser::{concat_condition, fields_to_tensor, Denoiser};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::schedule::NoiseSchedule;

/// Anything that predicts the injected noise for a batch at one timestep.
pub trait NoisePredictor {
    /// `cond` holds upsampled conditions, `x_t` the noisy targets; one `t` per sample.
    fn predict_noise(&self, cond: &[Field], x_t: &[Field], t: &[usize]) -> Result<Vec<Field>>;
}

impl<T: Real> NoisePredictor for Denoiser<T> {
    fn predict_noise(&self, cond: &[Field], x_t: &[Field], t: &[usize]) -> Result<Vec<Field>> {
        self.predict(cond, x_t, t)
    }
}

fn same_shape(a: &Field, b: &Field) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Noise field of the same shape as `like`.
pub fn gaussian_like(like: &Field, rng: &mut Rng) -> Result<Field> {
    like.with_data(like.data().iter().map(|_| rng.normal() as f32).collect())
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`.
pub fn q_sample(x0: &Field, t: usize, eps: &Field, s: &NoiseSchedule) -> Result<Field> {
    same_shape(x0, eps)?;
    let e = s.lookup(t)?;
    let (a, b) = (e.alpha_bar.sqrt(), (1.0 - e.alpha_bar).sqrt());
    x0.with_data(x0.data().iter().zip(eps.data()).map(|(&x, &n)| (a * x as f64 + b * n as f64) as f32).collect())
}

/// One Markov noising step `sqrt(1−β_t)·x + sqrt(β_t)·z`.
pub fn q_step(x_prev: &Field, t: usize, s: &NoiseSchedule, rng: &mut Rng) -> Result<Field> {
    let e = s.lookup(t)?;
    let (a, b) = (e.alpha.sqrt(), e.beta.sqrt());
    x_prev.with_data(x_prev.data().iter().map(|&x| (a * x as f64 + b * rng.normal()) as f32).collect())
}

/// `x_{t−1} = (x_t − β_t/sqrt(1−ᾱ_t)·ε̂)/sqrt(α_t) + σ_t·z`, with `z = 0` at
/// the final step (`t = 0`) or when `rng` is `None`.
pub fn reverse_step(
    x_t: &Field,
    eps_pred: &Field,
    t: usize,
    s: &NoiseSchedule,
    rng: Option<&mut Rng>,
) -> Result<Field> {
    same_shape(x_t, eps_pred)?;
    let e = s.lookup(t)?;
    let inv = 1.0 / e.alpha.sqrt();
    let coef = e.beta / (1.0 - e.alpha_bar).sqrt();
    let mean = x_t.data().iter().zip(eps_pred.data()).map(|(&x, &p)| inv * (x as f64 - coef * p as f64));
    let data = match rng {
        Some(rng) if t > 0 => mean.map(|m| (m + e.sigma * rng.normal()) as f32).collect(),
        _ => mean.map(|m| m as f32).collect(),
    };
    x_t.with_data(data)
}

/// One reverse step for a single chain, conditioning on an upsampled condition.
pub fn p_sample_step(
    pred: &impl NoisePredictor,
    x_t: &Field,
    cond: &Field,
    t: usize,
    s: &NoiseSchedule,
    rng: Option<&mut Rng>,
) -> Result<Field> {
    let eps = pred.predict_noise(std::slice::from_ref(cond), std::slice::from_ref(x_t), &[t])?;
    reverse_step(x_t, &eps[0], t, s, rng)
}

/// Runs steps `t_start, …, 0` for a batch of chains. `rngs` supplies each
/// chain's reverse-step noise; `None` runs every step with `σ = 0`.
pub fn run_reverse(
    pred: &impl NoisePredictor,
    s: &NoiseSchedule,
    cond: &[Field],
    mut x: Vec<Field>,
    t_start: usize,
    mut rngs: Option<&mut [Rng]>,
) -> Result<Vec<Field>> {
    if cond.len() != x.len() || rngs.as_ref().is_some_and(|r| r.len() != x.len()) {
        return Err(Error::DimensionMismatch("one condition and stream per chain required".into()));
    }
    s.lookup(t_start)?;
    for t in (0..=t_start).rev() {
        let eps = pred.predict_noise(cond, &x, &vec![t; x.len()])?;
        x = x
            .iter()
            .zip(&eps)
            .enumerate()
            .map(|(i, (xi, ei))| reverse_step(xi, ei, t, s, rngs.as_deref_mut().map(|r| &mut r[i])))
            .collect::<Result<_>>()?;
    }
    Ok(x)
}

/// Draws `X_T ~ N(0, I)` per chain and runs the full reverse chain. Each
/// condition is already at HR size; outputs carry `target_channels`.
pub fn sample_batch(
    pred: &impl NoisePredictor,
    s: &NoiseSchedule,
    cond: &[Field],
    target_channels: &[String],
    rngs: &mut [Rng],
) -> Result<Vec<Field>> {
    if cond.len() != rngs.len() {
        return Err(Error::DimensionMismatch("one random stream per chain required".into()));
    }
    let x = cond
        .iter()
        .zip(rngs.iter_mut())
        .map(|(c, rng)| {
            let (h, w) = (c.height(), c.width());
            let data = (0..target_channels.len() * h * w).map(|_| rng.normal() as f32).collect();
            Field::new(target_channels.to_vec(), h, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    run_reverse(pred, s, cond, x, s.timesteps() - 1, Some(rngs))
}

/// Upsamples an LR condition by `scale` and samples one output.
pub fn sample(
    pred: &impl NoisePredictor,
    s: &NoiseSchedule,
    lr: &Field,
    scale: usize,
    target_channels: &[String],
    rng: &mut Rng,
) -> Result<Field> {
    let cond = upsample_condition(lr, scale)?;
    let mut rngs = [rng.clone()];
    let out = sample_batch(pred, s, &[cond], target_channels, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one chain"))
}

/// Inputs of one optimisation step.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// Upsampled conditions at HR size.
    pub cond: Vec<Field>,
    /// Clean targets `x_0`.
    pub target: Vec<Field>,
    pub t: Vec<usize>,
    pub eps: Vec<Field>,
}

impl TrainBatch {
    /// Samples `batch_size` pairs with replacement plus per-sample `t` and `ε`,
    /// all from the stream for iteration `iter`.
    pub fn draw(data: &[(Field, Field)], batch_size: usize, timesteps: usize, seed: u64, iter: u64) -> Result<Self> {
        if data.is_empty() || batch_size == 0 {
            return Err(Error::Missing("training needs at least one pair and a positive batch size".into()));
        }
        let mut rng = Rng::stream(seed, "batch", iter);
        let mut b = TrainBatch { cond: Vec::new(), target: Vec::new(), t: Vec::new(), eps: Vec::new() };
        for _ in 0..batch_size {
            let (c, x0) = &data[rng.below(data.len())];
            b.t.push(rng.below(timesteps));
            b.eps.push(gaussian_like(x0, &mut rng)?);
            b.cond.push(c.clone());
            b.target.push(x0.clone());
        }
        Ok(b)
    }
}

/// Optimiser state for the denoiser: Adam with cosine-annealed learning rate.
#[derive(Clone, Debug)]
pub struct DdpmTrainer {
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser<f32>,
    pub adam: Adam<f32>,
    pub lr: CosineLr,
}

impl DdpmTrainer {
    pub fn new(denoiser: Denoiser<f32>, schedule: NoiseSchedule, lr: CosineLr) -> Self {
        let adam = Adam::new(&denoiser.params, AdamConfig::default());
        Self { schedule, denoiser, adam, lr }
    }

    fn graph_loss(&self, batch: &TrainBatch) -> Result<(Graph<f32>, Var)> {
        let n = batch.target.len();
        if batch.cond.len() != n || batch.t.len() != n || batch.eps.len() != n || n == 0 {
            return Err(Error::DimensionMismatch("ragged training batch".into()));
        }
        let want = self.denoiser.config.target_channels;
        if batch.target[0].num_channels() != want || batch.cond[0].num_channels() != self.denoiser.config.cond_channels
        {
            return Err(Error::ChannelMismatch(format!(
                "batch has {}+{} channels, denoiser expects {}+{want}",
                batch.cond[0].num_channels(),
                batch.target[0].num_channels(),
                self.denoiser.config.cond_channels
            )));
        }
        let mut inputs = Vec::with_capacity(n);
        for i in 0..n {
            let xt = q_sample(&batch.target[i], batch.t[i], &batch.eps[i], &self.schedule)?;
            inputs.push(concat_condition(&batch.cond[i], &xt)?);
        }
        let mut g = Graph::new();
        let x = g.input(fields_to_tensor(&inputs)?);
        let eps = g.input(fields_to_tensor(&batch.eps)?);
        let pred = self.denoiser.forward(&mut g, x, &batch.t)?;
        let loss = g.l1_loss(pred, eps)?;
        Ok((g, loss))
    }

    /// Mean absolute noise-prediction error without updating parameters.
    pub fn loss(&self, batch: &TrainBatch) -> Result<f32> {
        let (g, l) = self.graph_loss(batch)?;
        Ok(g.value(l).data()[0])
    }

    /// Backpropagates the batch loss and applies one Adam update at the
    /// learning rate for the optimiser's current step.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<f32> {
        let (g, l) = self.graph_loss(batch)?;
        self.denoiser.params.zero_grad();
        g.backward(l, &mut self.denoiser.params)?;
        let lr = self.lr.lr(self.adam.step);
        self.adam.step(&mut self.denoiser.params, lr);
        Ok(g.value(l).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(v: &[f32]) -> Field {
        Field::new(vec!["x".into()], 1, v.len(), v.to_vec()).unwrap()
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, _: &[Field], x_t: &[Field], _: &[usize]) -> Result<Vec<Field>> {
            x_t.iter().map(|x| x.map(|_, _| 0.0)).collect()
        }
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = field(&[1.0, -2.0]);
        let e = s.lookup(40).unwrap();
        let a = q_sample(&x0, 40, &field(&[0.0, 0.0]), &s).unwrap();
        assert_eq!(a.data(), &[e.alpha_bar.sqrt() as f32, (-2.0 * e.alpha_bar.sqrt()) as f32]);
        let b = q_sample(&field(&[0.0, 0.0]), 40, &field(&[1.0, 3.0]), &s).unwrap();
        assert_eq!(b.data()[1], (3.0 * (1.0 - e.alpha_bar).sqrt()) as f32);
        assert!(q_sample(&x0, 100, &x0, &s).is_err());
        assert!(q_sample(&x0, 0, &field(&[0.0]), &s).is_err());
    }

    #[test]
    fn q_step_vanishing_beta_is_identity() {
        let s = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let x = field(&[0.5, -1.25, 3.0]);
        let y = q_step(&x, 0, &s, &mut Rng::seed_from_u64(0)).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn reverse_step_closed_forms() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x = field(&[1.0, 2.0]);
        let y = reverse_step(&x, &field(&[0.0, 0.0]), 30, &s, None).unwrap();
        let a = s.lookup(30).unwrap().alpha;
        assert_eq!(y.data(), &[(1.0 / a.sqrt()) as f32, (2.0 / a.sqrt()) as f32]);
        // t = 0 ignores the stream entirely
        let mut rng = Rng::seed_from_u64(5);
        let before = rng.clone().next_u64();
        let z = reverse_step(&x, &field(&[0.0, 0.0]), 0, &s, Some(&mut rng)).unwrap();
        assert_eq!(rng.next_u64(), before);
        assert_eq!(z, reverse_step(&x, &field(&[0.0, 0.0]), 0, &s, None).unwrap());
    }

    #[test]
    fn sampling_is_seeded() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let lr = Field::constant(&["a"], 2, 2, 1.0).unwrap();
        let ch = vec!["x".to_string()];
        let a = sample(&Zero, &s, &lr, 4, &ch, &mut Rng::seed_from_u64(3)).unwrap();
        let b = sample(&Zero, &s, &lr, 4, &ch, &mut Rng::seed_from_u64(3)).unwrap();
        let c = sample(&Zero, &s, &lr, 4, &ch, &mut Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.height(), a.width()), (8, 8));
    }
}

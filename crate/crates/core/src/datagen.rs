//! Synthetic climate-like samples and the LR/HR preparation pipeline.
//!
//! Each sample has three channels on an `h × w` grid:
//!
//! * `TS`: a smooth stationary Gaussian random field around 288 K.
//! * `PRECT`: a thresholded log-normal field. Its log-intensity mixes the
//!   `TS` latent (weight 0.5), the standardised topography gradient
//!   (weight 0.5) and an independent rougher field, so it is non-negative,
//!   heavy tailed and predictable in part from the other two channels.
//! * `dPHIS`: the gradient magnitude of one fixed topography, identical in
//!   every sample.
//!
//! Random fields are synthesised spectrally on a doubled periodic grid and
//! cropped. The spectrum is `(1 + (k·s)²)^(−p/2)` with exponent `p`, and the
//! shape length `s` is solved for so that the field's exact autocorrelation
//! at a lag of `correlation_length` grid cells equals `e⁻¹`.

use std::sync::Arc;

use climdiff_autograd::rng::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{pooled_stats, ChannelStats, Field, CLIMATE_CHANNELS};
use crate::resample::bicubic_resize;

/// Spectral and sampling parameters for [`generate_fields`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub h: usize,
    pub w: usize,
    /// e-folding lag in grid cells for the `TS`, `PRECT` and topography fields.
    pub correlation_length: [f64; 3],
    /// Power-law exponent of each spectrum.
    pub spectrum_exponent: [f64; 3],
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(n_samples: usize, h: usize, w: usize, seed: u64) -> Self {
        let base = h.min(w) as f64 / 48.0;
        Self {
            n_samples,
            h,
            w,
            correlation_length: [8.0 * base, 4.0 * base, 10.0 * base],
            spectrum_exponent: [4.0, 3.0, 4.0],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || !self.h.is_multiple_of(16) || !self.w.is_multiple_of(16) {
            return Err(Error::Config(format!("grid {}x{} must be non-empty multiples of 16", self.h, self.w)));
        }
        if self.correlation_length.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("correlation lengths must be positive".into()));
        }
        if self.spectrum_exponent.iter().any(|&p| !(p > 2.0)) {
            return Err(Error::Config("spectrum exponents must exceed 2 for a finite-variance field".into()));
        }
        Ok(())
    }
}

/// Stationary unit-variance Gaussian random field generator.
pub struct GaussianField {
    ph: usize,
    pw: usize,
    amplitude: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    fft_cols: Arc<dyn Fft<f64>>,
    ifft_cols: Arc<dyn Fft<f64>>,
}

fn wrapped_freq(i: usize, n: usize) -> f64 {
    let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    std::f64::consts::TAU * k / n as f64
}

fn spectrum(ph: usize, pw: usize, shape_len: f64, exponent: f64) -> Vec<f64> {
    let mut s = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let ky = wrapped_freq(y, ph);
        for x in 0..pw {
            let kx = wrapped_freq(x, pw);
            let k2 = (kx * kx + ky * ky) * shape_len * shape_len;
            s.push((1.0 + k2).powf(-exponent / 2.0));
        }
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    s.iter_mut().for_each(|v| *v /= mean);
    s
}

struct Fft2 {
    ph: usize,
    pw: usize,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn run(&self, buf: &mut [Complex64]) {
        for row in buf.chunks_mut(self.pw) {
            self.rows.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); self.ph];
        for x in 0..self.pw {
            for y in 0..self.ph {
                col[y] = buf[y * self.pw + x];
            }
            self.cols.process(&mut col);
            for y in 0..self.ph {
                buf[y * self.pw + x] = col[y];
            }
        }
    }
}

/// Exact normalised autocorrelation of the periodic field with spectrum `s`
/// at integer lags along x: `C(r) = mean_k S(k) e^{ik·r}`.
fn autocorrelation_x(s: &[f64], ph: usize, pw: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex64> = s.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let inv = Fft2 { ph, pw, rows: planner.plan_fft_inverse(pw), cols: planner.plan_fft_inverse(ph) };
    inv.run(&mut buf);
    let c0 = buf[0].re;
    (0..pw / 2).map(|r| buf[r].re / c0).collect()
}

fn correlation_at(acf: &[f64], lag: f64) -> f64 {
    let i = lag.floor() as usize;
    if i + 1 >= acf.len() {
        return *acf.last().unwrap_or(&0.0);
    }
    let frac = lag - i as f64;
    acf[i] * (1.0 - frac) + acf[i + 1] * frac
}

impl GaussianField {
    pub fn new(h: usize, w: usize, correlation_length: f64, exponent: f64) -> Self {
        let (ph, pw) = (2 * h, 2 * w);
        let mut planner = FftPlanner::new();
        let target = (-1.0f64).exp();
        // Correlation at a fixed lag grows monotonically with the shape length.
        let (mut lo, mut hi) = (1e-3f64.ln(), (4.0 * (h.max(w) as f64)).ln());
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let acf = autocorrelation_x(&spectrum(ph, pw, mid.exp(), exponent), ph, pw, &mut planner);
            if correlation_at(&acf, correlation_length) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s = spectrum(ph, pw, (0.5 * (lo + hi)).exp(), exponent);
        Self {
            ph,
            pw,
            amplitude: s.iter().map(|v| v.sqrt()).collect(),
            fft: planner.plan_fft_forward(pw),
            ifft: planner.plan_fft_inverse(pw),
            fft_cols: planner.plan_fft_forward(ph),
            ifft_cols: planner.plan_fft_inverse(ph),
        }
    }

    /// One `h × w` realisation (row-major), zero mean and unit variance.
    pub fn sample(&self, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
        let n = (self.ph * self.pw) as f64;
        let mut buf: Vec<Complex64> = (0..self.ph * self.pw).map(|_| Complex64::new(rng.normal(), 0.0)).collect();
        Fft2 { ph: self.ph, pw: self.pw, rows: self.fft.clone(), cols: self.fft_cols.clone() }.run(&mut buf);
        buf.iter_mut().zip(&self.amplitude).for_each(|(v, a)| *v *= a);
        Fft2 { ph: self.ph, pw: self.pw, rows: self.ifft.clone(), cols: self.ifft_cols.clone() }.run(&mut buf);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            out.extend(buf[y * self.pw..y * self.pw + w].iter().map(|v| v.re / n));
        }
        out
    }
}

fn standardise(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

/// Fixed topography height and its gradient magnitude (the `dPHIS` channel).
pub fn topography(spec: &SyntheticSpec) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (spec.h, spec.w);
    let gen = GaussianField::new(h, w, spec.correlation_length[2], spec.spectrum_exponent[2]);
    let height: Vec<f64> =
        gen.sample(h, w, &mut Rng::stream(spec.seed, "topography", 0)).iter().map(|v| 1000.0 * v).collect();
    let at = |y: isize, x: isize| height[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut grad = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (at(y, x + 1) - at(y, x - 1));
            let gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
            grad.push((gx * gx + gy * gy).sqrt());
        }
    }
    (height, grad)
}

/// Generates `spec.n_samples` three-channel samples. Sample `i` draws from
/// its own random substream, so any subset can be regenerated independently.
pub fn generate_fields(spec: &SyntheticSpec) -> Result<Vec<Field>> {
    spec.validate()?;
    let (h, w) = (spec.h, spec.w);
    let ts_gen = GaussianField::new(h, w, spec.correlation_length[0], spec.spectrum_exponent[0]);
    let pr_gen = GaussianField::new(h, w, spec.correlation_length[1], spec.spectrum_exponent[1]);
    let (_, dphis) = topography(spec);
    let mut topo_z = dphis.clone();
    standardise(&mut topo_z);

    let mut out = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = Rng::stream(spec.seed, "sample", i as u64);
        let latent = ts_gen.sample(h, w, &mut rng);
        let rough = pr_gen.sample(h, w, &mut rng);
        let mut data = Vec::with_capacity(3 * h * w);
        data.extend(latent.iter().map(|l| (288.0 + 8.0 * l) as f32));
        data.extend(latent.iter().zip(&topo_z).zip(&rough).map(|((l, t), u)| {
            let g = 0.5 * l + 0.5 * t + 0.5f64.sqrt() * u;
            (2.0 * (g.exp() - 0.5).max(0.0)) as f32
        }));
        data.extend(dphis.iter().map(|&v| v as f32));
        out.push(Field::new(CLIMATE_CHANNELS.iter().map(|s| s.to_string()).collect(), h, w, data)?);
    }
    Ok(out)
}

/// Antialiased bicubic reduction by an integer factor of 4 or 8.
pub fn degrade(hr: &Field, scale: usize) -> Result<Field> {
    if scale != 4 && scale != 8 {
        return Err(Error::Config(format!("scale factor must be 4 or 8, got {scale}")));
    }
    if !hr.height().is_multiple_of(scale) || !hr.width().is_multiple_of(scale) {
        return Err(Error::DimensionMismatch(format!("{}x{} is not divisible by {scale}", hr.height(), hr.width())));
    }
    bicubic_resize(hr, hr.height() / scale, hr.width() / scale, true)
}

/// Bicubic enlargement of LR data back to the HR grid.
pub fn upsample_condition(lr: &Field, scale: usize) -> Result<Field> {
    bicubic_resize(lr, lr.height() * scale, lr.width() * scale, false)
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score using statistics matched by channel name.
pub fn normalize_field(f: &Field, stats: &NormStats) -> Result<Field> {
    let params = stats.for_channels(f.channels())?;
    f.map(|c, v| ((v as f64 - params[c].mean) / params[c].std.max(STD_FLOOR)) as f32)
}

pub fn denormalize(f: &Field, stats: &NormStats) -> Result<Field> {
    let params = stats.for_channels(f.channels())?;
    f.map(|c, v| (v as f64 * params[c].std.max(STD_FLOOR) + params[c].mean) as f32)
}

/// Named per-channel statistics, computed on the training HR split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub channels: Vec<String>,
    pub stats: Vec<ChannelStats>,
}

impl NormStats {
    pub fn from_fields(fields: &[Field]) -> Result<Self> {
        let stats = pooled_stats(fields)?;
        Ok(Self { channels: fields[0].channels().to_vec(), stats })
    }

    pub fn for_channels(&self, names: &[String]) -> Result<Vec<ChannelStats>> {
        names
            .iter()
            .map(|n| {
                self.channels
                    .iter()
                    .position(|c| c == n)
                    .map(|i| self.stats[i].clone())
                    .ok_or_else(|| Error::ChannelMismatch(format!("no statistics for channel `{n}`")))
            })
            .collect()
    }

    /// JSON object of channel → `{ "mean": "<decimal>", "std": "<decimal>" }`.
    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .channels
            .iter()
            .zip(&self.stats)
            .map(|(c, s)| {
                (c.clone(), serde_json::json!({ "mean": format!("{:?}", s.mean), "std": format!("{:?}", s.std) }))
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&serde_json::json!({ "channels": self.channels, "stats": map }))
            .expect("stats serialise");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let bad = || Error::Malformed("stats file does not match the expected layout".into());
        let channels: Vec<String> = serde_json::from_value(v.get("channels").cloned().ok_or_else(bad)?)?;
        let map = v.get("stats").and_then(|m| m.as_object()).ok_or_else(bad)?;
        let parse = |c: &str, key: &str| -> Result<f64> {
            map.get(c)
                .and_then(|e| e.get(key))
                .and_then(|s| s.as_str())
                .ok_or_else(bad)?
                .parse::<f64>()
                .map_err(|e| Error::Malformed(format!("{c}.{key}: {e}")))
        };
        let stats = channels
            .iter()
            .map(|c| Ok(ChannelStats { mean: parse(c, "mean")?, std: parse(c, "std")? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { channels, stats })
    }
}

/// Train/val/test sizes for `n` samples under the given ratio weights.
/// Validation and test sizes are rounded; the remainder goes to training.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || total <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let val = (n as f64 * ratios[1] / total).round() as usize;
    let test = (n as f64 * ratios[2] / total).round() as usize;
    if val + test > n {
        return Err(Error::Config(format!("{n} samples cannot hold {val} validation and {test} test samples")));
    }
    Ok([n - val - test, val, test])
}

pub const PAPER_SPLIT: [f64; 3] = [5300.0, 500.0, 1500.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub lr: Field,
    pub hr: Field,
}

/// Paired LR/HR splits with training-set normalisation statistics.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
    pub stats: NormStats,
    pub scale: usize,
    pub normalized: bool,
}

impl DatasetBundle {
    /// Degrades every HR sample by `scale`; statistics come from `train` only.
    pub fn from_hr(train: Vec<Field>, val: Vec<Field>, test: Vec<Field>, scale: usize) -> Result<Self> {
        let stats = NormStats::from_fields(&train)?;
        let pair = |hr: Field| -> Result<Pair> { Ok(Pair { lr: degrade(&hr, scale)?, hr }) };
        Ok(Self {
            train: train.into_iter().map(pair).collect::<Result<_>>()?,
            val: val.into_iter().map(pair).collect::<Result<_>>()?,
            test: test.into_iter().map(pair).collect::<Result<_>>()?,
            stats,
            scale,
            normalized: false,
        })
    }

    /// Z-scores LR and HR of every split with the training HR statistics.
    pub fn normalize(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        let norm = |ps: &[Pair]| -> Result<Vec<Pair>> {
            ps.iter()
                .map(|p| {
                    Ok(Pair { lr: normalize_field(&p.lr, &self.stats)?, hr: normalize_field(&p.hr, &self.stats)? })
                })
                .collect()
        };
        Ok(Self {
            train: norm(&self.train)?,
            val: norm(&self.val)?,
            test: norm(&self.test)?,
            stats: self.stats.clone(),
            scale: self.scale,
            normalized: true,
        })
    }
}

//! File-level workflow behind the command-line tool: dataset generation,
//! resumable training runs, sampling and evaluation.
//!
//! A data directory holds `train.cgf`, `val.cgf` and `test.cgf` (raw HR
//! samples), `stats.json`, `topography.cgf` and `dataset.json`. LR inputs are
//! derived at load time by degrading HR at the requested scale. A run
//! directory holds `model.ckpt`, `optim.ckpt`, `state.json` and `loss.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use climdiff_autograd::rng::Rng;
use climdiff_autograd::{read_checkpoint, write_checkpoint, Adam, CosineLr, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    bicubic_upscale, bilinear_upscale, RegressionArch, RegressionBatch, RegressionModel, RegressionTrainer,
    SrResNetConfig,
};
use crate::config::{DiffusionConfig, RunConfig};
use crate::datagen::{
    denormalize, generate_fields, normalize_field, split_sizes, topography, upsample_condition, DatasetBundle,
    NormStats,
};
use crate::denoiser::{load_params, Denoiser, DenoiserConfig};
use crate::diffusion::{sample_batch, DdpmTrainer, TrainBatch};
use crate::error::{Error, Result};
use crate::eval::{rmse, rmse_per_sample, EvalReport, EvalRow, ReportMetadata};
use crate::experiments::highfreq_energy;
use crate::field::{read_fields, write_fields, Field, PRECT};
use crate::roles::{IoConfig, Method};

/// Variable scored in every comparison.
pub const EVAL_CHANNEL: &str = PRECT;

const DATA_FILES: [&str; 5] = ["train.cgf", "val.cgf", "test.cgf", "stats.json", "topography.cgf"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub hash: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

/// SHA-256 over the dataset files in a fixed order.
pub fn dataset_hash(data_dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in DATA_FILES {
        let bytes = fs::read(data_dir.join(name))
            .map_err(|e| Error::Missing(format!("{}: {e}", data_dir.join(name).display())))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Generates the synthetic dataset and writes the split files.
pub fn gen_data(cfg: &RunConfig, data_dir: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    let spec = cfg.data.synthetic_spec();
    let [n_train, n_val, n_test] = split_sizes(spec.n_samples, cfg.data.split_ratios)?;
    if n_train == 0 {
        return Err(Error::Config("the training split is empty".into()));
    }
    let mut fields = generate_fields(&spec)?;
    let test = fields.split_off(n_train + n_val);
    let val = fields.split_off(n_train);
    let train = fields;
    let stats = NormStats::from_fields(&train)?;

    fs::create_dir_all(data_dir)?;
    write_fields(data_dir.join("train.cgf"), &train)?;
    write_fields(data_dir.join("val.cgf"), &val)?;
    write_fields(data_dir.join("test.cgf"), &test)?;
    fs::write(data_dir.join("stats.json"), stats.to_json())?;
    let (height, grad) = topography(&spec);
    let topo = Field::new(
        vec!["PHIS".into(), "dPHIS".into()],
        spec.h,
        spec.w,
        height.iter().chain(&grad).map(|&v| v as f32).collect(),
    )?;
    write_fields(data_dir.join("topography.cgf"), &[topo])?;

    let summary = DatasetSummary {
        hash: dataset_hash(data_dir)?,
        train: n_train,
        val: n_val,
        test: n_test,
        h: spec.h,
        w: spec.w,
        seed: spec.seed,
    };
    fs::write(data_dir.join("dataset.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Raw-unit dataset at `scale`, with the statistics stored next to it.
pub fn load_dataset(data_dir: &Path, scale: usize) -> Result<DatasetBundle> {
    let read = |name: &str| {
        let p = data_dir.join(name);
        if !p.exists() {
            return Err(Error::Missing(format!("{} (run gen-data first)", p.display())));
        }
        read_fields(p)
    };
    let mut bundle = DatasetBundle::from_hr(read("train.cgf")?, read("val.cgf")?, read("test.cgf")?, scale)?;
    bundle.stats = NormStats::from_json(&fs::read_to_string(data_dir.join("stats.json"))?)?;
    Ok(bundle)
}

pub fn run_name(method: Method, io: IoConfig, scale: usize) -> String {
    format!("{method}-{io}-x{scale}")
}

/// Architecture and hyperparameters needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Ddpm { denoiser: DenoiserConfig, diffusion: DiffusionConfig },
    Regression { arch: RegressionArch },
}

impl ModelSpec {
    pub fn for_method(cfg: &RunConfig, method: Method, io: IoConfig, scale: usize) -> Result<Self> {
        let mut model = cfg.model.clone();
        model.set_io(io);
        match method {
            Method::Ddpm => Ok(ModelSpec::Ddpm { denoiser: model.denoiser(), diffusion: cfg.diffusion.clone() }),
            Method::Unet => {
                let mut u = model.denoiser().unet();
                u.in_channels = model.cond_channels;
                u.time_embed_dim = None;
                Ok(ModelSpec::Regression { arch: RegressionArch::UNet(u) })
            }
            Method::Srresnet => Ok(ModelSpec::Regression {
                arch: RegressionArch::SrResNet(SrResNetConfig {
                    in_channels: model.cond_channels,
                    out_channels: model.target_channels,
                    width: model.srresnet_width,
                    blocks: model.srresnet_blocks,
                    scale,
                }),
            }),
            m => Err(Error::Config(format!("`{m}` has nothing to train"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub method: Method,
    pub io: IoConfig,
    pub scale: usize,
    /// Completed optimisation steps.
    pub iter: u64,
    pub total_iters: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub model: ModelSpec,
}

enum Learner {
    Ddpm(DdpmTrainer),
    Regression(RegressionTrainer),
}

impl Learner {
    fn build(spec: &ModelSpec, scale: usize, seed: u64, lr: CosineLr) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Ddpm { denoiser, diffusion } => {
                Learner::Ddpm(DdpmTrainer::new(Denoiser::build(denoiser.clone(), seed)?, diffusion.schedule()?, lr))
            }
            ModelSpec::Regression { arch } => {
                Learner::Regression(RegressionTrainer::new(RegressionModel::build(arch.clone(), scale, seed)?, lr))
            }
        })
    }

    fn parts(&mut self) -> (&mut ParamStore<f32>, &mut Adam<f32>) {
        match self {
            Learner::Ddpm(t) => (&mut t.denoiser.params, &mut t.adam),
            Learner::Regression(t) => (&mut t.model.params, &mut t.adam),
        }
    }

    fn save(&mut self, run_dir: &Path) -> Result<()> {
        let (params, adam) = self.parts();
        write_checkpoint(run_dir.join("model.ckpt"), &params.named_values())?;
        let mut moments = Vec::new();
        for (i, p) in params.iter().enumerate() {
            let shape = p.value.shape().to_vec();
            moments.push((format!("m.{}", p.name), Tensor::new(shape.clone(), adam.m[i].clone())?));
            moments.push((format!("v.{}", p.name), Tensor::new(shape, adam.v[i].clone())?));
        }
        write_checkpoint(run_dir.join("optim.ckpt"), &moments)?;
        Ok(())
    }

    fn restore(&mut self, run_dir: &Path, step: u64) -> Result<()> {
        let (params, adam) = self.parts();
        load_params(params, run_dir.join("model.ckpt"))?;
        let moments: Vec<(String, Tensor<f32>)> = read_checkpoint(run_dir.join("optim.ckpt"))?;
        if moments.len() != 2 * params.len() {
            return Err(Error::IncompatibleCheckpoint("optimiser state does not match the model".into()));
        }
        for (i, p) in params.iter().enumerate() {
            let (m, v) = (&moments[2 * i], &moments[2 * i + 1]);
            if m.0 != format!("m.{}", p.name) || v.0 != format!("v.{}", p.name) || m.1.shape() != p.value.shape() {
                return Err(Error::IncompatibleCheckpoint(format!("optimiser state for `{}` is missing", p.name)));
            }
            adam.m[i] = m.1.data().to_vec();
            adam.v[i] = v.1.data().to_vec();
        }
        adam.step = step;
        Ok(())
    }
}

/// Normalised (input, target) training pairs for a method.
fn training_pairs(bundle: &DatasetBundle, method: Method, io: IoConfig) -> Result<Vec<(Field, Field)>> {
    let targets = io.target_channels();
    bundle
        .train
        .iter()
        .map(|p| {
            let lr = normalize_field(&p.lr, &bundle.stats)?;
            let hr = normalize_field(&p.hr, &bundle.stats)?.select(&targets)?;
            let input = match method {
                Method::Srresnet => lr,
                _ => upsample_condition(&lr, bundle.scale)?,
            };
            Ok((input, hr))
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the state in the run directory instead of starting over.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are complete.
    pub halt_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub state: RunState,
    pub last_loss: Option<f32>,
}

fn read_loss_log(path: &Path, before: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(fs::read_to_string(path)?
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|i| i.parse::<u64>().ok()).is_some_and(|i| i < before))
        .map(str::to_string)
        .collect())
}

fn write_loss_log(path: &Path, rows: &[String]) -> Result<()> {
    let mut s = String::from("iter,loss,lr\n");
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

pub fn read_state(run_dir: &Path) -> Result<RunState> {
    let p = run_dir.join("state.json");
    let text =
        fs::read_to_string(&p).map_err(|_| Error::Missing(format!("no trained model at {}", run_dir.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Trains one method/io/scale combination into `run_dir`. Batches, timesteps
/// and noise for step `i` come from a stream keyed by `i`, so a resumed run
/// continues exactly as an uninterrupted one would.
pub fn train(
    cfg: &RunConfig,
    method: Method,
    io: IoConfig,
    data_dir: &Path,
    run_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let scale = cfg.data.scale;
    let bundle = load_dataset(data_dir, scale)?;
    let hash = dataset_hash(data_dir)?;
    let fresh = RunState {
        method,
        io,
        scale,
        iter: 0,
        total_iters: cfg.train.iters,
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        seed: cfg.train.seed,
        dataset_hash: hash,
        model: ModelSpec::for_method(cfg, method, io, scale)?,
    };
    let mut state = fresh.clone();
    let cosine = CosineLr::new(cfg.train.lr, cfg.train.iters);
    let mut learner = Learner::build(&fresh.model, scale, cfg.train.seed, cosine)?;
    fs::create_dir_all(run_dir)?;
    let log_path = run_dir.join("loss.csv");
    let mut log = Vec::new();
    if opts.resume && run_dir.join("state.json").exists() {
        let saved = read_state(run_dir)?;
        if (RunState { iter: 0, ..saved.clone() }) != fresh {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} was trained with different settings or data",
                run_dir.display()
            )));
        }
        learner.restore(run_dir, saved.iter)?;
        log = read_loss_log(&log_path, saved.iter)?;
        state = saved;
    }

    let data = training_pairs(&bundle, method, io)?;
    let timesteps = cfg.diffusion.timesteps;
    let checkpoint = |learner: &mut Learner, state: &RunState, log: &[String]| -> Result<()> {
        learner.save(run_dir)?;
        write_loss_log(&log_path, log)?;
        fs::write(run_dir.join("state.json"), serde_json::to_string_pretty(state)? + "\n")?;
        Ok(())
    };
    let mut last_loss = None;
    while state.iter < state.total_iters {
        let iter = state.iter;
        let lr = cosine.lr(iter);
        let loss = match &mut learner {
            Learner::Ddpm(t) => {
                t.train_step(&TrainBatch::draw(&data, state.batch_size, timesteps, state.seed, iter)?)?
            }
            Learner::Regression(t) => {
                t.train_step(&RegressionBatch::draw(&data, state.batch_size, state.seed, iter)?)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::InvalidRange(format!("training diverged at iteration {iter}")));
        }
        log.push(format!("{iter},{loss:?},{lr:?}"));
        last_loss = Some(loss);
        state.iter += 1;
        let every = cfg.train.checkpoint_every;
        if opts.halt_at == Some(state.iter) {
            break;
        }
        if every > 0 && state.iter.is_multiple_of(every) && state.iter < state.total_iters {
            checkpoint(&mut learner, &state, &log)?;
        }
        if state.iter.is_multiple_of(100) {
            log::info!("{} step {}/{} loss {loss:.5}", run_name(method, io, scale), state.iter, state.total_iters);
        }
    }
    checkpoint(&mut learner, &state, &log)?;
    Ok(TrainSummary { state, last_loss })
}

/// A ready-to-use predictor in normalised units.
pub enum Predictor {
    Bilinear,
    Bicubic,
    Ddpm { denoiser: Denoiser<f32>, diffusion: DiffusionConfig },
    Regression(RegressionModel<f32>),
}

impl Predictor {
    pub fn load(method: Method, run_dir: Option<&Path>, scale: usize) -> Result<Self> {
        match method {
            Method::Bilinear => Ok(Predictor::Bilinear),
            Method::Bicubic => Ok(Predictor::Bicubic),
            _ => {
                let dir = run_dir.ok_or_else(|| Error::Missing(format!("`{method}` needs a trained checkpoint")))?;
                let state = read_state(dir)?;
                if state.method != method || state.scale != scale {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "{} holds {} at {}x, wanted {method} at {scale}x",
                        dir.display(),
                        state.method,
                        state.scale
                    )));
                }
                match state.model {
                    ModelSpec::Ddpm { denoiser, diffusion } => {
                        Ok(Predictor::Ddpm { denoiser: Denoiser::load(denoiser, dir.join("model.ckpt"))?, diffusion })
                    }
                    ModelSpec::Regression { arch } => {
                        let mut m = RegressionModel::build(arch, scale, 0)?;
                        m.load_from(dir.join("model.ckpt"))?;
                        Ok(Predictor::Regression(m))
                    }
                }
            }
        }
    }

    /// Output channel count, or `None` when every input channel is produced.
    pub fn target_count(&self) -> Option<usize> {
        match self {
            Predictor::Bilinear | Predictor::Bicubic => None,
            Predictor::Ddpm { denoiser, .. } => Some(denoiser.config.target_channels),
            Predictor::Regression(m) => Some(m.out_channels()),
        }
    }

    /// Downscales normalised LR fields. Chain `i` of a diffusion model draws
    /// its noise from stream `(seed, "sample", i)` regardless of batching.
    pub fn predict(&self, lr: &[Field], scale: usize, targets: &[String], seed: u64) -> Result<Vec<Field>> {
        match self {
            Predictor::Bilinear => lr.iter().map(|f| bilinear_upscale(f, scale)?.select(targets)).collect(),
            Predictor::Bicubic => lr.iter().map(|f| bicubic_upscale(f, scale)?.select(targets)).collect(),
            Predictor::Regression(m) => {
                let mut out = Vec::with_capacity(lr.len());
                for chunk in lr.chunks(8) {
                    out.extend(m.predict(chunk, targets)?);
                }
                Ok(out)
            }
            Predictor::Ddpm { denoiser, diffusion } => {
                let schedule = diffusion.schedule()?;
                let mut out = Vec::with_capacity(lr.len());
                for (c, chunk) in lr.chunks(8).enumerate() {
                    let cond = chunk.iter().map(|f| upsample_condition(f, scale)).collect::<Result<Vec<_>>>()?;
                    let mut rngs: Vec<Rng> =
                        (0..chunk.len()).map(|i| Rng::stream(seed, "sample", (c * 8 + i) as u64)).collect();
                    out.extend(sample_batch(denoiser, &schedule, &cond, targets, &mut rngs)?);
                }
                Ok(out)
            }
        }
    }
}

/// Downscales raw-unit LR fields and returns raw-unit outputs.
pub fn downscale(
    pred: &Predictor,
    lr_raw: &[Field],
    stats: &NormStats,
    scale: usize,
    io: IoConfig,
    seed: u64,
) -> Result<Vec<Field>> {
    let targets = io.target_channels();
    if let Some(n) = pred.target_count() {
        if n != targets.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "model produces {n} channels, {io} needs {}",
                targets.len()
            )));
        }
    }
    let lr = lr_raw.iter().map(|f| normalize_field(f, stats)).collect::<Result<Vec<_>>>()?;
    pred.predict(&lr, scale, &targets, seed)?.iter().map(|f| denormalize(f, stats)).collect()
}

/// One scored (method, io, scale) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: EvalRow,
    /// Mean high-frequency energy of the predicted `PRECT` maps.
    pub highfreq_energy: f64,
    /// The same proxy on the HR truth of the evaluated samples.
    pub truth_highfreq_energy: f64,
}

fn mean_hf(fields: &[Field]) -> Result<f64> {
    let mut acc = 0.0;
    for f in fields {
        acc += highfreq_energy(&f.select(&[EVAL_CHANNEL])?);
    }
    Ok(acc / fields.len().max(1) as f64)
}

/// Scores a method on the (optionally truncated) test split.
pub fn evaluate_cell(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    method: Method,
    io: IoConfig,
    run_dir: Option<&Path>,
) -> Result<CellResult> {
    let scale = bundle.scale;
    let n = if cfg.eval.limit == 0 { bundle.test.len() } else { cfg.eval.limit.min(bundle.test.len()) };
    if n == 0 {
        return Err(Error::Missing("the test split is empty".into()));
    }
    let test = &bundle.test[..n];
    let pred = Predictor::load(method, run_dir, scale)?;
    let eval_io = if method.is_learned() { io } else { IoConfig::ThreeInThreeOut };
    let lr: Vec<Field> = test.iter().map(|p| p.lr.clone()).collect();
    let truth: Vec<Field> = test.iter().map(|p| p.hr.clone()).collect();
    let out = downscale(&pred, &lr, &bundle.stats, scale, eval_io, cfg.eval.sample_seed)?;
    let score = if cfg.eval.per_sample_rmse { rmse_per_sample } else { rmse };
    Ok(CellResult {
        row: EvalRow {
            method,
            io_config: method.is_learned().then_some(io),
            scale,
            rmse: score(&out, &truth, &[EVAL_CHANNEL])?,
            n,
        },
        highfreq_energy: mean_hf(&out)?,
        truth_highfreq_energy: mean_hf(&truth)?,
    })
}

fn unix_timestamp() -> String {
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("unix:{secs}")
}

/// Runs every configured method and scale; learned methods load their run
/// from `runs_root/<method>-<io>-x<scale>`. Writes `report.csv`,
/// `report.txt` and `metadata.json` to `out_dir`.
pub fn evaluate(cfg: &RunConfig, data_dir: &Path, runs_root: &Path, out_dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &scale in &cfg.eval.scales {
        let bundle = load_dataset(data_dir, scale)?;
        for &method in &cfg.eval.methods {
            if !method.is_learned() {
                rows.push(evaluate_cell(cfg, &bundle, method, IoConfig::ThreeInThreeOut, None)?.row);
                continue;
            }
            for &io in &cfg.eval.io_configs {
                let dir = runs_root.join(run_name(method, io, scale));
                rows.push(evaluate_cell(cfg, &bundle, method, io, Some(&dir))?.row);
            }
        }
    }
    let report = EvalReport::new(rows)?;
    write_report(&report, cfg, data_dir, out_dir)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.csv"), report.to_csv())?;
    fs::write(out_dir.join("report.txt"), report.to_table())?;
    let meta = ReportMetadata {
        seed: cfg.eval.sample_seed,
        dataset_hash: dataset_hash(data_dir)?,
        timestamp: unix_timestamp(),
        units: format!("{EVAL_CHANNEL} in synthetic data units (not physical 1e-8 units)"),
    };
    fs::write(out_dir.join("metadata.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Where `sample` writes its outputs.
pub fn sample_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join("samples.cgf"), out_dir.join("maps"))
}

/// Downscales `count` test inputs (or the LR fields in `input`) with a
/// trained model, writing raw-unit outputs and one PGM map per output channel.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    cfg: &RunConfig,
    method: Method,
    io: IoConfig,
    data_dir: &Path,
    run_dir: Option<&Path>,
    input: Option<&Path>,
    count: usize,
    out_dir: &Path,
) -> Result<Vec<Field>> {
    let scale = cfg.data.scale;
    let stats = NormStats::from_json(
        &fs::read_to_string(data_dir.join("stats.json"))
            .map_err(|_| Error::Missing(format!("{}/stats.json", data_dir.display())))?,
    )?;
    let lr: Vec<Field> = match input {
        Some(p) => read_fields(p)?,
        None => load_dataset(data_dir, scale)?.test.iter().take(count).map(|p| p.lr.clone()).collect(),
    };
    if lr.is_empty() {
        return Err(Error::Missing("no inputs to downscale".into()));
    }
    let pred = Predictor::load(method, run_dir, scale)?;
    let io = if method.is_learned() { io } else { IoConfig::ThreeInThreeOut };
    let out = downscale(&pred, &lr, &stats, scale, io, cfg.eval.sample_seed)?;
    let (file, maps) = sample_paths(out_dir);
    fs::create_dir_all(&maps)?;
    write_fields(&file, &out)?;
    for (i, f) in out.iter().enumerate() {
        for c in f.channels() {
            crate::eval::render_map(f, c, maps.join(format!("sample{i:03}_{c}.pgm")))?;
        }
    }
    Ok(out)
}

/// Human-readable one-line description of a dataset.
pub fn describe(summary: &DatasetSummary) -> String {
    let mut s = String::new();
    write!(
        s,
        "{} train / {} val / {} test samples at {}x{}, hash {}",
        summary.train, summary.val, summary.test, summary.h, summary.w, summary.hash
    )
    .unwrap();
    s
}

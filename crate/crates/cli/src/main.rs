//! `climdiff`: synthetic climate downscaling with a conditional diffusion
//! model and its baselines.
//!
//! Settings come from built-in defaults, then `--config FILE`, then flags.
//! Exit status is 0 on success, 1 for usage errors and 2 for runtime errors;
//! every failure prints one line starting with `error:` to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use climdiff::config::{RunConfig, REDUCED_ITERS, REDUCED_LR, REDUCED_TEST_SAMPLES};
use climdiff::diagnostics::gradient_suite;
use climdiff::experiments::{collect, run_matrix, ExperimentMatrix, MatrixOutcome, Verdict};
use climdiff::pipeline::{self, describe, run_name, TrainOptions};
use climdiff::roles::{IoConfig, Method};

fn d() -> RunConfig {
    RunConfig::default()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Parser, Debug)]
#[command(
    name = "climdiff",
    version,
    about = "Downscale synthetic climate fields with a conditional DDPM and baselines"
)]
struct Cli {
    /// TOML file overriding the built-in defaults [default: none]
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for data generation, training and sampling [default: 0]
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Working directory for data, runs and reports [default: out]
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into <out>/data
    GenData(GenDataArgs),
    /// Train a diffusion model or regression baseline into <out>/runs
    Train(TrainArgs),
    /// Downscale test inputs with a trained model into <out>/samples
    Sample(SampleArgs),
    /// Score methods on the test split into <out>/eval
    Evaluate(EvaluateArgs),
    /// Run the method x io x scale comparison into <out>/matrix
    Matrix(MatrixArgs),
    /// Rebuild findings.md and the consolidated CSV from <out>/matrix
    Report,
    /// Finite-difference gradient checks of every layer and a small U-Net
    CheckGrad(CheckGradArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_name = "N", help = format!("Number of samples [default: {}]", d().data.n_samples))]
    n_samples: Option<usize>,
    #[arg(long, value_name = "N", help = format!("HR grid height [default: {}]", d().data.h))]
    height: Option<usize>,
    #[arg(long, value_name = "N", help = format!("HR grid width [default: {}]", d().data.w))]
    width: Option<usize>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_name = "NAME", help = format!("Model: ddpm, unet or srresnet [default: {}]", d().train.method))]
    method: Option<Method>,
    #[arg(
        long,
        value_name = "IO",
        help = "Variables produced: 3in1out or 3in3out [default: from model.target_channels, 3in1out]"
    )]
    io: Option<IoConfig>,
    #[arg(long, value_name = "N", help = format!("Scale factor, 4 or 8 [default: {}]", d().data.scale))]
    scale: Option<usize>,
    #[arg(long, value_name = "DIR", help = "Run directory [default: <out>/runs/<method>-<io>-x<scale>]")]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_name = "N", help = format!("Training iterations [default: {}]", d().train.iters))]
    steps: Option<u64>,
    #[arg(long, value_name = "N", help = format!("Samples per iteration [default: {}]", d().train.batch_size))]
    batch_size: Option<usize>,
    #[arg(long, value_name = "RATE", help = format!("Initial learning rate of the cosine schedule [default: {:e}]", d().train.lr))]
    lr: Option<f64>,
    #[arg(long, value_name = "N", help = format!("Diffusion timesteps T [default: {}]", d().diffusion.timesteps))]
    timesteps: Option<usize>,
    #[arg(long, value_name = "N", help = format!("Base feature width of the U-Nets [default: {}]", d().model.base_width))]
    width: Option<usize>,
    /// Continue from the checkpoint in the run directory [default: off]
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed iterations, keeping the schedule of --steps [default: none]
    #[arg(long, value_name = "N")]
    halt_at: Option<u64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of test inputs to downscale [default: 2]
    #[arg(long, value_name = "N", default_value_t = 2)]
    count: usize,
    /// Field file of raw LR inputs to use instead of the test split [default: none]
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_delimiter = ',', value_name = "LIST", help = format!("Methods to score [default: {}]", join(&d().eval.methods)))]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST", help = format!("Io configs of learned methods [default: {}]", join(&d().eval.io_configs)))]
    io: Option<Vec<IoConfig>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST", help = format!("Scale factors [default: {}]", join(&d().eval.scales)))]
    scales: Option<Vec<usize>>,
    #[arg(long, value_name = "N", help = "Score only the first N test samples, 0 for all [default: 0]")]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    /// Cells run at once [default: 1]
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
    #[arg(long, help = format!(
        "Short budget: at most {REDUCED_ITERS} iterations per learned cell at learning rate {REDUCED_LR:e}, {REDUCED_TEST_SAMPLES} test samples [default: off]"
    ))]
    reduced: bool,
    #[arg(long, value_delimiter = ',', value_name = "LIST", help = format!("Methods [default: {}]", join(&Method::ALL)))]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST", help = format!("Io configs [default: {}]", join(&IoConfig::ALL)))]
    io: Option<Vec<IoConfig>>,
    /// Scale factors [default: 4,8]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    scales: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    /// Elements checked per parameter tensor [default: 24]
    #[arg(long, value_name = "N", default_value_t = 24)]
    per_param: usize,
    /// Largest acceptable relative error [default: 1e-6]
    #[arg(long, value_name = "X", default_value_t = 1e-6)]
    tolerance: f64,
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.eval.sample_seed = s;
    }
    Ok(cfg)
}

fn resolve_model(cfg: &mut RunConfig, m: &ModelArgs) -> Result<(Method, IoConfig), Failure> {
    if let Some(method) = m.method {
        cfg.train.method = method;
    }
    if let Some(io) = m.io {
        cfg.model.set_io(io);
    }
    if let Some(s) = m.scale {
        cfg.data.scale = s;
    }
    Ok((cfg.train.method, cfg.model.io()?))
}

fn run_dir(out: &Path, m: &ModelArgs, method: Method, io: IoConfig, scale: usize) -> PathBuf {
    m.run_dir.clone().unwrap_or_else(|| out.join("runs").join(run_name(method, io, scale)))
}

fn print_matrix(o: &MatrixOutcome) {
    if let Some(r) = &o.report {
        print!("{}", r.to_table());
    }
    for c in &o.findings.claims {
        println!("verdict ({}): {} - {}", c.id, c.verdict.as_str(), c.statement);
    }
    for (cell, e) in &o.failures {
        println!("failed cell {}: {e}", cell.name());
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = base_config(&cli)?;
    let out = cli.out.clone();
    let data_dir = out.join("data");
    match &cli.command {
        Command::GenData(a) => {
            if let Some(n) = a.n_samples {
                cfg.data.n_samples = n;
            }
            if let Some(h) = a.height {
                cfg.data.h = h;
            }
            if let Some(w) = a.width {
                cfg.data.w = w;
            }
            let s = pipeline::gen_data(&cfg, &data_dir)?;
            println!("{}", describe(&s));
            println!("dataset hash {}", s.hash);
        }
        Command::Train(a) => {
            let (method, io) = resolve_model(&mut cfg, &a.model)?;
            if let Some(n) = a.steps {
                cfg.train.iters = n;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = a.lr {
                cfg.train.lr = lr;
            }
            if let Some(t) = a.timesteps {
                cfg.diffusion.timesteps = t;
            }
            if let Some(w) = a.width {
                cfg.model.base_width = w;
            }
            let dir = run_dir(&out, &a.model, method, io, cfg.data.scale);
            let opts = TrainOptions { resume: a.resume, halt_at: a.halt_at };
            let s = pipeline::train(&cfg, method, io, &data_dir, &dir, &opts)?;
            let last = s.last_loss.map_or("-".into(), |l| format!("{l:.6}"));
            println!(
                "trained {} to iteration {}/{} (last loss {last}) in {}",
                run_name(method, io, s.state.scale),
                s.state.iter,
                s.state.total_iters,
                dir.display()
            );
        }
        Command::Sample(a) => {
            let (method, io) = resolve_model(&mut cfg, &a.model)?;
            let scale = cfg.data.scale;
            let dir = method.is_learned().then(|| run_dir(&out, &a.model, method, io, scale));
            let dest = out.join("samples").join(if method.is_learned() {
                run_name(method, io, scale)
            } else {
                format!("{method}-x{scale}")
            });
            let fields =
                pipeline::sample(&cfg, method, io, &data_dir, dir.as_deref(), a.input.as_deref(), a.count, &dest)?;
            println!("wrote {} samples to {}", fields.len(), pipeline::sample_paths(&dest).0.display());
        }
        Command::Evaluate(a) => {
            if let Some(m) = &a.methods {
                cfg.eval.methods = m.clone();
            }
            if let Some(io) = &a.io {
                cfg.eval.io_configs = io.clone();
            }
            if let Some(s) = &a.scales {
                cfg.eval.scales = s.clone();
            }
            if let Some(l) = a.limit {
                cfg.eval.limit = l;
            }
            let report = pipeline::evaluate(&cfg, &data_dir, &out.join("runs"), &out.join("eval"))?;
            print!("{}", report.to_table());
        }
        Command::Matrix(a) => {
            if a.reduced {
                cfg = cfg.reduced();
            }
            let mut m = ExperimentMatrix::full(cfg);
            if let Some(x) = &a.methods {
                m.methods = x.clone();
            }
            if let Some(x) = &a.io {
                m.io_configs = x.clone();
            }
            if let Some(x) = &a.scales {
                m.scales = x.clone();
            }
            let o = run_matrix(&m, &data_dir, &out.join("matrix"), a.jobs)?;
            print_matrix(&o);
            if let Some(c) = o.findings.claim('a') {
                if c.verdict == Verdict::Contradicts {
                    return Err(Failure("verdict (a) contradicts the 4x < 8x RMSE pattern".into()));
                }
            }
        }
        Command::Report => {
            let o = collect(&out.join("matrix"))?;
            print_matrix(&o);
        }
        Command::CheckGrad(a) => {
            let cases = gradient_suite(cli.seed.unwrap_or(0), a.per_param)?;
            let mut worst = 0.0f64;
            for c in &cases {
                println!("{:<30} checked {:>5}  max rel error {:.3e}", c.name, c.checked, c.max_rel_error);
                worst = worst.max(c.max_rel_error);
            }
            if worst.is_nan() || worst >= a.tolerance {
                return Err(Failure(format!(
                    "gradient check failed: max relative error {worst:.3e} >= {:.1e}",
                    a.tolerance
                )));
            }
            println!("all gradients within {:.1e}", a.tolerance);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("error: {first}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

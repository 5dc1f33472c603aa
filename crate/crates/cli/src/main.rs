use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};

use specclip::clipping::{
    bn_direct_clip, clip_top, concat_clip, fast_clip_run, scale_clip, write_metrics_csv, ClipConfig, FastClipConfig,
};
use specclip::closedform::{
    closed_form_spectrum, padding_gap_experiment, spectral_bounds, write_gap_csv, write_spectrum_csv,
};
use specclip::harness::{make_trainer, run_fig1_with, write_fig1_reports, ConvSetting, Fig1Options, Task, TrainConfig};
use specclip::linops::io::{load_spec, save_spec, write_f64le};
use specclip::linops::PaddingMode;
use specclip::specmod::{fit_parameters, FitConfig, SpectrumEditPlan};
use specclip::spectral::{bench_extraction, power_qr, svd_oracle, PowerQrConfig, ORACLE_CAP};
use specclip::{Error, OperatorSpec};

#[derive(Parser)]
#[command(
    name = "specclip",
    version,
    about = "Spectrum extraction and spectral-norm clipping for implicitly linear layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Top-k singular values (and optionally vectors) by PowerQR.
    Extract(ExtractArgs),
    /// Clip the largest singular values down to a target.
    Clip(ClipArgs),
    /// Rescale the whole spectrum so that the largest value is the target.
    ScaleClip(ScaleClipArgs),
    /// Clip a batch-norm layer channel by channel.
    BnClip(BnClipArgs),
    /// Clip a conv followed by batch norm as one operator.
    ConcatClip(ClipArgs),
    /// Exact spectrum of a circular 1-D convolution.
    ClosedForm(FilterArgs),
    /// Lower and upper bounds on the largest singular value of a circular 1-D convolution.
    Bounds(FilterArgs),
    /// Gap between the circular and non-circular spectral norms of random 2-D convolutions.
    Gap(GapArgs),
    /// Re-fit a layer's parameters to an edited top spectrum.
    ModifySpectrum(ModifyArgs),
    /// Train an operator with periodic clipping and record per-step metrics.
    Simulate(SimulateArgs),
    /// Four-setting conv clipping reproduction.
    Fig1(Fig1Args),
    /// Time PowerQR against the deflated power method.
    Bench(BenchArgs),
    /// All singular values by brute-force materialization.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct Common {
    /// Output file (a directory for `fig1`).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    /// Shift added to the Gram operator.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Also write the right singular vectors as raw f64le, `[n, k]` row-major.
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ClipArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    target: f64,
    /// Inner step size; defaults depend on the operator kind.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 1)]
    inner_n: usize,
    #[arg(long, default_value_t = 10)]
    probe_p: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ScaleClipArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    target: f64,
    #[arg(long, default_value_t = 100)]
    probe_p: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BnClipArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    target: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FilterArgs {
    /// Comma-separated taps; repeat the flag for several channels.
    #[arg(long, required = true, value_parser = parse_floats)]
    filter: Vec<Vec<f64>>,
    /// Signal length.
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GapArgs {
    /// Kernel size.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Spatial size of the square input.
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ModifyArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Number of top singular values to edit.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    /// New values for the top-k; defaults to clipping them at `--target`.
    #[arg(long, value_delimiter = ',')]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    target: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Epochs of gradient descent.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Training inputs; defaults to the input dimension.
    #[arg(long)]
    samples: Option<usize>,
    /// Where to save the fitted operator; defaults to `<out>.spec.json`.
    #[arg(long)]
    spec_out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SimulateArgs {
    /// Operator to train; without it a random 2-D conv on a 1×16×16 input is used.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "least-squares", value_parser = parse_task)]
    task: Task,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Target or parameter noise, depending on the task.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 100)]
    clip_every: usize,
    #[arg(long, default_value_t = 1.0)]
    target: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 1)]
    inner_n: usize,
    #[arg(long, default_value_t = 10)]
    probe_p: usize,
    /// Kernel size of the generated conv.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value = "zeros")]
    padding: PaddingMode,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Fig1Args {
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    clip_every: usize,
    #[arg(long, default_value_t = 1.0)]
    target: f64,
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Comma-separated block sizes.
    #[arg(long, default_value = "1,4,16")]
    k: String,
    /// Iterations per vector for both methods.
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"))).collect()
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &Value) -> specclip::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_rows(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> specclip::Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_sigmas(path: &Path, sigmas: &[f64]) -> specclip::Result<()> {
    write_rows(path, "index,sigma", sigmas.iter().enumerate().map(|(i, s)| format!("{i},{s}")))
}

fn clip_config(op: &OperatorSpec, a: &ClipArgs) -> ClipConfig {
    let mut cfg = ClipConfig::for_operator(op, a.target);
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    cfg.inner_steps = a.inner_n;
    cfg.probe_iters = a.probe_p;
    cfg.seed = a.common.seed;
    cfg
}

/// Runs one subcommand and returns the extra fields for its metadata file.
fn run(cmd: &Command) -> specclip::Result<Value> {
    match cmd {
        Command::Extract(a) => {
            let op = load_spec(&a.spec)?;
            let cfg = PowerQrConfig::new(a.k as usize, a.iters).with_seed(a.common.seed).with_shift(a.mu);
            let est = power_qr(&op, &cfg, None)?;
            write_sigmas(&a.common.out, &est.sigmas)?;
            if let Some(path) = &a.vectors {
                write_f64le(path, est.v_tensor().data())?;
            }
            Ok(json!({ "residual": est.residual(&op) }))
        }
        Command::Clip(a) => {
            let op = load_spec(&a.spec)?;
            let out = clip_top(&op, &clip_config(&op, a), None)?;
            save_spec(&out.op, &a.common.out)?;
            if !out.converged {
                return Err(Error::Invariant(format!(
                    "clipping stopped after {} passes with sigma1 = {} above the target {}",
                    out.passes,
                    out.sigma(),
                    a.target
                )));
            }
            Ok(json!({ "sigma_before": out.initial_sigma, "sigma_after": out.sigma(), "passes": out.passes }))
        }
        Command::ScaleClip(a) => {
            let op = load_spec(&a.spec)?;
            save_spec(&scale_clip(&op, a.target, a.probe_p, a.common.seed)?, &a.common.out)?;
            Ok(json!({}))
        }
        Command::BnClip(a) => {
            let OperatorSpec::BatchNorm(bn) = load_spec(&a.spec)? else {
                return Err(Error::InvalidArgument("bn-clip expects a batchnorm operator".into()));
            };
            save_spec(&bn_direct_clip(&bn, a.target)?.into(), &a.common.out)?;
            Ok(json!({}))
        }
        Command::ConcatClip(a) => {
            let op = load_spec(&a.spec)?;
            let (2, OperatorSpec::Conv(conv), OperatorSpec::BatchNorm(bn)) =
                (op.stage_count(), op.stage(0)?, op.stage(1)?)
            else {
                return Err(Error::InvalidArgument(
                    "concat-clip expects a composition of a conv and a batchnorm".into(),
                ));
            };
            let out = concat_clip(conv, bn, &clip_config(&op, a))?;
            let result = OperatorSpec::compose(vec![out.conv.into(), out.bn.into()])?;
            save_spec(&result, &a.common.out)?;
            if !out.outcome.converged {
                return Err(Error::Invariant(format!(
                    "clipping stopped after {} passes with sigma1 = {} above the target {}",
                    out.outcome.passes,
                    out.outcome.sigma(),
                    a.target
                )));
            }
            Ok(
                json!({ "sigma_before": out.outcome.initial_sigma, "sigma_after": out.outcome.sigma(), "passes": out.outcome.passes }),
            )
        }
        Command::ClosedForm(a) => {
            let Some(n) = a.n else { usage_error("closed-form needs --n") };
            let result = closed_form_spectrum(&a.filter, n)?;
            write_spectrum_csv(&a.common.out, &result)?;
            Ok(json!({}))
        }
        Command::Bounds(a) => {
            let b = spectral_bounds(&a.filter);
            let mut doc = json!({ "lower": b.lower, "upper": b.upper });
            if let Some(n) = a.n {
                doc["sigma1"] = json!(closed_form_spectrum(&a.filter, n)?.max());
            }
            write_json(&a.common.out, &doc)?;
            Ok(json!({}))
        }
        Command::Gap(a) => {
            let rows = padding_gap_experiment(a.k, a.channels, a.n, a.trials, a.common.seed)?;
            write_gap_csv(&a.common.out, &rows)?;
            Ok(json!({}))
        }
        Command::ModifySpectrum(a) => {
            let op = load_spec(&a.spec)?;
            let est = power_qr(&op, &PowerQrConfig::new(a.k as usize, a.iters).with_seed(a.common.seed), None)?;
            let target = match a.sigmas.len() {
                0 => est.sigmas.iter().map(|s| s.min(a.target)).collect(),
                n if n == est.k() => a.sigmas.clone(),
                n => usage_error(format!("--sigmas has {n} values but --k is {}", a.k)),
            };
            let plan = SpectrumEditPlan::from_estimate(op.clone(), &est, target)?;
            let cfg = FitConfig {
                seed: a.common.seed,
                lr: a.lr,
                epochs: a.steps,
                ..FitConfig::new(a.samples.unwrap_or(op.input_dim()))
            };
            let report = fit_parameters(&plan, &cfg)?;
            let spec_out = a.spec_out.clone().unwrap_or_else(|| {
                let mut s = a.common.out.as_os_str().to_os_string();
                s.push(".spec.json");
                PathBuf::from(s)
            });
            save_spec(&report.fitted, &spec_out)?;
            write_json(
                &a.common.out,
                &json!({
                    "residual_rms": report.residual_rms,
                    "iterations": report.iterations,
                    "lr": report.lr,
                    "spec_out": spec_out,
                }),
            )?;
            Ok(json!({}))
        }
        Command::Simulate(a) => {
            let op = match &a.spec {
                Some(p) => load_spec(p)?,
                None => {
                    let setting = ConvSetting { kernel: a.k, padding: a.padding, same: false, stride: a.stride };
                    setting.random_operator([1, 16, 16], 4, 1.5, a.common.seed, 1)?
                }
            };
            let teacher = op.scale_params(2.0)?;
            let train = TrainConfig {
                lr: a.lr,
                noise_scale: a.noise,
                seed: a.common.seed,
                ..TrainConfig::new(a.task, a.steps)
            };
            let mut trainer = make_trainer(&train, Some(&teacher))?;
            let mut clip = ClipConfig::for_operator(&op, a.target);
            if let Some(l) = a.lambda {
                clip.lambda = l;
            }
            clip.seed = a.common.seed;
            let mut cfg = FastClipConfig::new(clip, a.clip_every);
            cfg.schedules[0].clip.inner_steps = a.inner_n;
            cfg.schedules[0].clip.probe_iters = a.probe_p;
            cfg.record_timing = !a.no_timing;
            if op.input_dim() > ORACLE_CAP {
                cfg.oracle_every = None;
            }
            let (_, rows) = fast_clip_run(&op, trainer.as_mut(), &cfg, a.steps)?;
            write_metrics_csv(&a.common.out, &rows)?;
            Ok(json!({ "clip_events": rows.iter().filter(|r| r.clip_event).count() }))
        }
        Command::Fig1(a) => {
            let defaults = Fig1Options::default();
            let opts = Fig1Options {
                steps: a.steps,
                clip_every: a.clip_every,
                target: a.target,
                train: TrainConfig { steps: a.steps, ..defaults.train },
                ..defaults
            };
            let mut reports = run_fig1_with(a.common.seed, &opts)?;
            if a.no_timing {
                for r in &mut reports {
                    r.wall_ms = 0.0;
                    r.metrics.iter_mut().chain(r.scaled_metrics.iter_mut()).for_each(|m| m.wall_ns = 0);
                }
            }
            write_fig1_reports(&a.common.out, &reports)?;
            Ok(json!({}))
        }
        Command::Bench(a) => {
            let ks: Vec<usize> =
                a.k.split(',')
                    .filter(|t| !t.trim().is_empty())
                    .map(|t| t.trim().parse().unwrap_or_else(|e| usage_error(format!("--k `{t}`: {e}"))))
                    .collect();
            if ks.is_empty() || ks.contains(&0) {
                usage_error("--k needs a non-empty list of positive block sizes");
            }
            let op = load_spec(&a.spec)?;
            let rows = bench_extraction(&op, &ks, a.iters, a.common.seed)?;
            write_rows(
                &a.common.out,
                "method,k,wall_ms,sigma1",
                rows.iter().map(|r| {
                    let ms = if a.no_timing { 0.0 } else { r.wall.as_secs_f64() * 1e3 };
                    format!("{},{},{},{}", r.method, r.k, ms, r.sigma1)
                }),
            )?;
            Ok(json!({}))
        }
        Command::Oracle(a) => {
            let op = load_spec(&a.spec)?;
            write_sigmas(&a.common.out, &svd_oracle(&op)?)?;
            Ok(json!({}))
        }
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Extract(a) => &a.common,
        Command::Clip(a) | Command::ConcatClip(a) => &a.common,
        Command::ScaleClip(a) => &a.common,
        Command::BnClip(a) => &a.common,
        Command::ClosedForm(a) | Command::Bounds(a) => &a.common,
        Command::Gap(a) => &a.common,
        Command::ModifySpectrum(a) => &a.common,
        Command::Simulate(a) => &a.common,
        Command::Fig1(a) => &a.common,
        Command::Bench(a) => &a.common,
        Command::Oracle(a) => &a.common,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let c = common(&cli.command);
    let result = run(&cli.command).and_then(|extra| {
        let mut meta = json!({
            "invocation": argv,
            "seed": c.seed,
            "version": env!("CARGO_PKG_VERSION"),
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        write_json(&meta_path(&c.out), &meta)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

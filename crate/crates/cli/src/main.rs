use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use volterra_core::control::{optimize_excitation, predistort, OptimizerConfig, OptimizerMode};
use volterra_core::estimate::{
    build_problem, estimate, kernel_errors, write_report, LengthPolicy, Method, ModelOrder,
};
use volterra_core::experiments::{mix, reproduce, steps_for, write_tables, Figure};
use volterra_core::io::write_json;
use volterra_core::pulse::{add_measurement_noise, read_pulse, read_training_set, write_pulse, Pulse};
use volterra_core::rydberg::{RydbergSystem, SystemConfig};
use volterra_core::volterra::{preset, read_kernel, write_kernel, GaussianKernelSpec};
use volterra_core::{Error, VolterraKernel};

#[derive(Debug, Parser)]
#[command(name = "volterra", version, about = "Estimate, invert and compensate quadratic pulse distortions")]
struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON config; paths inside it are resolved relative to the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a Gaussian kernel, from a preset or explicit parameters.
    MakeKernel(MakeKernelArgs),
    /// Pass pulses through a kernel.
    Distort(DistortArgs),
    /// Fit a kernel to a directory of training pairs.
    Estimate(EstimateArgs),
    /// Find the input whose distorted image matches a target pulse.
    Predistort(PredistortArgs),
    /// Optimize Rydberg excitation controls, optionally through a kernel.
    Optimize(OptimizeArgs),
    /// Regenerate the data tables behind one figure.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
struct MakeKernelArgs {
    /// One of A-F.
    #[arg(long, conflicts_with_all = ["memory", "sigma1", "sigma2"])]
    preset: Option<String>,
    #[arg(long, requires_all = ["sigma1", "sigma2"])]
    memory: Option<usize>,
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Quadratic amplitude.
    #[arg(long)]
    j: Option<f64>,
    /// Constant offset.
    #[arg(long)]
    h0: Option<f64>,
    /// File stem; defaults to the preset name or "custom".
    #[arg(long)]
    name: Option<String>,
}

#[derive(Debug, Args)]
struct DistortArgs {
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Standard deviation of Gaussian noise added to each output.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(required = true)]
    pulses: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Directory of `<name>.in.csv` / `<name>.out.csv` pairs.
    #[arg(long)]
    training: Option<PathBuf>,
    #[arg(long)]
    memory: usize,
    /// qr, normal or linear.
    #[arg(long, default_value = "qr")]
    method: String,
    /// Reference kernel for coefficient errors.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Reject outputs whose length is not input + memory - 1.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value = "estimate")]
    name: String,
}

#[derive(Debug, Args)]
struct PredistortArgs {
    #[arg(long)]
    kernel: Option<PathBuf>,
    #[arg(long)]
    target: PathBuf,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    /// Pulse duration, µs.
    #[arg(long)]
    duration: f64,
    /// Control steps; defaults to duration / 0.002.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// box-qn or penalty-pg; overrides the config.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    /// fig1, fig3, fig4, fig5, fig6, fig8 or fig9.
    figure: String,
}

/// Contents of `--config`. Every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    system: Option<SystemConfig>,
    optimizer: Option<OptimizerConfig>,
    kernel: Option<PathBuf>,
    training: Option<PathBuf>,
    truth: Option<PathBuf>,
}

impl ExperimentConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let mut cfg: Self = volterra_core::io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.kernel, &mut cfg.training, &mut cfg.truth].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn system(&self) -> volterra_core::Result<RydbergSystem> {
        match &self.system {
            Some(s) => s.into_system(),
            None => Ok(RydbergSystem::default()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = configure_threads() {
        eprintln!("error: {err:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// The error chain joined by ": ", skipping causes already quoted by an
/// outer message.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<Error>())
        .any(|e| !e.is_validation());
    if numerical {
        3
    } else {
        2
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("VOLTERRA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("VOLTERRA_THREADS must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::MakeKernel(a) => make_kernel(&cli.out, a),
        Command::Distort(a) => distort(&cli.out, cli.seed, &cfg, a),
        Command::Estimate(a) => estimate_cmd(&cli.out, &cfg, a),
        Command::Predistort(a) => predistort_cmd(&cli.out, &cfg, a),
        Command::Optimize(a) => optimize(&cli.out, cli.seed, &cfg, a),
        Command::Reproduce(a) => reproduce_cmd(&cli.out, cli.seed, a),
    }
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))
}

fn stem(path: &Path) -> String {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("pulse");
    name.strip_suffix(".csv").unwrap_or(name).to_string()
}

fn kernel_path(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Option<PathBuf> {
    flag.or_else(|| cfg.kernel.clone())
}

fn required_kernel(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> anyhow::Result<VolterraKernel> {
    match kernel_path(flag, cfg) {
        Some(p) => Ok(read_kernel(&p)?),
        None => bail!(Error::InvalidArgument("a kernel file is required (--kernel or config 'kernel')".into())),
    }
}

fn make_kernel(out: &Path, a: MakeKernelArgs) -> anyhow::Result<()> {
    let (mut spec, default_name) = match (&a.preset, a.memory) {
        (Some(name), _) => (preset(name)?, name.to_ascii_uppercase()),
        (None, Some(r)) => (
            GaussianKernelSpec::new(r, a.sigma1.unwrap_or_default(), a.sigma2.unwrap_or_default()),
            "custom".to_string(),
        ),
        (None, None) => bail!(Error::InvalidArgument(
            "give --preset or --memory with --sigma1 and --sigma2".into()
        )),
    };
    if let Some(j) = a.j {
        spec.j = j;
    }
    if let Some(h0) = a.h0 {
        spec.h0 = h0;
    }
    let kernel = spec.build()?;
    create_out(out)?;
    let path = out.join(format!("{}.kernel.json", a.name.unwrap_or(default_name)));
    write_kernel(&path, &kernel)?;
    println!("{}", path.display());
    Ok(())
}

fn distort(out: &Path, seed: u64, cfg: &ExperimentConfig, a: DistortArgs) -> anyhow::Result<()> {
    let kernel = required_kernel(a.kernel, cfg)?;
    if !(a.noise_sigma >= 0.0 && a.noise_sigma.is_finite()) {
        bail!(Error::InvalidArgument(format!("noise sigma must be non-negative, got {}", a.noise_sigma)));
    }
    let inputs: Vec<Pulse> = a.pulses.iter().map(|p| read_pulse(p)).collect::<Result<_, _>>()?;
    let outputs = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let y = kernel.apply(x);
            if a.noise_sigma > 0.0 {
                add_measurement_noise(&y, a.noise_sigma, mix(seed, 1, i as u64))
            } else {
                Ok(y)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    create_out(out)?;
    for (src, y) in a.pulses.iter().zip(&outputs) {
        let path = out.join(format!("{}.distorted.csv", stem(src)));
        write_pulse(&path, y)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn estimate_cmd(out: &Path, cfg: &ExperimentConfig, a: EstimateArgs) -> anyhow::Result<()> {
    let method = Method::parse(&a.method)?;
    let Some(dir) = a.training.or_else(|| cfg.training.clone()) else {
        bail!(Error::InvalidArgument("a training directory is required (--training or config 'training')".into()));
    };
    let pairs: Vec<_> = read_training_set(&dir)?.into_iter().map(|(_, p)| p).collect();
    if pairs.is_empty() {
        bail!(Error::Validation(format!("no training pairs found in {}", dir.display())));
    }
    if a.strict {
        let order = if method == Method::Linear { ModelOrder::Linear } else { ModelOrder::Quadratic };
        build_problem(&pairs, a.memory, order, LengthPolicy::Strict)?;
    }
    let truth = match a.truth.or_else(|| cfg.truth.clone()) {
        Some(p) => Some(read_kernel(&p)?),
        None => None,
    };
    let report = estimate(&pairs, a.memory, method)?;
    let errors = truth.as_ref().map(|t| kernel_errors(t, &report.kernel)).transpose()?;
    create_out(out)?;
    write_report(out, &a.name, &report, errors)?;
    println!("{}", out.join(format!("{}.report.json", a.name)).display());
    Ok(())
}

#[derive(Serialize)]
struct PredistortSummary {
    target: String,
    input_file: String,
    mean_abs_deviation: f64,
    converged: bool,
}

fn predistort_cmd(out: &Path, cfg: &ExperimentConfig, a: PredistortArgs) -> anyhow::Result<()> {
    let kernel = required_kernel(a.kernel, cfg)?;
    let target = read_pulse(&a.target)?;
    let opt = cfg.optimizer.clone().unwrap_or_default();
    let res = predistort(&kernel, &target, &opt)?;
    create_out(out)?;
    let name = stem(&a.target);
    let input_file = format!("{name}.predistorted.csv");
    write_pulse(&out.join(&input_file), &res.input)?;
    write_json(
        &out.join(format!("{name}.predistort.json")),
        &PredistortSummary {
            target: a.target.display().to_string(),
            input_file: input_file.clone(),
            mean_abs_deviation: res.mean_abs_deviation,
            converged: res.converged,
        },
    )?;
    println!("{}", out.join(input_file).display());
    Ok(())
}

fn optimize(out: &Path, seed: u64, cfg: &ExperimentConfig, a: OptimizeArgs) -> anyhow::Result<()> {
    let sys = cfg.system()?;
    let kernel = match kernel_path(a.kernel, cfg) {
        Some(p) => Some(read_kernel(&p)?),
        None => None,
    };
    let mut opt = cfg.optimizer.clone().unwrap_or_default();
    if cfg.optimizer.is_none() {
        opt.seed = seed;
    }
    if let Some(mode) = &a.mode {
        opt.mode = OptimizerMode::parse(mode)?;
    }
    if let Some(n) = a.max_iterations {
        opt.max_iterations = n;
    }
    opt.validate()?;
    let steps = a.steps.unwrap_or_else(|| steps_for(a.duration));
    let res = optimize_excitation(&sys, a.duration, steps, kernel.as_ref(), &opt)?;
    create_out(out)?;
    write_pulse(&out.join("omega_b.csv"), res.controls.omega_b())?;
    write_pulse(&out.join("omega_r.csv"), res.controls.omega_r())?;
    if kernel.is_some() {
        write_pulse(&out.join("omega_b.distorted.csv"), res.distorted_controls.omega_b())?;
        write_pulse(&out.join("omega_r.distorted.csv"), res.distorted_controls.omega_r())?;
    }
    let path = out.join("result.json");
    write_json(&path, &res.summary())?;
    println!("{}", path.display());
    Ok(())
}

fn reproduce_cmd(out: &Path, seed: u64, a: ReproduceArgs) -> anyhow::Result<()> {
    let fig = Figure::parse(&a.figure)?;
    let tables = reproduce(fig, seed)?;
    for path in write_tables(&out.join(fig.id()), &tables)? {
        println!("{}", path.display());
    }
    Ok(())
}

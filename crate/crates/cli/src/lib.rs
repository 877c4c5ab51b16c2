//! Command implementations behind the `clothfit` binary.
//!
//! Every command that writes a directory also writes a `manifest.json` recording the
//! tool version, arguments, resolved configuration, seeds and phase timings.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use clothfit::estimator::{estimate, Multipliers, OptimConfig, Termination};
use clothfit::io::{
    load_scenario, read_target_dir, write_json, write_loss_curve, write_target_dir_with_run, write_trajectory_ply,
    ResultsFile, RunManifest,
};
use clothfit::sampler::derive_seed;
use clothfit::scenarios::{
    alignment_problem, builtin, evaluate_alignment, generate_dataset, generate_target, Augmentation, DatasetSpec,
    ScenarioSpec, BUILTIN_NAMES,
};
use clothfit::Error;

/// Environment variable naming the directory under which default output paths are created.
pub const OUT_ROOT_VAR: &str = "CLOTHFIT_OUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } => EXIT_DIVERGENCE,
            Error::Io { .. } | Error::Parse { .. } | Error::Json { .. } | Error::Csv { .. } => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "clothfit", version, about = "Estimate cloth stiffness and mass from point-cloud sequences")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a scenario at known parameters and write the sampled target sequence.
    GenTarget(GenTargetArgs),
    /// Fit the stiffness and mass multipliers to a target sequence.
    Estimate(EstimateArgs),
    /// Print the alignment loss of given parameters against a target.
    Evaluate(EvaluateArgs),
    /// Compare the analytic loss gradient with central finite differences on a small instance.
    Gradcheck(GradcheckArgs),
    /// Generate a labelled set of target sequences with random parameters.
    GenDataset(GenDatasetArgs),
    /// Write the configuration of a built-in scenario.
    Scenario(ScenarioArgs),
    /// Simulate a scenario and write one PLY mesh per frame.
    Rollout(RolloutArgs),
}

/// Parses `w_stiff,w_mass`.
pub fn parse_params(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected W_STIFF,W_MASS, got '{s}'"));
    }
    let mut out = [0.0; 2];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse::<f64>().map_err(|e| format!("'{p}': {e}"))?;
        if !o.is_finite() {
            return Err(format!("'{p}' is not finite"));
        }
    }
    Ok(out)
}

fn multipliers(p: [f64; 2]) -> Multipliers<f64> {
    Multipliers {
        w_stiff: p[0],
        w_mass: p[1],
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenTargetArgs {
    /// Scenario config file, or the name of a built-in scenario.
    pub scenario: String,
    /// True parameters as W_STIFF,W_MASS.
    #[arg(long, value_parser = parse_params)]
    pub params: [f64; 2],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of Gaussian point noise, in metres.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Fraction of faces hidden in each frame.
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EstimateArgs {
    pub scenario: String,
    /// Target sequence directory.
    pub target: PathBuf,
    /// Adam learning rate; defaults to the scenario's.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Iteration budget; defaults to the scenario's.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Stop once an iterate's loss falls below this; defaults to the scenario's.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Run without a loss threshold even if the scenario sets one.
    #[arg(long, conflicts_with = "threshold")]
    pub no_threshold: bool,
    /// Seed for the per-iteration sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    pub scenario: String,
    pub target: PathBuf,
    #[arg(long, value_parser = parse_params)]
    pub params: [f64; 2],
    /// Seed for sampling the simulated surface.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    pub scenario: String,
    /// Grid vertices per side of the reduced cloth (at most 5).
    #[arg(long, default_value_t = 3)]
    pub resolution: usize,
    /// Frames in the reduced rollout (at most 15).
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    /// Largest accepted relative error per parameter.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Number of random parameter draws.
    #[arg(long, default_value_t = 5)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct GenDatasetArgs {
    pub scenario: String,
    #[arg(long)]
    pub train: usize,
    #[arg(long)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampling range for both multipliers as LO,HI; defaults to the scenario's range.
    #[arg(long, value_parser = parse_params)]
    pub range: Option<[f64; 2]>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Redraws allowed per example after a diverged rollout.
    #[arg(long, default_value_t = 3)]
    pub max_retries: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ScenarioArgs {
    /// One of lift, fold, band_stretch.
    pub name: String,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct RolloutArgs {
    pub scenario: String,
    #[arg(long, value_parser = parse_params)]
    pub params: [f64; 2],
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Loads a scenario from a file, falling back to the built-in of that name.
pub fn resolve_scenario(arg: &str) -> CliResult<ScenarioSpec> {
    let path = Path::new(arg);
    if path.exists() {
        return Ok(load_scenario(path)?);
    }
    if let Some(spec) = builtin(arg) {
        return Ok(spec);
    }
    Err(CliError {
        code: EXIT_IO,
        message: format!(
            "{arg}: no such file, and not a built-in scenario ({})",
            BUILTIN_NAMES.join(", ")
        ),
    })
}

fn default_out(out: &Option<PathBuf>, name: String) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("clothfit-out"));
        root.join(name)
    })
}

fn manifest(
    command: &str,
    arguments: &[String],
    config: serde_json::Value,
    seeds: serde_json::Value,
    timings_s: Vec<(String, f64)>,
) -> RunManifest {
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        arguments: arguments.to_vec(),
        config,
        seeds,
        timings_s,
    }
}

struct Phases {
    last: Instant,
    timings: Vec<(String, f64)>,
}

impl Phases {
    fn start() -> Self {
        Phases {
            last: Instant::now(),
            timings: Vec::new(),
        }
    }

    fn mark(&mut self, name: &str) {
        let now = Instant::now();
        self.timings.push((name.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }
}

fn to_json<S: serde::Serialize>(v: &S) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialise")
}

/// Writes the target directory and returns its path.
///
/// The manifest carries no timings so that repeated invocations produce identical bytes;
/// they are logged instead.
pub fn cmd_gen_target(args: &GenTargetArgs, argv: &[String]) -> CliResult<PathBuf> {
    let mut phases = Phases::start();
    let spec = resolve_scenario(&args.scenario)?;
    let augment = Augmentation {
        noise_sigma_m: args.noise,
        dropout_fraction: args.dropout,
    };
    let out = default_out(&args.out, format!("target-{}-seed{}", spec.name, args.seed));
    phases.mark("load");
    let target = generate_target::<f64>(&spec, multipliers(args.params), args.seed, augment)?;
    phases.mark("simulate");
    let run = manifest(
        "gen-target",
        argv,
        json!({ "scenario": to_json(&spec), "params": args.params, "augmentation": to_json(&augment) }),
        json!({ "target": args.seed }),
        Vec::new(),
    );
    write_target_dir_with_run(&out, &target, Some(&run))?;
    phases.mark("write");
    log::info!("gen-target timings: {:?}", phases.timings);
    Ok(out)
}

pub struct EstimateOutput {
    pub out: PathBuf,
    pub results: ResultsFile,
}

pub fn cmd_estimate(args: &EstimateArgs, argv: &[String]) -> CliResult<EstimateOutput> {
    let mut phases = Phases::start();
    let spec = resolve_scenario(&args.scenario)?;
    let target = read_target_dir::<f64>(&args.target)?;
    let problem = alignment_problem(&spec, &target)?;
    let range = spec.range()?;
    let mut config = OptimConfig::new(
        args.lr.unwrap_or(spec.default_learning_rate),
        args.iters.unwrap_or(spec.default_max_iterations),
        problem.loss_frames(),
    );
    config.loss_threshold = if args.no_threshold {
        None
    } else {
        args.threshold.or(spec.default_loss_threshold)
    };
    config.run_seed = args.seed;
    config.validate(spec.horizon_frames)?;
    let out = default_out(&args.out, format!("estimate-{}-seed{}", spec.name, args.seed));
    phases.mark("load");

    let result = estimate(&problem, range, &config)?;
    phases.mark("optimise");
    let results = ResultsFile::from_result(&result);
    write_json(&out.join("results.json"), &results)?;
    write_loss_curve(&out.join("loss_curve.csv"), &result)?;
    phases.mark("write");
    let run = manifest(
        "estimate",
        argv,
        json!({
            "scenario": to_json(&spec),
            "target": args.target,
            "learning_rate": config.learning_rate,
            "max_iterations": config.max_iterations,
            "loss_threshold": config.loss_threshold,
            "loss_frames": config.loss_frames,
            "adam": { "beta1": config.adam_beta1, "beta2": config.adam_beta2, "epsilon": config.adam_epsilon },
        }),
        json!({ "run": args.seed }),
        phases.timings,
    );
    write_json(&out.join("manifest.json"), &run)?;
    if result.termination == Termination::Divergence {
        return Err(CliError {
            code: EXIT_DIVERGENCE,
            message: format!(
                "optimisation stopped after a diverged rollout at iteration {}; partial results in {}",
                result.history.len(),
                out.display()
            ),
        });
    }
    Ok(EstimateOutput { out, results })
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<f64> {
    let spec = resolve_scenario(&args.scenario)?;
    let target = read_target_dir::<f64>(&args.target)?;
    Ok(evaluate_alignment(&spec, multipliers(args.params), &target, args.seed)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckDraw {
    pub params: [f64; 2],
    pub analytic: [f64; 2],
    pub finite_difference: [f64; 2],
    pub relative_error: [f64; 2],
}

/// Central-difference step relative to the parameter. The loss is only once
/// differentiable where contacts activate, so larger steps pick up curvature jumps.
pub const FD_RELATIVE_STEP: f64 = 1e-7;

/// Analytic `dL/dw` against central differences with sampling provenance held fixed.
pub fn gradcheck(spec: &ScenarioSpec, resolution: usize, horizon: usize, draws: usize, seed: u64) -> CliResult<Vec<GradcheckDraw>> {
    if !(2..=5).contains(&resolution) {
        return Err(CliError::validation(format!("resolution must lie in [2, 5], got {resolution}")));
    }
    if !(1..=15).contains(&horizon) {
        return Err(CliError::validation(format!("horizon must lie in [1, 15], got {horizon}")));
    }
    let small = spec.downscaled(resolution, horizon)?;
    let range = small.range()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = multipliers([rng.random_range(range.lo..=range.hi), rng.random_range(range.lo..=range.hi)]);
    let target = generate_target::<f64>(&small, truth, derive_seed(seed, &[0]), Augmentation::default())?;
    let problem = alignment_problem(&small, &target)?;
    (0..draws)
        .map(|k| {
            let w = [rng.random_range(range.lo..=range.hi), rng.random_range(range.lo..=range.hi)];
            let traj = problem.scene().rollout(&problem.params(multipliers(w)))?;
            let frozen = problem.sample(&traj, derive_seed(seed, &[1, k as u64]))?;
            let eval = problem.loss_and_grad_frozen(multipliers(w), &frozen)?;
            let analytic = [eval.grad.w_stiff, eval.grad.w_mass];
            let mut fd = [0.0; 2];
            for (a, d) in fd.iter_mut().enumerate() {
                let h = FD_RELATIVE_STEP * w[a];
                let at = |delta: f64| -> CliResult<f64> {
                    let mut p = w;
                    p[a] += delta;
                    Ok(problem.loss_and_grad_frozen(multipliers(p), &frozen)?.loss)
                };
                *d = (at(h)? - at(-h)?) / (2.0 * h);
            }
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
            Ok(GradcheckDraw {
                params: w,
                analytic,
                finite_difference: fd,
                relative_error: [rel(analytic[0], fd[0]), rel(analytic[1], fd[1])],
            })
        })
        .collect()
}

/// Prints every draw; fails with a validation exit code when any error exceeds the tolerance.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<Vec<GradcheckDraw>> {
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        return Err(CliError::validation("tolerance must be positive"));
    }
    let spec = resolve_scenario(&args.scenario)?;
    let report = gradcheck(&spec, args.resolution, args.horizon, args.draws, args.seed)?;
    let mut worst: f64 = 0.0;
    for d in &report {
        println!(
            "w = ({:.6}, {:.6})  dL/dw_stiff analytic {:.9e} fd {:.9e} rel {:.2e}  dL/dw_mass analytic {:.9e} fd {:.9e} rel {:.2e}",
            d.params[0],
            d.params[1],
            d.analytic[0],
            d.finite_difference[0],
            d.relative_error[0],
            d.analytic[1],
            d.finite_difference[1],
            d.relative_error[1]
        );
        worst = worst.max(d.relative_error[0]).max(d.relative_error[1]);
    }
    if worst > args.tolerance {
        return Err(CliError::validation(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds tolerance {:.3e}",
            args.tolerance
        )));
    }
    Ok(report)
}

pub fn cmd_gen_dataset(args: &GenDatasetArgs, argv: &[String]) -> CliResult<PathBuf> {
    let mut phases = Phases::start();
    let spec = resolve_scenario(&args.scenario)?;
    let dspec = DatasetSpec {
        train: args.train,
        test: args.test,
        param_range: args.range.unwrap_or(spec.param_range),
        augmentation: Augmentation {
            noise_sigma_m: args.noise,
            dropout_fraction: args.dropout,
        },
        seed: args.seed,
        max_retries: args.max_retries,
    };
    dspec.validate()?;
    let out = default_out(&args.out, format!("dataset-{}-seed{}", spec.name, args.seed));
    phases.mark("load");
    let labels = generate_dataset(&spec, &dspec, &out)?;
    phases.mark("generate");
    let run = manifest(
        "gen-dataset",
        argv,
        json!({ "scenario": to_json(&spec), "dataset": to_json(&dspec) }),
        json!({ "dataset": args.seed }),
        phases.timings,
    );
    write_json(&out.join("manifest.json"), &run)?;
    log::info!("wrote {} examples to {}", labels.len(), out.display());
    Ok(out)
}

pub fn cmd_scenario(args: &ScenarioArgs) -> CliResult<()> {
    let spec = builtin(&args.name).ok_or_else(|| {
        CliError::validation(format!("unknown scenario '{}' (expected one of {})", args.name, BUILTIN_NAMES.join(", ")))
    })?;
    match &args.out {
        Some(path) => write_json(path, &spec)?,
        None => println!("{}", serde_json::to_string_pretty(&spec).expect("config types serialise")),
    }
    Ok(())
}

pub fn cmd_rollout(args: &RolloutArgs, argv: &[String]) -> CliResult<PathBuf> {
    let mut phases = Phases::start();
    let spec = resolve_scenario(&args.scenario)?;
    let range = spec.range()?;
    for (name, w) in [("w_stiff", args.params[0]), ("w_mass", args.params[1])] {
        if !range.contains(w) {
            return Err(CliError::validation(format!("invalid {name}: {w} outside [{}, {}]", range.lo, range.hi)));
        }
    }
    let compiled = spec.compile::<f64>()?;
    let out = default_out(&args.out, format!("rollout-{}", spec.name));
    phases.mark("load");
    let traj = compiled.scene.rollout(&compiled.scene.params(args.params[0], args.params[1]))?;
    phases.mark("simulate");
    write_trajectory_ply(&out, &compiled.scene.mesh, &traj)?;
    phases.mark("write");
    let run = manifest(
        "rollout",
        argv,
        json!({ "scenario": to_json(&spec), "params": args.params, "substeps_per_frame": compiled.scene.substeps }),
        json!({}),
        phases.timings,
    );
    write_json(&out.join("manifest.json"), &run)?;
    Ok(out)
}

fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<()> {
    match &cli.command {
        Command::GenTarget(a) => {
            let out = cmd_gen_target(a, argv)?;
            println!("{}", out.display());
        }
        Command::Estimate(a) => {
            let r = cmd_estimate(a, argv)?;
            println!(
                "best w_stiff {} w_mass {} loss {} at iteration {} ({}); results in {}",
                r.results.best_w_stiff,
                r.results.best_w_mass,
                r.results.best_loss.map_or("n/a".to_string(), |l| l.to_string()),
                r.results.best_iteration,
                r.results.termination,
                r.out.display()
            );
        }
        Command::Evaluate(a) => println!("{}", cmd_evaluate(a)?),
        Command::Gradcheck(a) => {
            cmd_gradcheck(a)?;
        }
        Command::GenDataset(a) => {
            let out = cmd_gen_dataset(a, argv)?;
            println!("{}", out.display());
        }
        Command::Scenario(a) => cmd_scenario(a)?,
        Command::Rollout(a) => {
            let out = cmd_rollout(a, argv)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(&cli, &argv[1..]) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

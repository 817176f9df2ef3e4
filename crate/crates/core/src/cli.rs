//! Command-line front-end: synth, calibrate, train, estimate, compare.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{PoolSourceKind, RunConfig};
use crate::container::TensorFile;
use crate::cube::{load_cube, write_cube, Cube};
use crate::data::{sample_gaussian_data, DataMatrix};
use crate::denoiser::{load_params, loss_simple, save_params, train_resumable, zero_predictor_loss, DenoiserParams, TrainState};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::eval::{emit_comparison_heatmaps, run_comparison, write_report, Method};
use crate::linalg::csv::{read_matrix, write_matrix};
use crate::linalg::SymMatrix;
use crate::optimizer::{initial_estimate, pgd_run, DiffusionContext, Problem, SolverConfig, StopReason};
use crate::pipeline::{calibrate_from_pool, gradient_pool, observe, training_set, PoolSpec, TruthSource};
use crate::rng::SeedStream;
use crate::sensing::{default_sigma_n, measure, ProjectionEnsemble, SensingConfig};

#[derive(Debug, Parser)]
#[command(name = "covdiff", version, about = "Covariance estimation from partitioned compressive measurements")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Dotted-path override, e.g. `solver.max_iters=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a cube from the configured covariance and write it with the true covariance.
    Synth(#[command(flatten)] Common),
    /// Measure gradient-error levels and write the diffusion schedule.
    Calibrate(#[command(flatten)] Common),
    /// Train the noise-prediction network.
    Train(#[command(flatten)] Common),
    /// Estimate the covariance of the cube.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "identity")]
        method: String,
    },
    /// Paired comparison of the preconditioners on the synthetic scenario.
    Compare(#[command(flatten)] Common),
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut set = self.set.clone();
        if let Some(s) = self.seed {
            set.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            set.push(format!("output_dir={}", serde_json::to_string(o).map_err(Error::from)?));
        }
        if self.threads == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        RunConfig::load(self.config.as_deref(), &set)
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(c) => cmd_synth(&c.resolve()?),
        Command::Calibrate(c) => cmd_calibrate(&c.resolve()?, c.threads),
        Command::Train(c) => cmd_train(&c.resolve()?, c.threads),
        Command::Estimate { common, method } => cmd_estimate(&common.resolve()?, Method::parse(method).map_err(|_| {
            Error::Config(format!("unknown method {method:?}; expected identity, gaussian or diffusion"))
        })?),
        Command::Compare(c) => cmd_compare(&c.resolve()?, c.threads),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(&cfg.output_dir)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let seed = SeedStream::new(cfg.seed);
    let truth = cfg.scenario().truth(seed)?;
    let data = sample_gaussian_data(&truth, cfg.data.n, seed.named("cube"))?;
    let cube = Cube::from_data(&data, cfg.data.rows, cfg.data.n / cfg.data.rows)?;
    write_cube(out.join("cube.hscube"), &cube)?;
    write_matrix(out.join("sigma_true.csv"), &truth)
}

fn load_observed(cfg: &RunConfig) -> Result<(DataMatrix, SymMatrix)> {
    let data = load_cube(cfg.cube_path())?;
    let truth_path = cfg.truth_path();
    if !truth_path.exists() {
        return Err(Error::MissingArtifact(truth_path));
    }
    let truth = SymMatrix::new(read_matrix(&truth_path)?)?;
    if truth.dim() != data.bands() {
        return Err(Error::dim(format!("cube has {} bands, truth is {}x{}", data.bands(), truth.dim(), truth.dim())));
    }
    Ok((data, truth))
}

fn pool_for(
    cfg: &RunConfig,
    data: &DataMatrix,
    truth: &SymMatrix,
    levels: Vec<usize>,
    instances: usize,
    label: &str,
    threads: usize,
) -> Result<Vec<crate::pipeline::PoolEntry>> {
    let d = &cfg.diffusion;
    let source = match d.pool_source {
        PoolSourceKind::Observed => TruthSource::Observed { data, truth },
        PoolSourceKind::ToeplitzFamily => {
            TruthSource::ToeplitzFamily { l: truth.dim(), rho_min: d.rho_min, rho_max: d.rho_max, n: data.samples() }
        }
    };
    let spec = PoolSpec {
        levels,
        m: cfg.sensing.m,
        instances,
        iterates_per_instance: d.iterates_per_instance,
        perturb: d.perturb,
    };
    gradient_pool(&source, &spec, &cfg.objective, SeedStream::new(cfg.seed).named(label), threads)
}

pub fn cmd_calibrate(cfg: &RunConfig, threads: usize) -> Result<()> {
    let (data, truth) = load_observed(cfg)?;
    let levels = cfg.levels();
    let pool = pool_for(cfg, &data, &truth, levels.clone(), cfg.diffusion.calibration_instances, "calibration", threads)?;
    let schedule = calibrate_from_pool(&pool, &levels)?;
    schedule.save(out_dir(cfg)?.join("schedule.json"))
}

pub fn cmd_train(cfg: &RunConfig, threads: usize) -> Result<()> {
    let schedule = DiffusionSchedule::load(cfg.schedule_path())?;
    let (data, truth) = load_observed(cfg)?;
    let levels = schedule.partition_of_step().to_vec();
    let pool = pool_for(cfg, &data, &truth, levels, cfg.diffusion.training_instances, "training", threads)?;
    let set = training_set(&pool, &schedule)?;
    let out = out_dir(cfg)?;
    let hyper = crate::denoiser::TrainHyper { seed: cfg.seed, ..cfg.denoiser.train };
    let checkpoint = out.join("checkpoint.cgdm");
    let state = if cfg.denoiser.resume && checkpoint.exists() {
        TrainState::load(&checkpoint)?
    } else {
        let init = DenoiserParams::init(cfg.denoiser.arch, SeedStream::new(hyper.seed).named("init"))?;
        TrainState::fresh(init)
    };
    let state = match train_resumable(&set, &schedule, state, &hyper, cfg.denoiser.stop_at.unwrap_or(hyper.steps)) {
        Ok(s) => s,
        Err(Error::TrainingDiverged { step, last_valid }) => {
            save_params(&last_valid, out.join("diverged.cgdm"))?;
            return Err(Error::TrainingDiverged { step, last_valid });
        }
        Err(e) => return Err(e),
    };
    state.save(&checkpoint)?;
    save_params(&state.params, out.join("weights.cgdm"))?;
    let mut log = String::from("step,loss\n");
    for (i, l) in state.log.iter().enumerate() {
        writeln!(log, "{i},{l:?}").expect("write to string");
    }
    fs::write(out.join("train_log.csv"), log)?;
    let n_val = hyper.validation_count(set.len());
    let val = &set.records[..n_val];
    let summary = if val.is_empty() {
        json!({ "records": set.len(), "validation_records": 0 })
    } else {
        json!({
            "records": set.len(),
            "validation_records": n_val,
            "val_loss": loss_simple(val, &state.params, &schedule)?,
            "val_zero_loss": zero_predictor_loss(val),
        })
    };
    fs::write(out.join("train_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(DiffusionSchedule, DenoiserParams)> {
    let schedule = DiffusionSchedule::load(cfg.schedule_path())?;
    let weights = cfg.weights_path();
    if !weights.exists() {
        return Err(Error::MissingArtifact(weights));
    }
    Ok((schedule, load_params(weights)?))
}

pub fn cmd_estimate(cfg: &RunConfig, method: Method) -> Result<()> {
    let model = if method == Method::Diffusion { Some(load_model(cfg)?) } else { None };
    let data = load_cube(cfg.cube_path())?;
    if data.bands() != cfg.data.l || data.samples() != cfg.data.n {
        return Err(Error::dim(format!(
            "cube is {}x{}, config expects l={} n={}",
            data.bands(),
            data.samples(),
            cfg.data.l,
            cfg.data.n
        )));
    }
    let sigma_n = match cfg.sensing.sigma_n {
        Some(s) => s,
        None => default_sigma_n(&data.sample_covariance()),
    };
    let sensing = SensingConfig { l: cfg.data.l, m: cfg.sensing.m, p: cfg.sensing.p, sigma_n };
    let seed = SeedStream::new(cfg.seed);
    let obs = seed.named("observe");
    let (plan, proj, meas) = observe(&data, &sensing, obs)?;
    let (proj, meas) = match &cfg.sensing.projections {
        Some(path) => {
            let proj = ProjectionEnsemble::from_container(&TensorFile::read(path)?)?;
            if proj.partitions() != sensing.p || proj.ambient_dim() != sensing.l || proj.compressed_dim() != sensing.m {
                return Err(Error::dim("loaded projections do not match the sensing configuration"));
            }
            let meas = measure(&data, &plan, &proj, sigma_n, obs.named("noise"))?;
            (proj, meas)
        }
        None => (proj, meas),
    };
    let out = out_dir(cfg)?;
    proj.to_container().write(out.join("projections.cgdm"))?;
    let problem = Problem { meas: &meas, proj: &proj, cfg: &cfg.objective };
    let init = initial_estimate(&problem, cfg.solver.init)?;
    let solver = SolverConfig { preconditioner: cfg.eval.settings.kind(method), ..cfg.solver };
    let ctx = model.as_ref().map(|(s, p)| DiffusionContext { model: p, schedule: s });
    let (est, trace) = pgd_run(&problem, &init, &solver, ctx, seed.named("solver"))?;
    let name = method.name();
    trace.write_csv(out.join(format!("trace_{name}.csv")))?;
    if trace.stop == StopReason::NonFinite {
        return Err(Error::Numerical { message: "objective became non-finite".into(), residual: f64::NAN });
    }
    write_matrix(out.join(format!("estimate_{name}.csv")), &est)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

pub fn cmd_compare(cfg: &RunConfig, threads: usize) -> Result<()> {
    let model = if cfg.eval.methods.contains(&Method::Diffusion) { Some(load_model(cfg)?) } else { None };
    let ctx = model.as_ref().map(|(s, p)| DiffusionContext { model: p, schedule: s });
    let cmp = run_comparison(&cfg.scenario(), &cfg.eval, &cfg.solver, &cfg.objective, ctx, cfg.seed, threads)?;
    let out = out_dir(cfg)?;
    write_report(out.join("report.csv"), &cmp.rows)?;
    let maps = out.join("heatmaps");
    fs::create_dir_all(&maps)?;
    emit_comparison_heatmaps(&cmp, &cfg.eval.seeds, &maps)?;
    let ratio = |a, b| cmp.median_mse_ratio(a, b);
    let summary = json!({
        "config_hash": format!("{:016x}", fnv1a(cfg.to_json().as_bytes())),
        "seeds": cfg.eval.seeds,
        "median_mse_ratio_diffusion_identity": ratio(Method::Diffusion, Method::Identity),
        "median_mse_ratio_gaussian_identity": ratio(Method::Gaussian, Method::Identity),
        "median_aligned_eigs": Method::ALL
            .iter()
            .map(|&m| (m.name().to_string(), json!(cmp.median_aligned(m))))
            .collect::<serde_json::Map<_, _>>(),
        "notes": cmp.notes,
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

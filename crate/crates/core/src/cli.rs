//! Command-line front end: make test data, degrade, restore, evaluate.
//!
//! Exit codes: 0 success, 2 usage or validation, 3 infeasible sampler
//! configuration, 1 anything else.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cube::{export_band_png, load_cube, save_cube, Dims, HsiCube, RangeTag};
use crate::degradation::{add_noise, mask_to_cube, random_mask, DegradationOperator, NoiseSpec};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::sampler::{
    restore, restore_no_diffusion_with_budget, SamplerConfig, SignalScale, StepReport,
};
use crate::schedule::{DiffusionSchedule, SigmaConvention};
use crate::synth::{make_synthetic, SynthSpec};
use crate::vs2m::{FitConfig, ModelConfig, SpatialArch};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hsi-restore", version, about = "Diffusion restoration of hyperspectral cubes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic low-rank cube and its factors.
    Synth(SynthArgs),
    /// Degrade a ground-truth cube and record the degradation in a JSON sidecar.
    Degrade(DegradeArgs),
    /// Restore a degraded observation.
    Restore(RestoreArgs),
    /// Print MPSNR and MSSIM of an estimate against a reference.
    Evaluate(EvaluateArgs),
    /// Export one band as an 8-bit grayscale PNG.
    ExportPng(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Cube size as IxJxK.
    #[arg(long)]
    pub dims: Dims,
    #[arg(long)]
    pub rank: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Blur width of the abundance fields in pixels (default max(I, J) / 8).
    #[arg(long)]
    pub smoothness: Option<f64>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Noise standard deviation on the [0, 1] scale.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Fraction of observed voxels (complete).
    #[arg(long)]
    pub sampling_rate: Option<f64>,
    /// Downsampling factor (sr).
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Sidecar path (default: the output path with a .json extension).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long, required_unless_present = "print_config")]
    pub obs: Option<PathBuf>,
    /// Sidecar written by `degrade` (default: the observation path with a .json extension).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Flat key=value run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short, long, required_unless_present = "print_config")]
    pub out: Option<PathBuf>,
    /// Fit the observation directly, without the diffusion chain.
    #[arg(long)]
    pub ablate_no_diffusion: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Suppress per-step progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub est: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub cube: PathBuf,
    /// Zero-based band index.
    #[arg(long)]
    pub band: usize,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise,
    Complete,
    Sr,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Complete => "complete",
            Task::Sr => "sr",
        }
    }

    pub fn default_steps(&self) -> usize {
        match self {
            Task::Complete => 3000,
            Task::Denoise | Task::Sr => 1000,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Task::Denoise),
            "complete" => Ok(Task::Complete),
            "sr" => Ok(Task::Sr),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected denoise, complete or sr)"
            ))),
        }
    }
}

/// What `degrade` did, as needed to rebuild the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub task: Task,
    /// Noise std on the [0, 1] scale.
    pub sigma: f64,
    pub seed: u64,
    /// Size of the ground truth, IxJxK.
    pub dims: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate: Option<f64>,
    /// Mask file, relative to the sidecar's directory unless absolute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
}

impl Sidecar {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn gt_dims(&self) -> Result<Dims> {
        self.dims.parse()
    }

    /// Rebuilds the degradation operator; `base` resolves a relative mask path.
    pub fn operator(&self, base: &Path) -> Result<DegradationOperator> {
        let dims = self.gt_dims()?;
        match self.task {
            Task::Denoise => Ok(DegradationOperator::denoise(dims)),
            Task::Sr => {
                let p = self
                    .scale
                    .ok_or_else(|| Error::Config("sr sidecar is missing \"scale\"".into()))?;
                DegradationOperator::sr_block(dims, p)
            }
            Task::Complete => {
                let rel = self
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::Config("completion sidecar is missing \"mask\"".into()))?;
                let mask = load_cube(base.join(rel))?;
                if mask.dims() != dims {
                    return Err(Error::Config(format!(
                        "mask has dims {}, sidecar says {dims}",
                        mask.dims()
                    )));
                }
                DegradationOperator::completion_from_cube(&mask)
            }
        }
    }
}

/// Resolved run configuration for `restore`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub steps: usize,
    pub t0: usize,
    pub eta: f64,
    pub eta_b: f64,
    pub beta_1: f64,
    pub beta_last: f64,
    pub sigma_convention: SigmaConvention,
    pub unit_scale: bool,
    pub rank: usize,
    /// Feed the raw latent into the full-resolution decoder stage.
    pub latent_skip: bool,
    pub learning_rate: f64,
    pub iters_per_step: usize,
    /// Adam updates of the no-diffusion ablation.
    pub ablation_iters: usize,
    pub seed: u64,
}

const CONFIG_KEYS: [&str; 15] = [
    "task",
    "steps",
    "t0",
    "eta",
    "eta_b",
    "beta_1",
    "beta_T",
    "sigma_convention",
    "unit_scale",
    "rank",
    "latent_skip",
    "learning_rate",
    "iters_per_step",
    "ablation_iters",
    "seed",
];

impl RunConfig {
    /// Every knob at its default for `task`.
    pub fn defaults(task: Task) -> Self {
        let steps = task.default_steps();
        let fit = FitConfig::default();
        RunConfig {
            task,
            steps,
            t0: steps / 2,
            eta: 0.95,
            eta_b: 1.0,
            beta_1: 1e-4,
            beta_last: 2e-3,
            sigma_convention: SigmaConvention::default(),
            unit_scale: true,
            rank: 5,
            latent_skip: SpatialArch::default().latent_skip,
            learning_rate: fit.learning_rate,
            iters_per_step: fit.iters_per_step,
            ablation_iters: steps * fit.iters_per_step,
            seed: 0,
        }
    }

    /// Parses flat `key=value` text. Keys left out take their defaults for
    /// the task, which comes from the text or else from `fallback_task`.
    pub fn parse(text: &str, fallback_task: Task) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        let task = match pairs.get("task") {
            Some(v) => v.parse()?,
            None => fallback_task,
        };
        let mut cfg = RunConfig::defaults(task);
        let steps_given = pairs.contains_key("steps");
        let iters_given = pairs.contains_key("iters_per_step");
        for (k, v) in &pairs {
            match k.as_str() {
                "task" => {}
                "steps" => cfg.steps = value(k, v)?,
                "t0" => cfg.t0 = value(k, v)?,
                "eta" => cfg.eta = value(k, v)?,
                "eta_b" => cfg.eta_b = value(k, v)?,
                "beta_1" => cfg.beta_1 = value(k, v)?,
                "beta_T" => cfg.beta_last = value(k, v)?,
                "sigma_convention" => cfg.sigma_convention = v.parse()?,
                "unit_scale" => cfg.unit_scale = value(k, v)?,
                "rank" => cfg.rank = value(k, v)?,
                "latent_skip" => cfg.latent_skip = value(k, v)?,
                "learning_rate" => cfg.learning_rate = value(k, v)?,
                "iters_per_step" => cfg.iters_per_step = value(k, v)?,
                "ablation_iters" => cfg.ablation_iters = value(k, v)?,
                "seed" => cfg.seed = value(k, v)?,
                _ => unreachable!("keys are checked above"),
            }
        }
        // derived defaults follow the values they derive from
        if steps_given && !pairs.contains_key("t0") {
            cfg.t0 = cfg.steps / 2;
        }
        if (steps_given || iters_given) && !pairs.contains_key("ablation_iters") {
            cfg.ablation_iters = cfg.steps * cfg.iters_per_step;
        }
        cfg.sampler_config(0.0)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "task={}\nsteps={}\nt0={}\neta={}\neta_b={}\nbeta_1={}\nbeta_T={}\n\
             sigma_convention={}\nunit_scale={}\nrank={}\nlatent_skip={}\nlearning_rate={}\n\
             iters_per_step={}\nablation_iters={}\nseed={}\n",
            self.task,
            self.steps,
            self.t0,
            self.eta,
            self.eta_b,
            self.beta_1,
            self.beta_last,
            self.sigma_convention.as_str(),
            self.unit_scale,
            self.rank,
            self.latent_skip,
            self.learning_rate,
            self.iters_per_step,
            self.ablation_iters,
            self.seed
        )
    }

    /// Sampler settings for a measurement noise `sigma_y` (signed scale).
    pub fn sampler_config(&self, sigma_y: f64) -> Result<SamplerConfig> {
        let schedule = DiffusionSchedule::linear(
            self.steps,
            self.beta_1,
            self.beta_last,
            self.sigma_convention,
        )?;
        let cfg = SamplerConfig {
            schedule,
            t0: self.t0,
            eta: self.eta,
            eta_b: self.eta_b,
            sigma_y,
            signal_scale: if self.unit_scale {
                SignalScale::Unit
            } else {
                SignalScale::SqrtAlphaBar
            },
            model: {
                let mut m = ModelConfig::with_rank(self.rank);
                m.spatial.latent_skip = self.latent_skip;
                m
            },
            fit: FitConfig {
                learning_rate: self.learning_rate,
                iters_per_step: self.iters_per_step,
                ..FitConfig::default()
            },
            seed: self.seed,
        };
        cfg.validate()?;
        if self.ablation_iters == 0 {
            return Err(Error::Contract("ablation_iters must be at least 1".into()));
        }
        Ok(cfg)
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key:?}")))
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::OutOfBounds { .. }
        | Error::Contract(_)
        | Error::DimensionMismatch { .. }
        | Error::Header { .. }
        | Error::TruncatedPayload { .. }
        | Error::TrailingPayload { .. }
        | Error::Config(_)
        | Error::Json(_) => EXIT_USAGE,
        Error::Fit { .. } | Error::Step { .. } | Error::Io { .. } | Error::Image(_) => {
            EXIT_INTERNAL
        }
    }
}

/// Runs one command; results go to `out`, progress and messages to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Degrade(a) => cmd_degrade(&a),
        Command::Restore(a) => cmd_restore(&a, out, err),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::ExportPng(a) => cmd_export(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::new(a.dims, a.rank, a.seed);
    if let Some(s) = a.smoothness {
        spec.smoothness = s;
    }
    let s = make_synthetic(&spec)?;
    save_cube(&s.cube, &a.out)?;
    let spatial = Dims::new(a.dims.height, a.dims.width, a.rank)?;
    let maps = HsiCube::new(spatial, s.abundances.concat(), RangeTag::Unit01)?;
    save_cube(&maps, sibling(&a.out, ".abundances.hsic"))?;
    let spectra = Dims::new(a.dims.bands, 1, a.rank)?;
    let ends = HsiCube::new(spectra, s.endmembers.concat(), RangeTag::Unit01)?;
    save_cube(&ends, sibling(&a.out, ".endmembers.hsic"))?;
    Ok(())
}

pub fn cmd_degrade(a: &DegradeArgs) -> Result<()> {
    let gt = load_cube(&a.gt)?;
    if gt.range() != RangeTag::Unit01 {
        return Err(Error::Contract("ground truth must be a unit01 cube".into()));
    }
    let dims = gt.dims();
    let noise = NoiseSpec::new(a.sigma, a.seed)?;
    let sidecar_path = a
        .sidecar
        .clone()
        .unwrap_or_else(|| a.out.with_extension("json"));
    let mut sidecar = Sidecar {
        task: a.task,
        sigma: noise.sigma_y,
        seed: a.seed,
        dims: dims.to_string(),
        sampling_rate: None,
        mask: None,
        scale: None,
    };
    // noise is drawn on the unit scale, so `sigma` is used directly here
    let obs = match a.task {
        Task::Denoise => {
            if a.sampling_rate.is_some() || a.scale.is_some() {
                return Err(Error::Config("denoise takes neither --sampling-rate nor --scale".into()));
            }
            HsiCube::observation(dims, add_noise(gt.values(), &noise), RangeTag::Unit01)?
        }
        Task::Sr => {
            let p = a
                .scale
                .ok_or_else(|| Error::Config("sr needs --scale".into()))?;
            let op = DegradationOperator::sr_block(dims, p)?;
            let low = op.apply(gt.values())?;
            sidecar.scale = Some(p);
            let out_dims = op.output_dims().expect("sr has a cube-shaped output");
            HsiCube::observation(out_dims, add_noise(&low, &noise), RangeTag::Unit01)?
        }
        Task::Complete => {
            let rate = a
                .sampling_rate
                .ok_or_else(|| Error::Config("complete needs --sampling-rate".into()))?;
            // separate stream so the mask does not correlate with the noise
            let mask = random_mask(dims, rate, a.seed ^ 0x6d61_736b)?;
            let noisy = add_noise(gt.values(), &noise);
            let filled = noisy
                .iter()
                .zip(&mask)
                .map(|(v, m)| if *m { *v } else { 0.0 })
                .collect();
            let mask_path = sibling(&a.out, ".mask.hsic");
            save_cube(&mask_to_cube(dims, &mask)?, &mask_path)?;
            sidecar.sampling_rate = Some(rate);
            sidecar.mask = Some(relative_to(&mask_path, &sidecar_path));
            HsiCube::observation(dims, filled, RangeTag::Unit01)?
        }
    };
    save_cube(&obs, &a.out)?;
    write_text(&sidecar_path, &(serde_json::to_string_pretty(&sidecar)? + "\n"))
}

// mask path as recorded in the sidecar: bare file name when both share a directory
fn relative_to(target: &Path, sidecar: &Path) -> String {
    let same_dir = target.parent().map(Path::to_path_buf).unwrap_or_default()
        == sidecar.parent().map(Path::to_path_buf).unwrap_or_default();
    match (same_dir, target.file_name()) {
        (true, Some(name)) => name.to_string_lossy().into_owned(),
        _ => std::path::absolute(target)
            .unwrap_or_else(|_| target.to_path_buf())
            .to_string_lossy()
            .into_owned(),
    }
}

pub fn cmd_restore(a: &RestoreArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let sidecar = match &a.obs {
        Some(obs) => {
            let path = a.sidecar.clone().unwrap_or_else(|| obs.with_extension("json"));
            Some((Sidecar::load(&path)?, path))
        }
        None => None,
    };
    let sidecar_task = sidecar.as_ref().map(|(s, _)| s.task);
    let cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cfg = RunConfig::parse(&text, sidecar_task.unwrap_or(Task::Denoise))?;
            if let Some(t) = sidecar_task {
                if t != cfg.task {
                    return Err(Error::Config(format!(
                        "config task {} does not match sidecar task {t}",
                        cfg.task
                    )));
                }
            }
            cfg
        }
        None => RunConfig::defaults(sidecar_task.unwrap_or(Task::Denoise)),
    };
    if a.print_config {
        write!(out, "{}", cfg.to_text()).map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        return Ok(());
    }
    let (sidecar, sidecar_path) = sidecar.expect("clap requires --obs without --print-config");
    let obs_path = a.obs.as_ref().expect("checked above");
    let out_path = a.out.as_ref().expect("clap requires --out without --print-config");

    let base = sidecar_path.parent().unwrap_or(Path::new("."));
    let op = sidecar.operator(base)?;
    let obs = load_cube(obs_path)?;
    let y_unit = match sidecar.task {
        // the stored observation is zero-filled at full size
        Task::Complete => {
            if obs.dims() != op.dims() {
                return Err(Error::DimensionMismatch {
                    context: "completion observation",
                    expected: op.dims().len(),
                    got: obs.dims().len(),
                });
            }
            op.apply(obs.values())?
        }
        _ => {
            if obs.values().len() != op.output_len() {
                return Err(Error::DimensionMismatch {
                    context: "observation",
                    expected: op.output_len(),
                    got: obs.values().len(),
                });
            }
            obs.values().to_vec()
        }
    };
    let y: Vec<f64> = y_unit.iter().map(|v| 2.0 * v - 1.0).collect();
    let sampler = cfg.sampler_config(2.0 * sidecar.sigma)?;

    let mut progress = |r: &StepReport| {
        if !a.quiet {
            let _ = writeln!(
                err,
                "t={} loss={:.6e} elapsed={:.3}",
                r.t,
                r.loss,
                r.elapsed.as_secs_f64()
            );
        }
    };
    let result = if a.ablate_no_diffusion {
        restore_no_diffusion_with_budget(&y, &op, &sampler, cfg.ablation_iters, &mut progress)?
    } else {
        restore(&y, &op, &sampler, &mut progress)?
    };
    let unit: Vec<f64> = result.x0.iter().map(|v| (v + 1.0) / 2.0).collect();
    save_cube(&HsiCube::new(op.dims(), unit, RangeTag::Unit01)?, out_path)
}

/// `MPSNR=<dB|inf> MSSIM=<v>`.
pub fn format_metrics(mpsnr: f64, mssim: f64) -> String {
    let p = if mpsnr.is_infinite() {
        "inf".to_string()
    } else {
        format!("{mpsnr:.6}")
    };
    format!("MPSNR={p} MSSIM={mssim:.6}")
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let reference = load_cube(&a.reference)?;
    let estimate = load_cube(&a.est)?;
    let report = evaluate(&reference, &estimate)?;
    writeln!(out, "{}", format_metrics(report.mpsnr, report.mssim))
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

pub fn cmd_export(a: &ExportArgs) -> Result<()> {
    let cube = load_cube(&a.cube)?;
    export_band_png(&cube, a.band, &a.out)
}

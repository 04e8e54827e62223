use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use qbm_core::bridge::ExternalDenoiser;
use qbm_core::metrics::{psnr, qq_normal, ssim, QqData};
use qbm_core::qbm::{self, calibrate_bypass_step, calibration_noise};
use qbm_core::synthetic::{shapes_image, SyntheticPrior};
use qbm_core::{
    restore, CalibrationOptions, CalibrationReport, DegradationOperator, DenoiserHandle,
    DenoiserSpec, GaussianComponent, GaussianMixturePrior, ImageTensor, NoiseSchedule,
    OracleDenoiser, RestorationConfig, ZeroDenoiser,
};
use serde::{Deserialize, Serialize};

use crate::config::{
    Bypass, CalibrationConfig, ConfigError, Manifest, ManifestEntry, PriorConfig, RunConfig,
};
use crate::io::{read_ntf, read_tensor, write_tensor};

pub const RUN_MANIFEST_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            bail!(ConfigError("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder.build().context("cannot start worker pool")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {what} {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("invalid {what} {}: {e}", path.display())).into())
}

fn schedule_and_operator(cfg: &RunConfig) -> Result<(NoiseSchedule, DegradationOperator)> {
    let schedule = cfg
        .schedule
        .build()
        .map_err(|e| ConfigError(format!("schedule: {e}")))?;
    let op = cfg
        .operator
        .build(cfg.shape)
        .map_err(|e| ConfigError(format!("operator: {e}")))?;
    Ok((schedule, op))
}

fn read_shaped(path: &Path, expected: qbm_core::Shape, role: &str) -> Result<ImageTensor> {
    let x = read_tensor(path)?;
    if x.shape() != expected {
        bail!(ConfigError(format!(
            "{role} {} has shape {}, expected {expected}",
            path.display(),
            x.shape()
        )));
    }
    Ok(x)
}

pub fn build_prior(cfg: &RunConfig) -> Result<GaussianMixturePrior> {
    let spec = cfg
        .prior
        .as_ref()
        .ok_or_else(|| ConfigError("config has no `prior`".into()))?;
    let prior = match spec {
        PriorConfig::Synthetic(p) => {
            if p.shape() != cfg.shape {
                bail!(ConfigError(format!(
                    "synthetic prior shape {} differs from run shape {}",
                    p.shape(),
                    cfg.shape
                )));
            }
            p.build()
        }
        PriorConfig::Gaussian { mean, variance } => {
            GaussianMixturePrior::gaussian(read_shaped(mean, cfg.shape, "prior mean")?, *variance)
        }
        PriorConfig::Mixture { components } => GaussianMixturePrior::new(
            components
                .iter()
                .map(|c| {
                    Ok(GaussianComponent {
                        weight: c.weight,
                        mean: read_shaped(&c.mean, cfg.shape, "prior mean")?,
                        variance: c.variance,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    prior.map_err(|e| ConfigError(format!("prior: {e}")).into())
}

/// Local denoisers are shared; external ones get a connection per image.
enum DenoiserSource {
    Shared(DenoiserHandle),
    Remote(String),
}

impl DenoiserSource {
    fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(match &cfg.denoiser {
            DenoiserSpec::Zero => Self::Shared(DenoiserHandle::Zero(ZeroDenoiser)),
            DenoiserSpec::Oracle => Self::Shared(DenoiserHandle::Oracle(OracleDenoiser::new(
                build_prior(cfg)?,
            ))),
            DenoiserSpec::External { address } => {
                // Fail fast on an unreachable endpoint.
                ExternalDenoiser::connect(address)?;
                Self::Remote(address.clone())
            }
        })
    }

    fn with<T>(&self, f: impl FnOnce(&DenoiserHandle) -> Result<T>) -> Result<T> {
        match self {
            Self::Shared(d) => f(d),
            Self::Remote(address) => f(&DenoiserHandle::External(ExternalDenoiser::connect(
                address,
            )?)),
        }
    }
}

fn options(cal: &CalibrationConfig) -> CalibrationOptions {
    CalibrationOptions {
        k: cal.k,
        alpha: cal.alpha,
        seed: cal.seed,
        pooling: cal.pooling,
        std_reference: cal.std_reference,
    }
}

fn load_pairs(
    manifest: &Manifest,
    cfg: &RunConfig,
    op: &DegradationOperator,
) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    manifest
        .pairs
        .iter()
        .map(|entry| {
            let x0 = read_shaped(&entry.clean, cfg.shape, "clean image")?;
            let y = match &entry.degraded {
                Some(path) => read_shaped(path, op.output_shape(), "measurement")?,
                None => op.apply(&x0)?,
            };
            Ok((x0, y))
        })
        .collect()
}

pub fn calibrate(cfg: &RunConfig, jobs: Option<usize>) -> Result<CalibrationReport> {
    let cal = cfg.calibration()?;
    let (schedule, op) = schedule_and_operator(cfg)?;
    let manifest = Manifest::load(&cal.manifest)?;
    let pairs = load_pairs(&manifest, cfg, &op)?;
    let opts = options(cal);
    let report = pool(jobs)?.install(|| calibrate_bypass_step(&pairs, &schedule, &op, &opts))?;
    write_json(&cal.report, &report)?;

    println!(
        "task {}  n={}  k={}  alpha={}",
        report.task, report.n, report.k, report.alpha
    );
    for s in &report.samples {
        let at = s.boundary.last();
        println!(
            "  sample {:>3}  t={:>4}{}  p={:.3}  std gap={:.2e}  noise draws={}",
            s.index,
            s.t_min,
            if s.flagged { " (never passed)" } else { "" },
            at.map_or(f64::NAN, |d| d.p_value),
            at.map_or(f64::NAN, |d| d.std_gap),
            s.noise_draws,
        );
    }
    println!("t* = {}", report.t_star);
    if report.flagged() > 0 {
        eprintln!(
            "warning: {} of {} samples never passed both criteria",
            report.flagged(),
            report.n
        );
    }
    Ok(report)
}

fn load_report(
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
    op: &DegradationOperator,
) -> Result<CalibrationReport> {
    let cal = cfg.calibration()?;
    if !cal.report.exists() {
        bail!(ConfigError(format!(
            "bypass=auto needs a calibration report at {}; run `qbm calibrate` first",
            cal.report.display()
        )));
    }
    let report: CalibrationReport = read_json(&cal.report, "calibration report")?;
    if report.task != op.spec().task_id() || report.schedule != schedule.id() {
        bail!(ConfigError(format!(
            "calibration report {} is for {} / {}, not {} / {}",
            cal.report.display(),
            report.task,
            report.schedule,
            op.spec().task_id(),
            schedule.id()
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRun {
    pub input: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub denoiser_calls: usize,
    pub seconds: f64,
}

/// Everything needed to repeat a restore run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config: RunConfig,
    pub schedule: String,
    pub task: String,
    pub t_star: Option<usize>,
    /// Ascending steps visited by every image.
    pub grid: Vec<usize>,
    pub images: Vec<ImageRun>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn method(&self) -> String {
        format!("bypass={} eta={}", self.config.bypass, self.config.eta)
    }
}

pub fn run_manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("run.json")
}

pub fn restore_images(cfg: &RunConfig, jobs: Option<usize>) -> Result<RunManifest> {
    use rayon::prelude::*;

    let start = Instant::now();
    let (schedule, op) = schedule_and_operator(cfg)?;
    if cfg.inputs.is_empty() {
        bail!(ConfigError("config lists no `inputs`".into()));
    }
    let t_star = match cfg.bypass {
        Bypass::Auto => Some(load_report(cfg, &schedule, &op)?.t_star),
        _ => None,
    };
    let base = RestorationConfig {
        eta: cfg.eta,
        num_steps: cfg.num_steps,
        bypass_step: match cfg.bypass {
            Bypass::Auto => t_star,
            Bypass::Off => None,
            Bypass::Step(t) => Some(t),
        },
        seed: cfg.seed,
    };
    let grid = base
        .grid(&schedule)
        .map_err(|e| ConfigError(e.to_string()))?;
    let denoiser = DenoiserSource::new(cfg)?;

    let images = pool(jobs)?.install(|| {
        cfg.inputs
            .par_iter()
            .enumerate()
            .map(|(i, input)| {
                let began = Instant::now();
                let y = read_shaped(input, op.output_shape(), "input")?;
                let run_cfg = RestorationConfig {
                    seed: cfg.seed.wrapping_add(i as u64),
                    ..base
                };
                let out = denoiser
                    .with(|d| Ok(restore(&y, &op, d, &schedule, &run_cfg)?))
                    .with_context(|| format!("restoring {}", input.display()))?;
                let name = input.file_name().context("input has no file name")?;
                let output = cfg.output_dir.join(name);
                if output == *input {
                    bail!(ConfigError(format!(
                        "output would overwrite input {}",
                        input.display()
                    )));
                }
                write_tensor(&output, &out.image)?;
                Ok(ImageRun {
                    input: input.clone(),
                    output,
                    seed: run_cfg.seed,
                    denoiser_calls: out.denoiser_calls,
                    seconds: began.elapsed().as_secs_f64(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let manifest = RunManifest {
        version: RUN_MANIFEST_VERSION,
        config: cfg.clone(),
        schedule: schedule.id(),
        task: op.spec().task_id(),
        t_star,
        grid,
        images,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&run_manifest_path(cfg), &manifest)?;
    for img in &manifest.images {
        println!(
            "{} -> {}  ({} denoiser calls, {:.2}s)",
            img.input.display(),
            img.output.display(),
            img.denoiser_calls,
            img.seconds
        );
    }
    if let Some(t) = t_star {
        println!(
            "bypass t* = {t}, start step {}",
            manifest.grid.last().unwrap()
        );
    }
    Ok(manifest)
}

/// PSNR in dB, serialized as the string `"inf"` when the images match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Db(v)),
            Raw::Text(t) if t == "inf" => Ok(Db(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR {t:?}"))),
        }
    }
}

impl std::fmt::Display for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{:.2}", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub restored: PathBuf,
    pub reference: PathBuf,
    pub psnr: Db,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub version: u32,
    pub method: String,
    pub steps: Option<usize>,
    pub images: Vec<ImageScore>,
    pub mean_psnr: Db,
    pub mean_ssim: f64,
}

impl Evaluation {
    /// Table with the columns method, # of steps, PSNR, SSIM.
    pub fn table(&self) -> String {
        let steps = self.steps.map_or("-".to_string(), |s| s.to_string());
        let mut out = format!(
            "{:<28} {:>10} {:>8} {:>8}\n",
            "method", "# of steps", "PSNR", "SSIM"
        );
        for img in &self.images {
            let name = img.restored.file_name().map_or_else(
                || img.restored.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            );
            let _ = writeln!(
                out,
                "{:<28} {:>10} {:>8} {:>8.4}",
                format!("  {name}"),
                steps,
                img.psnr.to_string(),
                img.ssim
            );
        }
        let _ = writeln!(
            out,
            "{:<28} {:>10} {:>8} {:>8.4}",
            self.method,
            steps,
            self.mean_psnr.to_string(),
            self.mean_ssim
        );
        out
    }
}

/// Model space `[-1, 1]` to display space `[0, 1]`.
fn unit_range(x: &ImageTensor) -> ImageTensor {
    x.map(|v| (v + 1.0) / 2.0)
}

pub fn evaluate(
    restored: &[PathBuf],
    reference: &[PathBuf],
    method: &str,
    steps: Option<usize>,
) -> Result<Evaluation> {
    if restored.is_empty() {
        bail!(ConfigError("no restored images given".into()));
    }
    if restored.len() != reference.len() {
        bail!(ConfigError(format!(
            "unpaired files: {} restored vs {} reference images",
            restored.len(),
            reference.len()
        )));
    }
    let mut images = Vec::with_capacity(restored.len());
    for (r, g) in restored.iter().zip(reference) {
        let x = unit_range(&read_tensor(r)?);
        let gt = unit_range(&read_tensor(g)?);
        if x.shape() != gt.shape() {
            bail!(ConfigError(format!(
                "{} is {} but {} is {}",
                r.display(),
                x.shape(),
                g.display(),
                gt.shape()
            )));
        }
        images.push(ImageScore {
            restored: r.clone(),
            reference: g.clone(),
            psnr: Db(psnr(&x, &gt, 1.0)?),
            ssim: ssim(&x, &gt).with_context(|| format!("SSIM of {}", r.display()))?,
        });
    }
    let n = images.len() as f64;
    Ok(Evaluation {
        version: METRICS_VERSION,
        method: method.to_string(),
        steps,
        mean_psnr: Db(images.iter().map(|i| i.psnr.0).sum::<f64>() / n),
        mean_ssim: images.iter().map(|i| i.ssim).sum::<f64>() / n,
        images,
    })
}

pub fn load_run_manifest(path: &Path) -> Result<RunManifest> {
    read_json(path, "run manifest")
}

pub fn write_evaluation(path: &Path, evaluation: &Evaluation) -> Result<()> {
    write_json(path, evaluation)
}

/// Q-Q data of raw tensor values (any rank).
pub fn qq_of_file(path: &Path) -> Result<QqData> {
    let values: Vec<f64> = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
    {
        read_tensor(path)?.into_vec()
    } else {
        read_ntf(path)?.data.into_iter().map(f64::from).collect()
    };
    Ok(qq_normal(&values)?)
}

/// Which step `qq` evaluates a calibration residual at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QqStep {
    Star,
    At(usize),
}

impl std::str::FromStr for QqStep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "star" {
            return Ok(Self::Star);
        }
        s.parse()
            .map(Self::At)
            .map_err(|_| format!("step must be `star` or a number, got {s:?}"))
    }
}

/// Q-Q data of one calibration sample's residual, with the same noise draw
/// the calibration used.
pub fn qq_of_residual(cfg: &RunConfig, sample: usize, step: QqStep) -> Result<(usize, QqData)> {
    let cal = cfg.calibration()?;
    let (schedule, op) = schedule_and_operator(cfg)?;
    let manifest = Manifest::load(&cal.manifest)?;
    let Some(entry) = manifest.pairs.get(sample) else {
        bail!(ConfigError(format!(
            "sample {sample} out of range; manifest has {} pairs",
            manifest.pairs.len()
        )));
    };
    let single = Manifest {
        version: manifest.version,
        pairs: vec![entry.clone()],
    };
    let (x0, y) = load_pairs(&single, cfg, &op)?.remove(0);
    let t = match step {
        QqStep::At(t) => t,
        QqStep::Star => load_report(cfg, &schedule, &op)?.t_star,
    };
    if t == 0 || t > schedule.total_steps() {
        bail!(ConfigError(format!(
            "step {t} outside 1..={}",
            schedule.total_steps()
        )));
    }
    let (eps, _) = calibration_noise(sample, &x0, &options(cal))?;
    let residual = qbm::residual(&schedule, &op, &x0, &y, t, &eps)?;
    Ok((t, qq_normal(residual.as_slice())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    /// Draws from the configured prior (or the default synthetic mixture).
    Mixture,
    /// Piecewise-constant rectangles and discs.
    Shapes,
    /// Images already in the range of the pseudo-inverse (no discrepancy).
    Consistent,
}

/// Writes clean images, their measurements and a calibration manifest.
pub fn synthesize(
    cfg: &RunConfig,
    kind: SynthKind,
    count: usize,
    seed: u64,
    dir: &Path,
    extension: &str,
) -> Result<Manifest> {
    if count == 0 {
        bail!(ConfigError("--count must be at least 1".into()));
    }
    let (_, op) = schedule_and_operator(cfg)?;
    let prior = match &cfg.prior {
        Some(_) => build_prior(cfg)?,
        None => SyntheticPrior {
            height: cfg.shape.height,
            width: cfg.shape.width,
            channels: cfg.shape.channels,
            ..Default::default()
        }
        .build()?,
    };
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = qbm_core::noise::rng(seed, qbm_core::noise::stream::SYNTHETIC | i as u64);
        let x = match kind {
            SynthKind::Mixture => prior.sample(&mut rng),
            SynthKind::Shapes => shapes_image(cfg.shape, seed, i as u64, 6),
            SynthKind::Consistent => op.range_part(&prior.sample(&mut rng))?,
        };
        let clean = dir.join(format!("clean_{i:04}.{extension}"));
        write_tensor(&clean, &x)?;
        // Measure what was actually stored, after format rounding.
        let stored = read_tensor(&clean)?;
        let degraded = dir.join(format!("measured_{i:04}.ntf"));
        write_tensor(&degraded, &op.apply(&stored)?)?;
        pairs.push(ManifestEntry {
            clean: PathBuf::from(clean.file_name().unwrap()),
            degraded: Some(PathBuf::from(degraded.file_name().unwrap())),
        });
    }
    let manifest = Manifest {
        version: crate::config::CONFIG_VERSION,
        pairs,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

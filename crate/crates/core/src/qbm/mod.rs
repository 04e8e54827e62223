//! Quick bypass: start the reverse process from an approximate input built
//! from the measurement, at the smallest step where the injected noise
//! hides the difference between the clean image and `A† y`.
//!
//! Writing `D = x0 - A† y`, the true noisy state decomposes as
//! `x_t = sqrt(ab) A† y + [sqrt(ab) D + sqrt(1 - ab) eps]`. The bracketed
//! residual must look like scheduled noise: it has to pass a normality test
//! and its standard deviation has to match the noise's within `k`.
//! [`calibrate_bypass_step`] finds that step per calibration pair and
//! averages.

mod normality;

pub use normality::{dagostino_k2, NormalityTest, MIN_SAMPLE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{self, stream};
use crate::operators::DegradationOperator;
use crate::schedule::NoiseSchedule;
use crate::tensor::{population_std, ImageTensor};

pub const DEFAULT_STD_THRESHOLD: f64 = 0.001;
pub const DEFAULT_SIGNIFICANCE: f64 = 0.05;
pub const REPORT_VERSION: u32 = 1;

/// Reference noise draws that themselves fail the normality test are
/// replaced, up to this many attempts.
pub const MAX_NOISE_DRAWS: u32 = 64;

/// `sqrt(ab_t) A† y + sqrt(1 - ab_t) eps`.
pub fn approximate_input(
    schedule: &NoiseSchedule,
    op: &DegradationOperator,
    y: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
) -> Result<ImageTensor> {
    schedule.q_sample(&op.pinv_apply(y)?, t, eps)
}

/// `sqrt(ab_t) (x0 - A† y) + sqrt(1 - ab_t) eps`.
pub fn residual(
    schedule: &NoiseSchedule,
    op: &DegradationOperator,
    x0: &ImageTensor,
    y: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
) -> Result<ImageTensor> {
    let discrepancy = x0.try_sub(&op.pinv_apply(y)?)?;
    schedule.q_sample(&discrepancy, t, eps)
}

/// Gap between the residual's standard deviation and the population
/// standard deviation `sqrt(1 - ab_t)` of the scheduled noise.
pub fn std_gap_ok(
    residual: &ImageTensor,
    schedule: &NoiseSchedule,
    t: usize,
    k: f64,
) -> Result<(bool, f64)> {
    schedule.check_step(t)?;
    check_threshold(k)?;
    let gap = (residual.std() - (1.0 - schedule.alpha_bar(t)).sqrt()).abs();
    Ok((gap < k, gap))
}

fn check_threshold(k: f64) -> Result<()> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::invalid(format!(
            "std threshold {k} must be positive"
        )));
    }
    Ok(())
}

/// What the residual's standard deviation is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdReference {
    /// Standard deviation of the actual draw `sqrt(1 - ab_t) eps`.
    #[default]
    SampleNoise,
    /// `sqrt(1 - ab_t)`.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// All pixels and channels form one sample.
    #[default]
    Pooled,
    /// Every channel must pass on its own.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub k: f64,
    pub alpha: f64,
    pub seed: u64,
    pub pooling: Pooling,
    pub std_reference: StdReference,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_STD_THRESHOLD,
            alpha: DEFAULT_SIGNIFICANCE,
            seed: 0,
            pooling: Pooling::default(),
            std_reference: StdReference::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub t: usize,
    pub k2: f64,
    pub p_value: f64,
    pub std_gap: f64,
    pub gaussian: bool,
    pub std_ok: bool,
}

impl StepDiagnostic {
    pub fn passed(&self) -> bool {
        self.gaussian && self.std_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCalibration {
    pub index: usize,
    pub t_min: usize,
    /// No step passed both criteria; `t_min` was set to `T`.
    pub flagged: bool,
    pub noise_draws: u32,
    /// Diagnostics at `t_min - 1` (when it exists) and `t_min`.
    pub boundary: Vec<StepDiagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub version: u32,
    pub task: String,
    pub schedule: String,
    pub k: f64,
    pub alpha: f64,
    pub seed: u64,
    pub pooling: Pooling,
    pub std_reference: StdReference,
    pub n: usize,
    pub samples: Vec<SampleCalibration>,
    pub t_star: usize,
}

impl CalibrationReport {
    pub fn per_sample_steps(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.t_min).collect()
    }

    pub fn flagged(&self) -> usize {
        self.samples.iter().filter(|s| s.flagged).count()
    }
}

/// Evaluates both criteria for the residual at step `t`.
struct Scanner<'a> {
    discrepancy: &'a ImageTensor,
    eps: &'a ImageTensor,
    eps_std: Vec<f64>,
    channels: usize,
    opts: &'a CalibrationOptions,
}

impl Scanner<'_> {
    fn groups(&self, x: &ImageTensor) -> Vec<Vec<f64>> {
        match self.opts.pooling {
            Pooling::Pooled => vec![x.as_slice().to_vec()],
            Pooling::PerChannel => (0..self.channels).map(|c| x.channel(c)).collect(),
        }
    }

    fn check(&self, schedule: &NoiseSchedule, t: usize) -> Result<StepDiagnostic> {
        let ab = schedule.alpha_bar(t);
        let noise_scale = (1.0 - ab).sqrt();
        let resid = self.discrepancy.lincomb(ab.sqrt(), self.eps, noise_scale)?;
        let mut diag = StepDiagnostic {
            t,
            k2: 0.0,
            p_value: 1.0,
            std_gap: 0.0,
            gaussian: true,
            std_ok: true,
        };
        for (group, eps_std) in self.groups(&resid).iter().zip(&self.eps_std) {
            let test = dagostino_k2(group)?;
            let reference = match self.opts.std_reference {
                StdReference::SampleNoise => noise_scale * eps_std,
                StdReference::Population => noise_scale,
            };
            let gap = (population_std(group) - reference).abs();
            // Worst channel wins.
            diag.k2 = diag.k2.max(test.k2);
            diag.p_value = diag.p_value.min(test.p_value);
            diag.std_gap = diag.std_gap.max(gap);
        }
        diag.gaussian = diag.p_value >= self.opts.alpha;
        diag.std_ok = diag.std_gap < self.opts.k;
        Ok(diag)
    }
}

/// Seeded reference noise for one calibration sample, redrawn while the
/// draw itself fails the normality test.
pub fn calibration_noise(
    pair_index: usize,
    like: &ImageTensor,
    opts: &CalibrationOptions,
) -> Result<(ImageTensor, u32)> {
    let mut last = None;
    for attempt in 0..MAX_NOISE_DRAWS {
        let key = stream::CALIBRATION | ((attempt as u64) << 24) | pair_index as u64;
        let eps = noise::standard_normal(opts.seed, key, like.shape());
        let groups = match opts.pooling {
            Pooling::Pooled => vec![eps.as_slice().to_vec()],
            Pooling::PerChannel => (0..like.shape().channels).map(|c| eps.channel(c)).collect(),
        };
        let mut ok = true;
        for g in &groups {
            ok &= dagostino_k2(g)?.p_value >= opts.alpha;
        }
        if ok {
            return Ok((eps, attempt + 1));
        }
        last = Some(eps);
    }
    Ok((last.expect("at least one draw"), MAX_NOISE_DRAWS))
}

/// Smallest step at which one pair's residual passes both criteria.
pub fn calibrate_sample(
    index: usize,
    x0: &ImageTensor,
    y: &ImageTensor,
    schedule: &NoiseSchedule,
    op: &DegradationOperator,
    opts: &CalibrationOptions,
) -> Result<SampleCalibration> {
    let discrepancy = x0.try_sub(&op.pinv_apply(y)?)?;
    let (eps, noise_draws) = calibration_noise(index, x0, opts)?;
    let eps_std = match opts.pooling {
        Pooling::Pooled => vec![eps.std()],
        Pooling::PerChannel => (0..eps.shape().channels)
            .map(|c| population_std(&eps.channel(c)))
            .collect(),
    };
    let scanner = Scanner {
        discrepancy: &discrepancy,
        eps: &eps,
        eps_std,
        channels: x0.shape().channels,
        opts,
    };

    let total = schedule.total_steps();
    let mut previous: Option<StepDiagnostic> = None;
    for t in 1..=total {
        let diag = scanner.check(schedule, t)?;
        if diag.passed() {
            return Ok(SampleCalibration {
                index,
                t_min: t,
                flagged: false,
                noise_draws,
                boundary: previous.into_iter().chain([diag]).collect(),
            });
        }
        previous = Some(diag);
    }
    Ok(SampleCalibration {
        index,
        t_min: total,
        flagged: true,
        noise_draws,
        boundary: previous.into_iter().collect(),
    })
}

/// Averages the per-pair minimal steps over a calibration set of
/// `(x0, y)` pairs.
pub fn calibrate_bypass_step(
    pairs: &[(ImageTensor, ImageTensor)],
    schedule: &NoiseSchedule,
    op: &DegradationOperator,
    opts: &CalibrationOptions,
) -> Result<CalibrationReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    check_threshold(opts.k)?;
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::invalid(format!(
            "significance {} outside (0, 1)",
            opts.alpha
        )));
    }
    let samples = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (x0, y))| calibrate_sample(i, x0, y, schedule, op, opts))
        .collect::<Result<Vec<_>>>()?;

    let mean = samples.iter().map(|s| s.t_min as f64).sum::<f64>() / samples.len() as f64;
    let t_star = (mean.round() as usize).clamp(1, schedule.total_steps());
    Ok(CalibrationReport {
        version: REPORT_VERSION,
        task: op.spec().task_id(),
        schedule: schedule.id(),
        k: opts.k,
        alpha: opts.alpha,
        seed: opts.seed,
        pooling: opts.pooling,
        std_reference: opts.std_reference,
        n: pairs.len(),
        samples,
        t_star,
    })
}

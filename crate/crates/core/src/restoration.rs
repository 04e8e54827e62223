//! Zero-shot restoration by null-space sampling.
//!
//! Each step predicts the clean image from the current state, overwrites
//! its range-space component with `A† y`, and re-noises the result to the
//! next step of a descending uniform grid. With a bypass step set, the
//! loop starts from the approximate input at that step instead of from
//! pure noise.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::noise::{self, stream};
use crate::operators::DegradationOperator;
use crate::qbm::approximate_input;
use crate::schedule::{truncate_grid, NoiseSchedule};
use crate::tensor::ImageTensor;

/// Mixing weight used by the plain null-space baseline.
pub const BASELINE_ETA: f64 = 0.85;
/// Pure random-noise reverse step.
pub const RANDOM_NOISE_ETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestorationConfig {
    pub eta: f64,
    pub num_steps: usize,
    /// Start step; mapped to the nearest grid step.
    pub bypass_step: Option<usize>,
    pub seed: u64,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            eta: BASELINE_ETA,
            num_steps: 100,
            bypass_step: None,
            seed: 0,
        }
    }
}

impl RestorationConfig {
    /// Ascending grid of the steps that will actually be visited.
    pub fn grid(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
        let grid = schedule.uniform_grid(self.num_steps)?;
        Ok(match self.bypass_step {
            Some(t) => {
                if t == 0 || t > schedule.total_steps() {
                    return Err(Error::StepOutOfRange {
                        step: t,
                        total: schedule.total_steps(),
                    });
                }
                truncate_grid(&grid, t)
            }
            None => grid,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Restoration {
    pub image: ImageTensor,
    /// Ascending steps visited; one denoiser call each.
    pub grid: Vec<usize>,
    pub denoiser_calls: usize,
}

/// `A† y + (I - A† A) x0_pred`.
pub fn ddnm_project(
    op: &DegradationOperator,
    x0_pred: &ImageTensor,
    y: &ImageTensor,
) -> Result<ImageTensor> {
    let range = op.pinv_apply(y)?;
    let null = op.null_part(x0_pred)?;
    range.try_add(&null)
}

/// Initial state: the approximate input at the start step when bypassing,
/// otherwise pure noise.
pub fn initial_state(
    y: &ImageTensor,
    op: &DegradationOperator,
    schedule: &NoiseSchedule,
    cfg: &RestorationConfig,
    start: usize,
) -> Result<ImageTensor> {
    let eps = noise::standard_normal(cfg.seed, stream::INITIAL, op.input_shape());
    match cfg.bypass_step {
        Some(_) => approximate_input(schedule, op, y, start, &eps),
        None => Ok(eps),
    }
}

/// Fresh noise for the reverse step that lands on `t_next`.
pub fn step_noise(op: &DegradationOperator, seed: u64, t_next: usize) -> ImageTensor {
    noise::standard_normal(seed, stream::REVERSE | t_next as u64, op.input_shape())
}

pub fn restore(
    y: &ImageTensor,
    op: &DegradationOperator,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RestorationConfig,
) -> Result<Restoration> {
    y.ensure_shape(op.output_shape())?;
    if !(0.0..=1.0).contains(&cfg.eta) {
        return Err(Error::invalid(format!("eta {} outside [0, 1]", cfg.eta)));
    }
    let grid = cfg.grid(schedule)?;
    let start = *grid.last().expect("grid is never empty");
    let range = op.pinv_apply(y)?;

    let mut x = initial_state(y, op, schedule, cfg, start)?;
    let mut calls = 0;
    let mut estimate = None;
    for (i, &t) in grid.iter().enumerate().rev() {
        let eps = denoiser.epsilon(&x, t, schedule)?;
        calls += 1;
        eps.ensure_shape(x.shape())?;
        let x0 = schedule.predict_x0(&x, t, &eps)?;
        let x0_hat = range.try_add(&op.null_part(&x0)?)?;
        check_finite(&x0_hat, t)?;

        let t_next = if i == 0 { 0 } else { grid[i - 1] };
        if t_next == 0 {
            estimate = Some(x0_hat);
            break;
        }
        let fresh = step_noise(op, cfg.seed, t_next);
        x = schedule.reverse_step(&x0_hat, t_next, &eps, &fresh, cfg.eta)?;
        check_finite(&x, t_next)?;
    }

    Ok(Restoration {
        image: estimate.expect("grid ends at a positive step"),
        grid,
        denoiser_calls: calls,
    })
}

fn check_finite(x: &ImageTensor, step: usize) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            step,
            stats: x.stats(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianMixturePrior, OracleDenoiser, ZeroDenoiser};
    use crate::schedule::ScheduleConfig;
    use crate::tensor::Shape;

    const SHAPE: Shape = Shape::new(8, 8, 3);

    fn schedule() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    fn image(seed: u64) -> ImageTensor {
        noise::standard_normal(seed, 7, SHAPE).scale(0.3)
    }

    #[test]
    fn projection_keeps_consistent_points() {
        let op = DegradationOperator::sr(2, SHAPE).unwrap();
        let x = image(1);
        let y = op.apply(&x).unwrap();
        let out = ddnm_project(&op, &x, &y).unwrap();
        assert!(out.try_sub(&x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn projection_with_identity_returns_measurement() {
        let op = DegradationOperator::identity(SHAPE).unwrap();
        let y = image(2);
        assert_eq!(ddnm_project(&op, &image(3), &y).unwrap(), y);
    }

    #[test]
    fn projection_is_data_consistent() {
        let op = DegradationOperator::cs(0.5, 4, SHAPE).unwrap();
        let y = op.apply(&image(5)).unwrap();
        let out = ddnm_project(&op, &image(6), &y).unwrap();
        let resid = op.apply(&out).unwrap().try_sub(&y).unwrap();
        assert!(resid.norm() / y.norm() < 1e-5);
    }

    #[test]
    fn identity_operator_restores_measurement() {
        let op = DegradationOperator::identity(SHAPE).unwrap();
        let y = image(8);
        for eta in [0.0, 0.85, 1.0] {
            let cfg = RestorationConfig {
                eta,
                num_steps: 10,
                ..Default::default()
            };
            let out = restore(&y, &op, &ZeroDenoiser, &schedule(), &cfg).unwrap();
            assert_eq!(out.image, y);
            assert_eq!(out.denoiser_calls, 10);
        }
    }

    #[test]
    fn bypass_truncates_grid_and_counts_calls() {
        let op = DegradationOperator::sr(2, SHAPE).unwrap();
        let y = op.apply(&image(9)).unwrap();
        let cfg = RestorationConfig {
            eta: 1.0,
            num_steps: 100,
            bypass_step: Some(325),
            seed: 3,
        };
        let out = restore(&y, &op, &ZeroDenoiser, &schedule(), &cfg).unwrap();
        assert_eq!(out.grid.len(), 33);
        assert_eq!(*out.grid.last().unwrap(), 321);
        assert_eq!(out.denoiser_calls, 33);
    }

    #[test]
    fn rejects_bad_config() {
        let op = DegradationOperator::sr(2, SHAPE).unwrap();
        let y = op.apply(&image(9)).unwrap();
        let s = schedule();
        let bad_eta = RestorationConfig {
            eta: 1.5,
            ..Default::default()
        };
        assert!(restore(&y, &op, &ZeroDenoiser, &s, &bad_eta).is_err());
        let bad_bypass = RestorationConfig {
            bypass_step: Some(0),
            ..Default::default()
        };
        assert!(restore(&y, &op, &ZeroDenoiser, &s, &bad_bypass).is_err());
        assert!(restore(
            &image(1),
            &op,
            &ZeroDenoiser,
            &s,
            &RestorationConfig::default()
        )
        .is_err());
    }

    #[test]
    fn seed_reproducibility() {
        let op = DegradationOperator::sr(2, SHAPE).unwrap();
        let y = op.apply(&image(10)).unwrap();
        let prior = GaussianMixturePrior::gaussian(ImageTensor::zeros(SHAPE), 0.1).unwrap();
        let oracle = OracleDenoiser::new(prior);
        let cfg = RestorationConfig {
            eta: 0.85,
            num_steps: 20,
            bypass_step: None,
            seed: 11,
        };
        let a = restore(&y, &op, &oracle, &schedule(), &cfg).unwrap();
        let b = restore(&y, &op, &oracle, &schedule(), &cfg).unwrap();
        assert_eq!(a.image, b.image);
        let c = restore(
            &y,
            &op,
            &oracle,
            &schedule(),
            &RestorationConfig { seed: 12, ..cfg },
        )
        .unwrap();
        assert_ne!(a.image, c.image);
    }

    struct Exploding;

    impl Denoiser for Exploding {
        fn epsilon(&self, x: &ImageTensor, _: usize, _: &NoiseSchedule) -> Result<ImageTensor> {
            Ok(ImageTensor::filled(x.shape(), f64::NAN))
        }
    }

    #[test]
    fn non_finite_state_aborts_with_step() {
        let op = DegradationOperator::sr(2, SHAPE).unwrap();
        let y = op.apply(&image(10)).unwrap();
        let cfg = RestorationConfig {
            num_steps: 10,
            ..Default::default()
        };
        match restore(&y, &op, &Exploding, &schedule(), &cfg) {
            Err(Error::NonFinite { step, stats }) => {
                assert_eq!(step, 901);
                assert!(stats.contains("non_finite=192"));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}

//! Variance schedule and the three per-step diffusion updates: forward
//! noising, clean-image prediction from a noise estimate, and the
//! eta-weighted reverse step.
//!
//! Steps are 1-based (`1..=T`). Step 0 is the clean image, with
//! `alpha_bar(0) == 1`, so a reverse step that lands on 0 returns the
//! clean estimate unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const DEFAULT_TOTAL_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Serializable description of a linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: DEFAULT_TOTAL_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.total_steps, self.beta_start, self.beta_end)
    }

    pub fn id(&self) -> String {
        format!(
            "T{}-{:e}-{:e}",
            self.total_steps, self.beta_start, self.beta_end
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    // Index i holds the value for step i + 1.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas form an arithmetic progression from `beta_start` to `beta_end`
    /// inclusive.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta = if total_steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            let last = (total_steps - 1) as f64;
            (0..total_steps)
                .map(|i| beta_start + span * i as f64 / last)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.beta.len()
    }

    /// `T{total}-{first beta}-{last beta}`; matches [`ScheduleConfig::id`].
    pub fn id(&self) -> String {
        format!(
            "T{}-{:e}-{:e}",
            self.total_steps(),
            self.beta[0],
            self.beta[self.beta.len() - 1]
        )
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas up to `t`; 1 at `t == 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                total: self.total_steps(),
            });
        }
        Ok(())
    }

    /// `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
    pub fn q_sample(&self, x0: &ImageTensor, t: usize, eps: &ImageTensor) -> Result<ImageTensor> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Inverts `q_sample` given a noise estimate.
    pub fn predict_x0(
        &self,
        x_t: &ImageTensor,
        t: usize,
        eps_theta: &ImageTensor,
    ) -> Result<ImageTensor> {
        self.check_step(t)?;
        eps_theta.ensure_shape(x_t.shape())?;
        let ab = self.alpha_bar(t);
        let noise_scale = (1.0 - ab).sqrt();
        let signal_scale = ab.sqrt();
        let data = x_t
            .as_slice()
            .iter()
            .zip(eps_theta.as_slice())
            .map(|(&x, &e)| (x - noise_scale * e) / signal_scale)
            .collect();
        ImageTensor::from_vec(x_t.shape(), data)
    }

    /// Moves a clean estimate to step `t_next`, re-noising with
    /// `eta * eps_random + sqrt(1 - eta^2) * eps_theta`.
    ///
    /// The destination step's `alpha_bar` sets the noise level. With
    /// `t_next == 0` the clean estimate is returned as is.
    pub fn reverse_step(
        &self,
        x0_hat: &ImageTensor,
        t_next: usize,
        eps_theta: &ImageTensor,
        eps_random: &ImageTensor,
        eta: f64,
    ) -> Result<ImageTensor> {
        check_eta(eta)?;
        if t_next > self.total_steps() {
            return Err(Error::StepOutOfRange {
                step: t_next,
                total: self.total_steps(),
            });
        }
        eps_theta.ensure_shape(x0_hat.shape())?;
        eps_random.ensure_shape(x0_hat.shape())?;
        if t_next == 0 {
            return Ok(x0_hat.clone());
        }
        let noise = mix_noise(eps_random, eps_theta, eta)?;
        let ab = self.alpha_bar(t_next);
        x0_hat.lincomb(ab.sqrt(), &noise, (1.0 - ab).sqrt())
    }

    /// Uniform DDIM-style subsequence `1, 1 + s, 1 + 2s, ...` of `num_steps`
    /// entries with stride `s = T / num_steps`, ascending.
    pub fn uniform_grid(&self, num_steps: usize) -> Result<Vec<usize>> {
        let total = self.total_steps();
        if num_steps == 0 || num_steps > total {
            return Err(Error::invalid(format!(
                "step count {num_steps} must be in 1..={total}"
            )));
        }
        let stride = total / num_steps;
        Ok((0..num_steps).map(|i| 1 + i * stride).collect())
    }
}

/// Keeps the grid entries up to the entry nearest `bypass` (ties go to the
/// later entry).
pub fn truncate_grid(grid: &[usize], bypass: usize) -> Vec<usize> {
    let Some(nearest) = grid
        .iter()
        .copied()
        .min_by_key(|&g| (g.abs_diff(bypass), std::cmp::Reverse(g)))
    else {
        return Vec::new();
    };
    grid.iter().copied().filter(|&g| g <= nearest).collect()
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
    }
    Ok(())
}

/// `eta * eps_random + sqrt(1 - eta^2) * eps_theta`.
pub fn mix_noise(
    eps_random: &ImageTensor,
    eps_theta: &ImageTensor,
    eta: f64,
) -> Result<ImageTensor> {
    check_eta(eta)?;
    eps_theta.ensure_shape(eps_random.shape())?;
    if eta == 1.0 {
        // Never read eps_theta, so even non-finite values cannot leak in.
        return Ok(eps_random.clone());
    }
    eps_random.lincomb(eta, eps_theta, (1.0 - eta * eta).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    const SHAPE: Shape = Shape::new(3, 4, 2);

    fn tensor(values: &[f64]) -> ImageTensor {
        ImageTensor::from_vec(SHAPE, values.to_vec()).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_matches_reference_product() {
        // Independent 50-digit product over the same progression.
        let reference = 4.035_829_765_375_683_3e-5;
        let s = ScheduleConfig::default().build().unwrap();
        let got = s.alpha_bar(1000);
        assert!(((got - reference) / reference).abs() < 1e-10, "{got}");
    }

    #[test]
    fn schedule_invariants() {
        let s = ScheduleConfig::default().build().unwrap();
        for t in 1..=s.total_steps() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t >= 2 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                let rel = (s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() / s.alpha_bar(t);
                assert!(rel < 1e-12);
            }
        }
        assert!(s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    fn schedule_with_alpha_bar(ab: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![1.0 - ab]).unwrap()
    }

    #[test]
    fn q_sample_hand_value() {
        let s = schedule_with_alpha_bar(0.64);
        let x0 = ImageTensor::filled(SHAPE, 0.5);
        let eps = ImageTensor::filled(SHAPE, 1.0);
        let xt = s.q_sample(&x0, 1, &eps).unwrap();
        assert!(xt.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn q_sample_zero_noise_and_zero_signal() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = ImageTensor::from_fn(SHAPE, |h, w, c| (h + w + c) as f64 * 0.1);
        let zero = ImageTensor::zeros(SHAPE);
        let t = 300;
        assert_eq!(
            s.q_sample(&x0, t, &zero).unwrap(),
            x0.scale(s.alpha_bar(t).sqrt())
        );
        assert_eq!(
            s.q_sample(&zero, t, &x0).unwrap(),
            x0.scale((1.0 - s.alpha_bar(t)).sqrt())
        );
    }

    #[test]
    fn step_range_is_checked() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x = ImageTensor::zeros(SHAPE);
        assert!(matches!(
            s.q_sample(&x, 0, &x),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            s.predict_x0(&x, 11, &x),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(s.reverse_step(&x, 11, &x, &x, 0.5).is_err());
        let other = ImageTensor::zeros(Shape::new(1, 1, 1));
        assert!(matches!(
            s.q_sample(&x, 1, &other),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn predict_x0_hand_value() {
        let s = schedule_with_alpha_bar(0.25);
        let xt = ImageTensor::filled(SHAPE, 1.0);
        let eps = ImageTensor::filled(SHAPE, 0.5);
        let expected = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        let got = s.predict_x0(&xt, 1, &eps).unwrap();
        assert!(got.as_slice().iter().all(|v| (v - expected).abs() < 1e-14));
        let zero = ImageTensor::zeros(SHAPE);
        let got = s.predict_x0(&xt, 1, &zero).unwrap();
        assert!(got.as_slice().iter().all(|v| (v - 2.0).abs() < 1e-14));
    }

    #[test]
    fn reverse_step_eta_zero_and_one() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = tensor(&(0..24).map(|i| i as f64 / 24.0).collect::<Vec<_>>());
        let e_theta = tensor(&(0..24).map(|i| (i as f64).sin()).collect::<Vec<_>>());
        let e_other = tensor(&(0..24).map(|i| (i as f64).cos() * 3.0).collect::<Vec<_>>());
        let e_rand = tensor(&(0..24).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>());
        let t = 500;
        let ab = s.alpha_bar(t);

        let det = s.reverse_step(&x0, t, &e_theta, &e_rand, 0.0).unwrap();
        let expected = x0.lincomb(ab.sqrt(), &e_theta, (1.0 - ab).sqrt()).unwrap();
        assert_eq!(det, expected);
        assert_eq!(det, s.reverse_step(&x0, t, &e_theta, &e_rand, 0.0).unwrap());

        let a = s.reverse_step(&x0, t, &e_theta, &e_rand, 1.0).unwrap();
        let b = s.reverse_step(&x0, t, &e_other, &e_rand, 1.0).unwrap();
        assert_eq!(a, b);

        assert!(s.reverse_step(&x0, t, &e_theta, &e_rand, 1.2).is_err());
        assert!(s.reverse_step(&x0, t, &e_theta, &e_rand, -0.1).is_err());
    }

    #[test]
    fn reverse_step_to_zero_returns_estimate() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = tensor(&(0..24).map(|i| i as f64).collect::<Vec<_>>());
        let e = ImageTensor::filled(SHAPE, 7.0);
        assert_eq!(s.reverse_step(&x0, 0, &e, &e, 0.85).unwrap(), x0);
    }

    #[test]
    fn uniform_grid_and_truncation() {
        let s = ScheduleConfig::default().build().unwrap();
        let grid = s.uniform_grid(100).unwrap();
        assert_eq!(grid.len(), 100);
        assert_eq!(grid[0], 1);
        assert_eq!(grid[1], 11);
        assert_eq!(grid[99], 991);
        assert_eq!(
            s.uniform_grid(10).unwrap(),
            (0..10).map(|i| 1 + 100 * i).collect::<Vec<_>>()
        );
        assert!(s.uniform_grid(0).is_err());
        assert!(s.uniform_grid(1001).is_err());

        assert_eq!(truncate_grid(&grid, 1), vec![1]);
        assert_eq!(truncate_grid(&grid, 325).len(), 33);
        assert_eq!(truncate_grid(&grid, 326).len(), 34);
        // 326 is equidistant from 321 and 331: tie goes to the later step.
        assert_eq!(*truncate_grid(&grid, 326).last().unwrap(), 331);
        assert_eq!(truncate_grid(&grid, 5000).len(), 100);
    }

    proptest! {
        #[test]
        fn predict_inverts_q_sample(
            values in prop::collection::vec(-1.0f64..1.0, 24),
            noise in prop::collection::vec(-3.0f64..3.0, 24),
            t in 1usize..=1000,
        ) {
            let s = ScheduleConfig::default().build().unwrap();
            let x0 = tensor(&values);
            let eps = tensor(&noise);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let back = s.predict_x0(&xt, t, &eps).unwrap();
            prop_assert!(back.lincomb(1.0, &x0, -1.0).unwrap().max_abs() < 1e-6);
        }
    }

    #[test]
    fn ids_agree() {
        let cfg = ScheduleConfig::default();
        assert_eq!(cfg.id(), cfg.build().unwrap().id());
        assert_eq!(cfg.id(), "T1000-1e-4-2e-2");
    }
}

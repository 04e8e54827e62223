//! Noise predictors `eps(x_t, t)`.
//!
//! Besides the external bridge, two closed-form predictors are provided:
//! the exact Bayes denoisers for an isotropic Gaussian prior and for a
//! mixture of isotropic Gaussians. They make the whole restoration pipeline
//! checkable without a trained network.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::ExternalDenoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, Shape};

pub trait Denoiser: Send + Sync {
    fn epsilon(&self, x_t: &ImageTensor, t: usize, schedule: &NoiseSchedule)
        -> Result<ImageTensor>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn epsilon(
        &self,
        x_t: &ImageTensor,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ImageTensor> {
        (**self).epsilon(x_t, t, schedule)
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn epsilon(
        &self,
        x_t: &ImageTensor,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ImageTensor> {
        schedule.check_step(t)?;
        Ok(ImageTensor::zeros(x_t.shape()))
    }
}

/// One isotropic Gaussian `N(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: ImageTensor,
    pub variance: f64,
}

impl GaussianComponent {
    /// `E[x0 | x_t]` under this component alone.
    fn posterior_mean(&self, x_t: &ImageTensor, ab: f64) -> ImageTensor {
        let denom = ab * self.variance + 1.0 - ab;
        let a = ab.sqrt() * self.variance / denom;
        let b = (1.0 - ab) / denom;
        x_t.lincomb(a, &self.mean, b).expect("validated shapes")
    }

    /// Log density of `x_t` under this component, up to the shared
    /// `-d/2 log(2 pi)` term.
    fn log_marginal(&self, x_t: &ImageTensor, ab: f64) -> f64 {
        let var = ab * self.variance + 1.0 - ab;
        let scale = ab.sqrt();
        let sq: f64 = x_t
            .as_slice()
            .iter()
            .zip(self.mean.as_slice())
            .map(|(x, m)| (x - scale * m).powi(2))
            .sum();
        -0.5 * x_t.len() as f64 * var.ln() - sq / (2.0 * var)
    }
}

/// Mixture of isotropic Gaussians; a single component is the plain
/// Gaussian prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior {
    components: Vec<GaussianComponent>,
}

impl GaussianMixturePrior {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::invalid("mixture needs at least one component"));
        };
        let shape = first.mean.shape();
        for c in &components {
            c.mean.ensure_shape(shape)?;
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(format!(
                    "mixture weight {} must be positive",
                    c.weight
                )));
            }
            if !(c.variance >= 0.0 && c.variance.is_finite()) {
                return Err(Error::invalid(format!(
                    "variance {} must be non-negative",
                    c.variance
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        let components = components
            .into_iter()
            .map(|c| GaussianComponent {
                weight: c.weight / total,
                ..c
            })
            .collect();
        Ok(Self { components })
    }

    pub fn gaussian(mean: ImageTensor, variance: f64) -> Result<Self> {
        Self::new(vec![GaussianComponent {
            weight: 1.0,
            mean,
            variance,
        }])
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn shape(&self) -> Shape {
        self.components[0].mean.shape()
    }

    /// `sum_i pi_i mu_i`.
    pub fn mean(&self) -> ImageTensor {
        let mut acc = ImageTensor::zeros(self.shape());
        for c in &self.components {
            acc = acc
                .lincomb(1.0, &c.mean, c.weight)
                .expect("validated shapes");
        }
        acc
    }

    /// Posterior responsibilities of each component given `x_t`.
    pub fn responsibilities(&self, x_t: &ImageTensor, ab: f64) -> Vec<f64> {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_marginal(x_t, ab))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Exact `E[x0 | x_t]` at noise level `ab = alpha_bar(t)`.
    pub fn posterior_mean_at(&self, x_t: &ImageTensor, ab: f64) -> Result<ImageTensor> {
        x_t.ensure_shape(self.shape())?;
        if self.components.len() == 1 {
            return Ok(self.components[0].posterior_mean(x_t, ab));
        }
        let weights = self.responsibilities(x_t, ab);
        let mut acc = ImageTensor::zeros(x_t.shape());
        for (c, w) in self.components.iter().zip(weights) {
            if w > 0.0 {
                acc = acc.lincomb(1.0, &c.posterior_mean(x_t, ab), w)?;
            }
        }
        Ok(acc)
    }

    pub fn posterior_mean(
        &self,
        x_t: &ImageTensor,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ImageTensor> {
        schedule.check_step(t)?;
        self.posterior_mean_at(x_t, schedule.alpha_bar(t))
    }

    /// Draws one image from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ImageTensor {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let sd = chosen.variance.sqrt();
        let data = chosen
            .mean
            .as_slice()
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                m + sd * z
            })
            .collect();
        ImageTensor::from_vec(chosen.mean.shape(), data).expect("shape preserved")
    }
}

/// Converts a posterior mean into the matching noise estimate.
fn eps_from_mean(x_t: &ImageTensor, mean: &ImageTensor, ab: f64) -> Result<ImageTensor> {
    x_t.lincomb(
        1.0 / (1.0 - ab).sqrt(),
        mean,
        -(ab.sqrt()) / (1.0 - ab).sqrt(),
    )
}

/// Exact Bayes noise predictor for a [`GaussianMixturePrior`].
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    prior: GaussianMixturePrior,
}

impl OracleDenoiser {
    pub fn new(prior: GaussianMixturePrior) -> Self {
        Self { prior }
    }

    pub fn prior(&self) -> &GaussianMixturePrior {
        &self.prior
    }
}

impl Denoiser for OracleDenoiser {
    fn epsilon(
        &self,
        x_t: &ImageTensor,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ImageTensor> {
        let mean = self.prior.posterior_mean(x_t, t, schedule)?;
        let eps = eps_from_mean(x_t, &mean, schedule.alpha_bar(t))?;
        if !eps.is_finite() {
            return Err(Error::Denoiser(format!("oracle produced {}", eps.stats())));
        }
        Ok(eps)
    }
}

/// Serializable denoiser selection. Oracle priors are referenced by name
/// and resolved by the caller.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    Zero,
    #[default]
    Oracle,
    External {
        address: String,
    },
}

/// Flag syntax: `zero`, `oracle` or `external:<addr>`.
impl std::str::FromStr for DenoiserSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "oracle" => Ok(Self::Oracle),
            _ => match s.strip_prefix("external:") {
                Some(address) if !address.is_empty() => Ok(Self::External {
                    address: address.to_string(),
                }),
                _ => Err(Error::invalid(format!(
                    "denoiser must be zero, oracle or external:<addr>, got {s:?}"
                ))),
            },
        }
    }
}

impl std::fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Zero => f.write_str("zero"),
            Self::Oracle => f.write_str("oracle"),
            Self::External { address } => write!(f, "external:{address}"),
        }
    }
}

/// Any of the supported noise predictors behind one type.
#[derive(Debug)]
pub enum DenoiserHandle {
    Zero(ZeroDenoiser),
    Oracle(OracleDenoiser),
    External(ExternalDenoiser),
}

impl Denoiser for DenoiserHandle {
    fn epsilon(
        &self,
        x_t: &ImageTensor,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ImageTensor> {
        let eps = match self {
            DenoiserHandle::Zero(d) => d.epsilon(x_t, t, schedule),
            DenoiserHandle::Oracle(d) => d.epsilon(x_t, t, schedule),
            DenoiserHandle::External(d) => d.epsilon(x_t, t, schedule),
        }?;
        eps.ensure_shape(x_t.shape())?;
        Ok(eps)
    }
}

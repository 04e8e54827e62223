//! D'Agostino-Pearson omnibus normality test.
//!
//! Skewness is transformed with D'Agostino's (1970) approximation and
//! kurtosis with Anscombe and Glynn's (1983); the squared z-scores sum to a
//! statistic that is chi-squared with two degrees of freedom under
//! normality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest sample for which both component tests are defined.
pub const MIN_SAMPLE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityTest {
    pub k2: f64,
    pub p_value: f64,
    pub skew_z: f64,
    pub kurt_z: f64,
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    n: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

fn central_moments(sample: &[f64]) -> Moments {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in sample {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    Moments {
        n,
        m2: m2 / n,
        m3: m3 / n,
        m4: m4 / n,
    }
}

fn skew_z(m: &Moments) -> f64 {
    let n = m.n;
    let b1 = m.m3 / m.m2.powf(1.5);
    let y = b1 * ((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0))).sqrt();
    let beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0)
        / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    delta * (y / alpha).asinh()
}

fn kurt_z(m: &Moments) -> f64 {
    let n = m.n;
    let b2 = m.m4 / (m.m2 * m.m2);
    let mean = 3.0 * (n - 1.0) / (n + 1.0);
    let var = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) * (n + 1.0) * (n + 3.0) * (n + 5.0));
    let x = (b2 - mean) / var.sqrt();
    let sqrt_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
        * (6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))).sqrt();
    let a = 6.0
        + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + (1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + x * (2.0 / (a - 4.0)).sqrt();
    let term2 = ((1.0 - 2.0 / a) / denom).cbrt();
    (term1 - term2) / (2.0 / (9.0 * a)).sqrt()
}

pub fn dagostino_k2(sample: &[f64]) -> Result<NormalityTest> {
    if sample.len() < MIN_SAMPLE {
        return Err(Error::SampleTooSmall {
            given: sample.len(),
            needed: MIN_SAMPLE,
        });
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("sample contains non-finite values"));
    }
    let m = central_moments(sample);
    let scale = sample.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m.m2 <= (f64::EPSILON * scale).powi(2) {
        return Err(Error::ZeroVariance);
    }
    let skew_z = skew_z(&m);
    let kurt_z = kurt_z(&m);
    let k2 = skew_z * skew_z + kurt_z * kurt_z;
    Ok(NormalityTest {
        k2,
        p_value: (-k2 / 2.0).exp(),
        skew_z,
        kurt_z,
    })
}

//! Image quality metrics and normal Q-Q data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub fn mse(x: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    x.ensure_shape(reference.shape())?;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sum / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(x: &ImageTensor, reference: &ImageTensor, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::invalid(format!("peak {peak} must be positive")));
    }
    let mse = mse(x, reference)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, tap) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *tap = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian filter, keeping only windows fully inside the plane.
fn filter_valid(plane: &[f64], height: usize, width: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (height - k + 1, width - k + 1);
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * width + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], height: usize, width: usize, taps: &[f64]) -> f64 {
    let products =
        |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&u, &v)| f(u, v)).collect() };
    let mu_a = filter_valid(a, height, width, taps);
    let mu_b = filter_valid(b, height, width, taps);
    let aa = filter_valid(&products(|u, _| u * u), height, width, taps);
    let bb = filter_valid(&products(|_, v| v * v), height, width, taps);
    let ab = filter_valid(&products(|u, v| u * v), height, width, taps);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = aa[i] - ma * ma;
        let var_b = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean structural similarity for images in `[0, 1]`, using an 11x11
/// Gaussian window with sigma 1.5, computed per channel and averaged.
pub fn ssim(x: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    x.ensure_shape(reference.shape())?;
    let s = x.shape();
    if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {s} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = ssim_taps();
    let total: f64 = (0..s.channels)
        .map(|c| {
            ssim_plane(
                &x.channel(c),
                &reference.channel(c),
                s.height,
                s.width,
                &taps,
            )
        })
        .sum();
    Ok(total / s.channels as f64)
}

/// Inverse standard normal CDF (Wichura's AS 241, PPND16), accurate to
/// about 1e-16 relative.
#[allow(clippy::excessive_precision)]
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                + 67265.770927008700853)
                * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                + 39307.89580009271061)
                * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqData {
    /// Sorted sample after removing the fitted Q-Q line's location and scale.
    pub sample: Vec<f64>,
    /// `Phi^-1((i - 0.5) / n)`, strictly increasing.
    pub theoretical: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub intercept: f64,
    pub slope: f64,
}

impl QqData {
    /// Largest absolute distance from the diagonal.
    pub fn max_deviation(&self) -> f64 {
        self.sample
            .iter()
            .zip(&self.theoretical)
            .map(|(s, t)| (s - t).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("theoretical,sample\n");
        for (t, s) in self.theoretical.iter().zip(&self.sample) {
            out.push_str(&format!("{t:.17e},{s:.17e}\n"));
        }
        out
    }
}

/// Normal Q-Q data. The sorted sample is standardized by the least-squares
/// line through `(theoretical, sorted)`, so a sample that already equals
/// the theoretical quantiles maps onto itself.
pub fn qq_normal(sample: &[f64]) -> Result<QqData> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::SampleTooSmall {
            given: n,
            needed: 2,
        });
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let theoretical: Vec<f64> = (1..=n)
        .map(|i| inverse_normal_cdf((i as f64 - 0.5) / n as f64))
        .collect();

    let nf = n as f64;
    let mean = sorted.iter().sum::<f64>() / nf;
    let std = crate::tensor::population_std(&sorted);
    if std.is_nan() || std <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let q_mean = theoretical.iter().sum::<f64>() / nf;
    let (mut cov, mut var) = (0.0, 0.0);
    for (x, q) in sorted.iter().zip(&theoretical) {
        cov += (x - mean) * (q - q_mean);
        var += (q - q_mean) * (q - q_mean);
    }
    let slope = cov / var;
    let intercept = mean - slope * q_mean;
    let standardized = sorted.iter().map(|x| (x - intercept) / slope).collect();
    Ok(QqData {
        sample: standardized,
        theoretical,
        mean,
        std,
        intercept,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn psnr_closed_forms() {
        let shape = Shape::new(4, 4, 3);
        let a = ImageTensor::filled(shape, 10.0);
        let b = ImageTensor::filled(shape, 11.0);
        let v = psnr(&a, &b, 255.0).unwrap();
        assert!((v - 48.1308).abs() < 1e-3, "{v}");
        assert!((v - 20.0 * 255f64.log10()).abs() < 1e-12);

        let c = ImageTensor::filled(shape, 0.25);
        let d = ImageTensor::filled(shape, 0.75);
        assert!((psnr(&c, &d, 1.0).unwrap() - 6.0206).abs() < 1e-3);
        assert_eq!(psnr(&c, &c, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&c, &d, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_errors() {
        let shape = Shape::new(16, 16, 3);
        let x = ImageTensor::from_fn(shape, |h, w, c| ((h * 7 + w * 3 + c) % 11) as f64 / 10.0);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let small = ImageTensor::zeros(Shape::new(10, 16, 1));
        assert!(ssim(&small, &small).is_err());
        let shifted = x.map(|v| (v + 0.5).min(1.0));
        assert!(ssim(&shifted, &x).unwrap() < 1.0);
    }

    #[test]
    fn inverse_cdf_table_values() {
        assert_eq!(inverse_normal_cdf(0.5), 0.0);
        assert!((inverse_normal_cdf(0.75) - 0.674_489_750_196_081_7).abs() < 1e-12);
        assert!((inverse_normal_cdf(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((inverse_normal_cdf(1e-10) + 6.361_340_902_404_056).abs() < 1e-9);
        assert!((inverse_normal_cdf(0.25) + inverse_normal_cdf(0.75)).abs() < 1e-15);
    }

    #[test]
    fn qq_two_points() {
        let qq = qq_normal(&[1.0, -1.0]).unwrap();
        assert!((qq.theoretical[0] + 0.6745).abs() < 1e-4);
        assert!((qq.theoretical[1] - 0.6745).abs() < 1e-4);
        assert!(qq.max_deviation() < 1e-12);
    }

    #[test]
    fn qq_fixed_point() {
        let n = 500;
        let exact: Vec<f64> = (1..=n)
            .rev()
            .map(|i| inverse_normal_cdf((i as f64 - 0.5) / n as f64))
            .collect();
        let qq = qq_normal(&exact).unwrap();
        assert!(qq.max_deviation() < 1e-6);
        assert!(qq.theoretical.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn qq_uniform_bends() {
        let sample: Vec<f64> = (0..1024).map(|i| (i as f64 * 0.618_034) % 1.0).collect();
        assert!(qq_normal(&sample).unwrap().max_deviation() > 0.1);
    }

    #[test]
    fn qq_errors_and_csv() {
        assert!(qq_normal(&[1.0]).is_err());
        assert!(matches!(qq_normal(&[2.0; 8]), Err(Error::ZeroVariance)));
        let csv = qq_normal(&[0.0, 1.0, 2.0]).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "theoretical,sample");
        assert_eq!(lines.len(), 4);
    }
}

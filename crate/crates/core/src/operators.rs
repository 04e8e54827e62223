//! Linear degradation operators and their Moore-Penrose pseudo-inverses.
//!
//! Every operator acts on each colour channel independently with the same
//! linear map.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise;
use crate::tensor::{ImageTensor, Shape};

/// Fourier modes with `|H| <= DEFAULT_BLUR_THRESHOLD * max |H|` are dropped
/// from the blur pseudo-inverse.
pub const DEFAULT_BLUR_THRESHOLD: f64 = 1e-3;

fn default_blur_threshold() -> f64 {
    DEFAULT_BLUR_THRESHOLD
}

/// Serializable operator description; the image shape is supplied at build
/// time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Identity,
    SrAverage {
        scale: usize,
    },
    GaussianBlur {
        sigma: f64,
        radius: usize,
        #[serde(default = "default_blur_threshold")]
        threshold: f64,
    },
    CompressedSensing {
        ratio: f64,
        seed: u64,
    },
}

impl OperatorSpec {
    pub fn build(&self, input_shape: Shape) -> Result<DegradationOperator> {
        match *self {
            OperatorSpec::Identity => DegradationOperator::identity(input_shape),
            OperatorSpec::SrAverage { scale } => DegradationOperator::sr(scale, input_shape),
            OperatorSpec::GaussianBlur {
                sigma,
                radius,
                threshold,
            } => DegradationOperator::blur_with_threshold(sigma, radius, threshold, input_shape),
            OperatorSpec::CompressedSensing { ratio, seed } => {
                DegradationOperator::cs(ratio, seed, input_shape)
            }
        }
    }

    /// Short task label, e.g. `sr_x4` or `cs_0.25`.
    pub fn task_id(&self) -> String {
        match self {
            OperatorSpec::Identity => "identity".to_string(),
            OperatorSpec::SrAverage { scale } => format!("sr_x{scale}"),
            OperatorSpec::GaussianBlur { sigma, radius, .. } => format!("blur_s{sigma}_r{radius}"),
            OperatorSpec::CompressedSensing { ratio, .. } => format!("cs_{ratio}"),
        }
    }
}

#[derive(Debug, Clone)]
enum Kernel {
    Identity,
    SrAverage { scale: usize },
    Blur(BlurSpectrum),
    Cs(CsMatrix),
}

#[derive(Debug, Clone)]
pub struct DegradationOperator {
    spec: OperatorSpec,
    input_shape: Shape,
    output_shape: Shape,
    kernel: Kernel,
}

impl DegradationOperator {
    pub fn identity(shape: Shape) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self {
            spec: OperatorSpec::Identity,
            input_shape: shape,
            output_shape: shape,
            kernel: Kernel::Identity,
        })
    }

    /// `scale x scale` block averaging.
    pub fn sr(scale: usize, shape: Shape) -> Result<Self> {
        check_shape(shape)?;
        if scale == 0 || !shape.height.is_multiple_of(scale) || !shape.width.is_multiple_of(scale) {
            return Err(Error::invalid(format!(
                "scale {scale} does not divide image {shape}"
            )));
        }
        Ok(Self {
            spec: OperatorSpec::SrAverage { scale },
            input_shape: shape,
            output_shape: Shape::new(shape.height / scale, shape.width / scale, shape.channels),
            kernel: Kernel::SrAverage { scale },
        })
    }

    pub fn blur(sigma: f64, radius: usize, shape: Shape) -> Result<Self> {
        Self::blur_with_threshold(sigma, radius, DEFAULT_BLUR_THRESHOLD, shape)
    }

    /// Circular convolution with a normalized `(2r+1) x (2r+1)` Gaussian,
    /// restricted to the Fourier modes whose gain exceeds
    /// `threshold * max gain`.
    pub fn blur_with_threshold(
        sigma: f64,
        radius: usize,
        threshold: f64,
        shape: Shape,
    ) -> Result<Self> {
        check_shape(shape)?;
        if !(sigma > 0.0 && sigma.is_finite()) || radius == 0 {
            return Err(Error::invalid(format!(
                "blur needs sigma > 0 and radius >= 1, got sigma={sigma} radius={radius}"
            )));
        }
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::invalid(format!(
                "blur threshold {threshold} outside [0, 1)"
            )));
        }
        let spectrum = BlurSpectrum::new(sigma, radius, threshold, shape.height, shape.width)?;
        Ok(Self {
            spec: OperatorSpec::GaussianBlur {
                sigma,
                radius,
                threshold,
            },
            input_shape: shape,
            output_shape: shape,
            kernel: Kernel::Blur(spectrum),
        })
    }

    /// Random projection to `ceil(ratio * h * w)` measurements per channel
    /// with orthonormal rows.
    pub fn cs(ratio: f64, seed: u64, shape: Shape) -> Result<Self> {
        check_shape(shape)?;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "sampling ratio {ratio} outside (0, 1]"
            )));
        }
        let matrix = CsMatrix::new(ratio, seed, shape.pixels());
        Ok(Self {
            spec: OperatorSpec::CompressedSensing { ratio, seed },
            input_shape: shape,
            output_shape: Shape::new(matrix.rows, 1, shape.channels),
            kernel: Kernel::Cs(matrix),
        })
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }

    /// `A x`.
    pub fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        x.ensure_shape(self.input_shape)?;
        Ok(match &self.kernel {
            Kernel::Identity => x.clone(),
            Kernel::SrAverage { scale } => sr_downsample(x, *scale, self.output_shape),
            Kernel::Blur(spec) => per_channel(x, self.output_shape, |plane| spec.convolve(plane)),
            Kernel::Cs(m) => per_channel(x, self.output_shape, |plane| m.forward(plane)),
        })
    }

    /// `A† y`.
    pub fn pinv_apply(&self, y: &ImageTensor) -> Result<ImageTensor> {
        y.ensure_shape(self.output_shape)?;
        Ok(match &self.kernel {
            Kernel::Identity => y.clone(),
            Kernel::SrAverage { scale } => sr_replicate(y, *scale, self.input_shape),
            Kernel::Blur(spec) => per_channel(y, self.input_shape, |plane| spec.deconvolve(plane)),
            Kernel::Cs(m) => per_channel(y, self.input_shape, |plane| m.transpose(plane)),
        })
    }

    /// Range-space component `A† A x`.
    pub fn range_part(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.pinv_apply(&self.apply(x)?)
    }

    /// Null-space component `(I - A† A) x`.
    pub fn null_part(&self, x: &ImageTensor) -> Result<ImageTensor> {
        x.try_sub(&self.range_part(x)?)
    }
}

fn check_shape(shape: Shape) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::invalid(format!("empty image shape {shape}")));
    }
    Ok(())
}

fn per_channel(x: &ImageTensor, out_shape: Shape, f: impl Fn(&[f64]) -> Vec<f64>) -> ImageTensor {
    let mut out = ImageTensor::zeros(out_shape);
    for c in 0..x.shape().channels {
        out.set_channel(c, &f(&x.channel(c)));
    }
    out
}

fn sr_downsample(x: &ImageTensor, scale: usize, out_shape: Shape) -> ImageTensor {
    let norm = 1.0 / (scale * scale) as f64;
    let mut out = ImageTensor::zeros(out_shape);
    for h in 0..x.shape().height {
        for w in 0..x.shape().width {
            for c in 0..x.shape().channels {
                let i = out.index(h / scale, w / scale, c);
                out.as_mut_slice()[i] += norm * x.get(h, w, c);
            }
        }
    }
    out
}

fn sr_replicate(y: &ImageTensor, scale: usize, out_shape: Shape) -> ImageTensor {
    ImageTensor::from_fn(out_shape, |h, w, c| y.get(h / scale, w / scale, c))
}

/// Transfer function of a circular Gaussian blur and its truncated
/// pseudo-inverse.
#[derive(Clone)]
struct BlurSpectrum {
    height: usize,
    width: usize,
    transfer: Vec<Complex64>,
    inverse: Vec<Complex64>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for BlurSpectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlurSpectrum")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

/// Normalized Gaussian taps on a `(2r+1) x (2r+1)` grid, row-major.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut taps = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            taps.push((-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= sum);
    taps
}

impl BlurSpectrum {
    fn new(sigma: f64, radius: usize, threshold: f64, height: usize, width: usize) -> Result<Self> {
        let mut planner = FftPlanner::new();
        let mut spec = Self {
            height,
            width,
            transfer: Vec::new(),
            inverse: Vec::new(),
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        };

        // Kernel centred at the origin, wrapped onto the image torus.
        let taps = gaussian_kernel(sigma, radius);
        let side = 2 * radius + 1;
        let r = radius as isize;
        let mut psf = vec![Complex64::new(0.0, 0.0); height * width];
        for (k, tap) in taps.iter().enumerate() {
            let dy = (k / side) as isize - r;
            let dx = (k % side) as isize - r;
            let y = dy.rem_euclid(height as isize) as usize;
            let x = dx.rem_euclid(width as isize) as usize;
            psf[y * width + x].re += tap;
        }
        spec.fft2(&mut psf, true);

        // Modes at or below the cutoff are removed from both the forward map
        // and the inverse, so `inverse` is the exact pseudo-inverse of
        // `transfer`.
        let peak = psf.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let cutoff = threshold * peak;
        let zero = Complex64::new(0.0, 0.0);
        for z in psf.iter_mut() {
            if z.norm() <= cutoff {
                *z = zero;
            }
        }
        let inverse: Vec<Complex64> = psf
            .iter()
            .map(|z| {
                if *z == zero {
                    zero
                } else {
                    z.conj() / z.norm_sqr()
                }
            })
            .collect();
        if inverse.iter().all(|z| *z == zero) {
            return Err(Error::invalid("blur kernel keeps no Fourier modes"));
        }
        spec.transfer = psf;
        spec.inverse = inverse;
        Ok(spec)
    }

    fn fft2(&self, data: &mut [Complex64], forward: bool) {
        let (rows, cols) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        for row in data.chunks_exact_mut(self.width) {
            rows.process(row);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); self.height];
        for x in 0..self.width {
            for y in 0..self.height {
                column[y] = data[y * self.width + x];
            }
            cols.process(&mut column);
            for y in 0..self.height {
                data[y * self.width + x] = column[y];
            }
        }
        if !forward {
            let norm = 1.0 / (self.width * self.height) as f64;
            data.iter_mut().for_each(|z| *z *= norm);
        }
    }

    fn filter(&self, plane: &[f64], response: &[Complex64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft2(&mut buf, true);
        buf.iter_mut().zip(response).for_each(|(z, h)| *z *= h);
        self.fft2(&mut buf, false);
        buf.iter().map(|z| z.re).collect()
    }

    fn convolve(&self, plane: &[f64]) -> Vec<f64> {
        self.filter(plane, &self.transfer)
    }

    fn deconvolve(&self, plane: &[f64]) -> Vec<f64> {
        self.filter(plane, &self.inverse)
    }
}

/// Row-orthonormal measurement matrix, stored row-major.
#[derive(Debug, Clone)]
struct CsMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CsMatrix {
    fn new(ratio: f64, seed: u64, cols: usize) -> Self {
        let rows = ((ratio * cols as f64) - 1e-9).ceil().max(1.0) as usize;
        let rows = rows.min(cols);
        // Gaussian columns, orthonormalized by QR; the rows of A are the
        // columns of the thin Q factor.
        let gaussian = noise::normal_vec(seed, noise::stream::OPERATOR | cols as u64, cols * rows);
        let q = DMatrix::from_vec(cols, rows, gaussian).qr().q();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(q.column(i).iter());
        }
        Self { rows, cols, data }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }

    fn transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &coef) in self.data.chunks_exact(self.cols).zip(y) {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += coef * a);
        }
        out
    }
}

/// Dot product over eight independent lanes so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

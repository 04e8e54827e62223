//! Synthetic priors and calibration sets with smooth, image-like structure.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{GaussianComponent, GaussianMixturePrior};
use crate::error::Result;
use crate::noise::{self, stream};
use crate::operators::DegradationOperator;
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticPrior {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub components: usize,
    /// Per-pixel variance of every component.
    pub variance: f64,
    /// Peak amplitude of the component mean patterns.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticPrior {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            components: 4,
            variance: 0.01,
            amplitude: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticPrior {
    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    pub fn build(&self) -> Result<GaussianMixturePrior> {
        let components = (0..self.components.max(1))
            .map(|i| GaussianComponent {
                weight: 1.0,
                mean: smooth_pattern(self.shape(), self.seed, i as u64, self.amplitude),
                variance: self.variance,
            })
            .collect();
        GaussianMixturePrior::new(components)
    }
}

/// Sum of a few random periodic low-frequency waves per channel plus a
/// channel offset, clamped to `[-0.95, 0.95]`.
pub fn smooth_pattern(shape: Shape, seed: u64, index: u64, amplitude: f64) -> ImageTensor {
    let mut rng = noise::rng(seed, stream::SYNTHETIC | (index << 16));
    let mut image = ImageTensor::zeros(shape);
    for c in 0..shape.channels {
        let offset = rng.random_range(-0.2..0.2);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0..=2) as f64,
                    rng.random_range(0..=2) as f64,
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.3..1.0),
                )
            })
            .collect();
        let norm: f64 = waves.iter().map(|w| w.3).sum();
        for h in 0..shape.height {
            for w in 0..shape.width {
                let v: f64 = waves
                    .iter()
                    .map(|&(fy, fx, phase, a)| {
                        a * (TAU
                            * (fy * h as f64 / shape.height as f64
                                + fx * w as f64 / shape.width as f64)
                            + phase)
                            .cos()
                    })
                    .sum();
                image.set(h, w, c, (offset + amplitude * v / norm).clamp(-0.95, 0.95));
            }
        }
    }
    image
}

/// Draws `count` clean images from the prior with their measurements.
pub fn draw_pairs(
    prior: &GaussianMixturePrior,
    op: &DegradationOperator,
    count: usize,
    seed: u64,
) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    (0..count)
        .map(|i| {
            let mut rng = noise::rng(seed, stream::SYNTHETIC | 0xffff | ((i as u64) << 16));
            let x0 = prior.sample(&mut rng);
            let y = op.apply(&x0)?;
            Ok((x0, y))
        })
        .collect()
}

/// Piecewise-constant image: a flat background with random rectangles and
/// discs painted over it. Sharp edges give the heavy-tailed discrepancies
/// real photographs have, which the smooth mixture draws lack.
pub fn shapes_image(shape: Shape, seed: u64, index: u64, count: usize) -> ImageTensor {
    let mut rng = noise::rng(seed, stream::SYNTHETIC | 0xfffe | (index << 16));
    let mut image = ImageTensor::zeros(shape);
    let colour = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..shape.channels)
            .map(|_| rng.random_range(-0.9..0.9))
            .collect()
    };
    let background = colour(&mut rng);
    for h in 0..shape.height {
        for w in 0..shape.width {
            for (c, &v) in background.iter().enumerate() {
                image.set(h, w, c, v);
            }
        }
    }
    let (hf, wf) = (shape.height as f64, shape.width as f64);
    for _ in 0..count {
        let fill = colour(&mut rng);
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let (ry, rx) = (
            rng.random_range(0.1..0.35) * hf,
            rng.random_range(0.1..0.35) * wf,
        );
        let disc = rng.random_bool(0.5);
        for h in 0..shape.height {
            for w in 0..shape.width {
                let (dy, dx) = ((h as f64 + 0.5 - cy) / ry, (w as f64 + 0.5 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (c, &v) in fill.iter().enumerate() {
                        image.set(h, w, c, v);
                    }
                }
            }
        }
    }
    image
}

/// `count` shape images with their measurements.
pub fn shape_pairs(
    shape: Shape,
    op: &DegradationOperator,
    count: usize,
    seed: u64,
) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    (0..count)
        .map(|i| {
            let x0 = shapes_image(shape, seed, i as u64, 6);
            let y = op.apply(&x0)?;
            Ok((x0, y))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns_are_bounded_and_seeded() {
        let shape = Shape::new(16, 16, 3);
        let a = smooth_pattern(shape, 1, 0, 0.5);
        assert!(a.max_abs() <= 0.95);
        assert_eq!(a, smooth_pattern(shape, 1, 0, 0.5));
        assert_ne!(a, smooth_pattern(shape, 1, 1, 0.5));
    }

    #[test]
    fn pairs_are_consistent() {
        let cfg = SyntheticPrior {
            height: 8,
            width: 8,
            ..Default::default()
        };
        let prior = cfg.build().unwrap();
        assert_eq!(prior.components().len(), 4);
        let op = DegradationOperator::sr(2, cfg.shape()).unwrap();
        let pairs = draw_pairs(&prior, &op, 3, 5).unwrap();
        for (x0, y) in &pairs {
            assert_eq!(&op.apply(x0).unwrap(), y);
        }
        assert_ne!(pairs[0].0, pairs[1].0);
    }

    #[test]
    fn shapes_are_piecewise_constant() {
        let shape = Shape::new(16, 16, 3);
        let a = shapes_image(shape, 2, 0, 6);
        assert_eq!(a, shapes_image(shape, 2, 0, 6));
        assert!(a.max_abs() < 0.9);
        let mut levels: Vec<u64> = a.channel(0).iter().map(|v| v.to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        assert!(levels.len() <= 7, "{} levels", levels.len());
    }
}

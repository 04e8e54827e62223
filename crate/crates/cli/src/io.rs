//! Tensor files: NTF (`NTF1`, u32 LE rank, u32 LE dims, f32 LE payload) and
//! 8-bit PNG mapped between `[0, 255]` and `[-1, 1]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{DynamicImage, ImageBuffer, Luma, Rgb, Rgba};
use qbm_core::{ImageTensor, Shape};

use crate::config::ConfigError;

pub const NTF_MAGIC: &[u8; 4] = b"NTF1";
const MAX_RANK: usize = 8;

/// Raw NTF contents with arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Ntf {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Ntf {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * (self.dims.len() + self.data.len()));
        out.extend_from_slice(NTF_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self> {
        let mut word = [0u8; 4];
        bytes
            .read_exact(&mut word)
            .context("truncated NTF header")?;
        if &word != NTF_MAGIC {
            bail!("bad NTF magic {word:?}");
        }
        bytes
            .read_exact(&mut word)
            .context("truncated NTF header")?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank > MAX_RANK {
            bail!("NTF rank {rank} exceeds {MAX_RANK}");
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            bytes.read_exact(&mut word).context("truncated NTF dims")?;
            dims.push(u32::from_le_bytes(word));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .context("NTF dims overflow")?;
        if bytes.len() != count * 4 {
            bail!(
                "NTF payload holds {} bytes, dims {dims:?} need {}",
                bytes.len(),
                count * 4
            );
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn from_image(x: &ImageTensor) -> Self {
        let s = x.shape();
        Self {
            dims: vec![s.height as u32, s.width as u32, s.channels as u32],
            data: x.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Rank-3 `[H, W, C]` contents as an image tensor.
    pub fn to_image(&self) -> Result<ImageTensor> {
        let &[h, w, c] = self.dims.as_slice() else {
            bail!(
                "expected a rank-3 [H, W, C] tensor, got dims {:?}",
                self.dims
            );
        };
        let shape = Shape::new(h as usize, w as usize, c as usize);
        Ok(ImageTensor::from_vec(
            shape,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )?)
    }
}

pub fn read_ntf(path: &Path) -> Result<Ntf> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ntf::decode(&bytes).with_context(|| format!("invalid NTF file {}", path.display()))
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Loads an image tensor from `.png` or `.ntf`.
pub fn read_tensor(path: &Path) -> Result<ImageTensor> {
    if is_png(path) {
        read_png(path)
    } else {
        read_ntf(path)?
            .to_image()
            .with_context(|| format!("in {}", path.display()))
    }
}

/// Writes `.png` (clamped, 8-bit) or anything else as NTF.
pub fn write_tensor(path: &Path, x: &ImageTensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    if is_png(path) {
        write_png(path, x)
    } else {
        let mut file =
            fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        file.write_all(&Ntf::from_image(x).encode())
            .with_context(|| format!("cannot write {}", path.display()))
    }
}

pub fn to_model(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

pub fn from_model(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (4, b.into_raw()),
        other if other.color().has_alpha() => (4, other.to_rgba8().into_raw()),
        other if other.color().channel_count() == 1 => (1, other.to_luma8().into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    let data = raw.into_iter().map(to_model).collect();
    Ok(ImageTensor::from_vec(
        Shape::new(height, width, channels),
        data,
    )?)
}

pub fn write_png(path: &Path, x: &ImageTensor) -> Result<()> {
    let s = x.shape();
    let raw: Vec<u8> = x.as_slice().iter().map(|&v| from_model(v)).collect();
    let (w, h) = (s.width as u32, s.height as u32);
    let saved = match s.channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).map(|b| b.save(path)),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).map(|b| b.save(path)),
        4 => ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, raw).map(|b| b.save(path)),
        c => bail!(ConfigError(format!(
            "cannot write {c}-channel tensor as PNG {}; use .ntf",
            path.display()
        ))),
    };
    saved
        .expect("buffer length matches shape")
        .with_context(|| format!("cannot write image {}", path.display()))
}

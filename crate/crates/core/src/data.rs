//! Toy 2-D densities, IDX image files and dataset splits.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::tensor::Tensor;

pub const IDX_UBYTE_3D_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    EightGaussians,
    TwoMoons,
    Checkerboard,
}

impl ToyKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyKind::EightGaussians => "eight_gaussians",
            ToyKind::TwoMoons => "two_moons",
            ToyKind::Checkerboard => "checkerboard",
        }
    }
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eight_gaussians" => Ok(ToyKind::EightGaussians),
            "two_moons" => Ok(ToyKind::TwoMoons),
            "checkerboard" => Ok(ToyKind::Checkerboard),
            other => Err(Error::Dataset(format!(
                "unknown toy dataset `{other}` (expected eight_gaussians, two_moons or checkerboard)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
    All,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

/// Per-dimension affine map from stored values back to raw units:
/// `raw = stored * scale + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        let d = self.shift.len();
        raw.iter()
            .enumerate()
            .map(|(i, v)| (v - self.shift[i % d]) / self.scale[i % d])
            .collect()
    }

    pub fn denormalize(&self, stored: &[f64]) -> Vec<f64> {
        let d = self.shift.len();
        stored
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.scale[i % d] + self.shift[i % d])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// Row-major `[n x dim]`.
    pub data: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub normalization: Normalization,
    /// Image height and width when rows are flattened images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Validation => self.validation.clone(),
            Split::Test => self.test.clone(),
            Split::All => (0..self.n).collect(),
        }
    }

    pub fn rows(&self, indices: &[usize]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n {
                return Err(Error::Dataset(format!(
                    "row {i} out of range for {} rows",
                    self.n
                )));
            }
            out.extend_from_slice(&self.data[i * self.dim..(i + 1) * self.dim]);
        }
        Tensor::new(out, vec![indices.len(), self.dim])
    }

    pub fn split(&self, split: Split) -> Result<Tensor> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Err(Error::Dataset(format!(
                "split {split:?} of `{}` is empty",
                self.name
            )));
        }
        self.rows(&idx)
    }

    /// Reassigns the shuffled train/validation/test partition with equal
    /// validation and test fractions.
    pub fn resplit(&mut self, holdout_fraction: f64, seed: u64) -> Result<()> {
        let (train, validation, test) = split_indices(self.n, holdout_fraction, seed)?;
        self.train = train;
        self.validation = validation;
        self.test = test;
        Ok(())
    }
}

type SplitIndices = (Vec<usize>, Vec<usize>, Vec<usize>);

/// Shuffled partition of `0..n` with `holdout_fraction` of the rows in each
/// of validation and test (at least one row each).
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if n < 3 || !(holdout_fraction > 0.0 && holdout_fraction < 0.5) {
        return Err(Error::Dataset(format!(
            "cannot split {n} rows with holdout fraction {holdout_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * holdout_fraction).round() as usize).max(1);
    let test = idx.split_off(n - k);
    let validation = idx.split_off(n - 2 * k);
    Ok((idx, validation, test))
}

fn standardize(raw: &[f64], dim: usize) -> (Vec<f64>, Normalization) {
    let n = raw.len() / dim;
    let mut shift = vec![0.0; dim];
    let mut scale = vec![0.0; dim];
    for j in 0..dim {
        let mean = (0..n).map(|i| raw[i * dim + j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (raw[i * dim + j] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        shift[j] = mean;
        scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let norm = Normalization { shift, scale };
    (norm.normalize(raw), norm)
}

/// Raw (unstandardized) draws from a toy density.
pub fn sample_toy<R: Rng + ?Sized>(kind: ToyKind, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (x, y) = match kind {
            ToyKind::EightGaussians => {
                let k = rng.random_range(0..8) as f64;
                let angle = 2.0 * PI * k / 8.0;
                let (ex, ey): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                (2.0 * angle.cos() + 0.2 * ex, 2.0 * angle.sin() + 0.2 * ey)
            }
            ToyKind::TwoMoons => {
                let t = rng.random_range(0.0..PI);
                let (ex, ey): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                let (x, y) = if rng.random_bool(0.5) {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                (x + 0.1 * ex, y + 0.1 * ey)
            }
            ToyKind::Checkerboard => {
                let x = rng.random_range(-2.0..2.0f64);
                let offset = if rng.random_bool(0.5) { -2.0 } else { 0.0 };
                let y = rng.random_range(0.0..1.0) + offset + x.floor().rem_euclid(2.0);
                (x, y)
            }
        };
        out.push(x);
        out.push(y);
    }
    out
}

/// Standardized toy dataset with an 80/10/10 split.
pub fn make_toy_dataset(kind: ToyKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Dataset(format!(
            "toy datasets need n >= 10, got {n}"
        )));
    }
    let raw = sample_toy(kind, n, &mut ChaCha8Rng::seed_from_u64(seed));
    let (data, normalization) = standardize(&raw, 2);
    let (train, validation, test) = split_indices(n, 0.1, derive_seed(seed, 1))?;
    Ok(Dataset {
        name: kind.name().into(),
        data,
        n,
        dim: 2,
        train,
        validation,
        test,
        normalization,
        image_shape: None,
    })
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Dataset("IDX header is truncated".into()))
}

/// Parses a 3-D unsigned-byte IDX buffer into rows scaled to `[0, 1]`,
/// optionally thresholded to `{0, 1}`.
pub fn parse_idx_images(bytes: &[u8], binarize: Option<f64>) -> Result<Dataset> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_UBYTE_3D_MAGIC {
        return Err(Error::Dataset(format!(
            "bad IDX magic {magic:#010x}, expected {IDX_UBYTE_3D_MAGIC:#010x}"
        )));
    }
    let n = read_u32(bytes, 4)? as usize;
    let (rows, cols) = (read_u32(bytes, 8)? as usize, read_u32(bytes, 12)? as usize);
    let dim = rows * cols;
    let payload = &bytes[16..];
    let expected = n
        .checked_mul(dim)
        .ok_or_else(|| Error::Dataset("IDX dimensions overflow".into()))?;
    if payload.len() < expected {
        return Err(Error::Dataset(format!(
            "IDX payload is truncated: {} of {expected} bytes",
            payload.len()
        )));
    }
    if n < 3 || dim == 0 {
        return Err(Error::Dataset(format!(
            "IDX file holds too few images ({n} of {rows}x{cols})"
        )));
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| {
            let v = b as f64 / 255.0;
            match binarize {
                Some(th) => f64::from(u8::from(v > th)),
                None => v,
            }
        })
        .collect();
    let (train, validation, test) = split_indices(n, 0.1, 0)?;
    Ok(Dataset {
        name: "idx".into(),
        data,
        n,
        dim,
        train,
        validation,
        test,
        normalization: Normalization {
            shift: vec![0.0; dim],
            scale: vec![255.0; dim],
        },
        image_shape: Some((rows, cols)),
    })
}

pub fn load_idx_images(path: &Path, binarize: Option<f64>) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    parse_idx_images(&bytes, binarize)
}

/// Writes `n` images of `rows x cols` bytes as a 3-D unsigned-byte IDX file.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let dim = rows * cols;
    if dim == 0 || !pixels.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "{} bytes do not divide into {rows}x{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [
        IDX_UBYTE_3D_MAGIC,
        (pixels.len() / dim) as u32,
        rows as u32,
        cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes rows as CSV with a header `x0,x1,...`.
pub fn write_csv<W: Write>(mut out: W, data: &[f64], dim: usize) -> Result<()> {
    let header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for row in data.chunks(dim) {
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

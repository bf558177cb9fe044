//! Synthetic image datasets and patch (un)packing.

use std::fmt;
use std::str::FromStr;

use crate::numerics::{Matrix, Real, Rng};
use crate::{Error, Result};

pub const IMAGE_SIDE: usize = 8;
pub const PATCH_SIDE: usize = 2;
const PIXEL_NOISE_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetId {
    GradientPatches,
}

impl DatasetId {
    pub fn name(self) -> &'static str {
        match self {
            DatasetId::GradientPatches => "gradient-patches",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient-patches" => Ok(DatasetId::GradientPatches),
            other => Err(Error::Contract(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: DatasetId,
    pub seed: u64,
    pub seq_len: usize,
    pub patch_dim: usize,
    pub samples: Vec<Matrix<f32>>,
}

impl Dataset {
    pub fn generate(id: DatasetId, seed: u64, n: usize) -> Result<Self> {
        match id {
            DatasetId::GradientPatches => gen_gradient_patches(seed, n),
        }
    }

    /// Deterministic 90/10 split: every tenth sample (index ≡ 9 mod 10) is
    /// held out.
    pub fn split(&self) -> (Vec<&Matrix<f32>>, Vec<&Matrix<f32>>) {
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if i % 10 == 9 {
                held.push(s);
            } else {
                train.push(s);
            }
        }
        (train, held)
    }
}

/// `n` noisy 8×8 linear intensity ramps with random direction, slope and
/// offset, standardized over the whole dataset and cut into 2×2 patches
/// (`L = 16`, `D = 4`).
pub fn gen_gradient_patches(seed: u64, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("dataset needs at least one sample".into()));
    }
    let mut rng = Rng::new(seed);
    let half = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    let mut images: Vec<Matrix<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = 2.0 * std::f64::consts::PI * rng.uniform();
        let slope = 0.5 + rng.uniform();
        let offset = rng.normal();
        let (dx, dy) = (slope * theta.cos(), slope * theta.sin());
        let mut img = Matrix::zeros(IMAGE_SIDE, IMAGE_SIDE);
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                let (x, y) = ((c as f64 - half) / half, (r as f64 - half) / half);
                img.set(r, c, offset + dx * x + dy * y + PIXEL_NOISE_STD * rng.normal());
            }
        }
        images.push(img);
    }
    let count = (n * IMAGE_SIDE * IMAGE_SIDE) as f64;
    let mean = images.iter().map(|m| m.sum()).sum::<f64>() / count;
    let var = images
        .iter()
        .flat_map(|m| m.data().iter())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count;
    let std = var.sqrt();
    let samples = images
        .iter()
        .map(|img| patchify(&img.map(|v| (v - mean) / std).cast::<f32>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        id: DatasetId::GradientPatches,
        seed,
        seq_len: (IMAGE_SIDE / PATCH_SIDE).pow(2),
        patch_dim: PATCH_SIDE * PATCH_SIDE,
        samples,
    })
}

/// 8×8 image → 16×4 sequence. Patches are taken in row-major block order,
/// pixels within a patch in row-major order.
pub fn patchify<T: Real>(image: &Matrix<T>) -> Result<Matrix<T>> {
    image.check_shape(IMAGE_SIDE, IMAGE_SIDE, "patchify input")?;
    let per_side = IMAGE_SIDE / PATCH_SIDE;
    let mut seq = Matrix::zeros(per_side * per_side, PATCH_SIDE * PATCH_SIDE);
    for br in 0..per_side {
        for bc in 0..per_side {
            let row = seq.row_mut(br * per_side + bc);
            for pr in 0..PATCH_SIDE {
                for pc in 0..PATCH_SIDE {
                    row[pr * PATCH_SIDE + pc] = image.get(br * PATCH_SIDE + pr, bc * PATCH_SIDE + pc);
                }
            }
        }
    }
    Ok(seq)
}

pub fn unpatchify<T: Real>(seq: &Matrix<T>) -> Result<Matrix<T>> {
    let per_side = IMAGE_SIDE / PATCH_SIDE;
    seq.check_shape(per_side * per_side, PATCH_SIDE * PATCH_SIDE, "unpatchify input")?;
    let mut image = Matrix::zeros(IMAGE_SIDE, IMAGE_SIDE);
    for br in 0..per_side {
        for bc in 0..per_side {
            let row = seq.row(br * per_side + bc);
            for pr in 0..PATCH_SIDE {
                for pc in 0..PATCH_SIDE {
                    image.set(br * PATCH_SIDE + pr, bc * PATCH_SIDE + pc, row[pr * PATCH_SIDE + pc]);
                }
            }
        }
    }
    Ok(image)
}

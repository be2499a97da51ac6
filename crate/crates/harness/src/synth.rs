//! Synthetic 28×28 ten-class image set written in IDX format, used when no
//! real digit files are available.

use std::path::{Path, PathBuf};

use layerdyn::data::{write_idx_images, write_idx_labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HarnessError, Result};

pub const SIDE: usize = 28;
pub const CLASSES: usize = 10;
const BLOBS_PER_CLASS: usize = 4;

/// Each class is a fixed sum of four Gaussian blobs; every sample shifts the
/// whole pattern by up to 2 px and adds pixel noise of std 40 before
/// clamping to a byte. Labels cycle `0, 1, …, 9`.
pub fn synthetic_digits(count: usize, seed: u64) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<Vec<(f64, f64, f64)>> = (0..CLASSES)
        .map(|_| {
            (0..BLOBS_PER_CLASS)
                .map(|_| {
                    (
                        rng.random_range(6.0..22.0),
                        rng.random_range(6.0..22.0),
                        rng.random_range(1.5..3.5),
                    )
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 40.0).expect("positive std");
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % CLASSES;
        let (dx, dy) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mut img = Vec::with_capacity(SIDE * SIDE);
        for r in 0..SIDE {
            for col in 0..SIDE {
                let mut v: f64 = protos[c]
                    .iter()
                    .map(|&(cx, cy, s)| {
                        let d2 = ((r as f64 - cy - dy).powi(2) + (col as f64 - cx - dx).powi(2))
                            / (2.0 * s * s);
                        255.0 * (-d2).exp()
                    })
                    .sum();
                v += noise.sample(&mut rng);
                img.push(v.clamp(0.0, 255.0).round() as u8);
            }
        }
        images.push(img);
        labels.push(c as u8);
    }
    (images, labels)
}

/// Writes `images.idx` and `labels.idx` into `dir` and returns their paths.
pub fn write_synthetic_idx(dir: &Path, count: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let (images, labels) = synthetic_digits(count, seed);
    let ip = dir.join("images.idx");
    let lp = dir.join("labels.idx");
    write_idx_images(&ip, SIDE, SIDE, &images).map_err(|e| HarnessError::io(&ip, e))?;
    write_idx_labels(&lp, &labels).map_err(|e| HarnessError::io(&lp, e))?;
    Ok((ip, lp))
}

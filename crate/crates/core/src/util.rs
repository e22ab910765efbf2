//! Small shared helpers: FNV-1a hashing, image batching, and the optimiser
//! settings every training loop takes.

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::numerics::Tensor;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(bytes);
    h.finish()
}

/// Stacks equally sized images into a `[B, S, S, 3]` tensor scaled to `[0, 1]`.
pub fn image_batch(images: &[&RgbImage], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size * 3);
    for img in images {
        if img.width != size || img.height != size {
            return Err(Error::shape(
                "image_batch",
                format!("expected {size}×{size} image, got {}×{}", img.width, img.height),
            ));
        }
        data.extend(img.to_unit());
    }
    Tensor::new(&[images.len(), size, size, 3], data)
}

/// Optimiser schedule shared by the detector and segmenter trainers.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "epochs {} batch {} lr {} (all must be positive)",
                self.epochs, self.batch_size, self.lr
            )));
        }
        Ok(())
    }
}

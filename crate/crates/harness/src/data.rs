//! In-memory image datasets and the synthetic oriented-stripe task.

use std::f64::consts::PI;

use msgt_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HarnessError, Result};

/// Stripe orientations of the four synthetic classes, in degrees.
pub const ORIENTATIONS: [f64; 4] = [0.0, 45.0, 90.0, 135.0];

/// Pixel statistics removed before images reach the model: mean and standard
/// deviation of a full-contrast sinusoid in `[0, 1]`.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.35;

/// Images `[n×H×W×C]` with values in `[0, 1]` and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Standardized model inputs and labels for `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
        }
        let shape = [indices.len(), self.height, self.width, self.channels];
        let images = Tensor::new(&shape, data).expect("batch extents match the data");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub size: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

/// Four-class oriented sinusoidal stripes, gray values replicated over 3 channels.
///
/// Each image draws its stripe period from 6..14 pixels and a uniform phase.
/// Labels cycle through the classes so every class gets exactly `n / 4` images
/// when `n` is a multiple of 4.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.size == 0 {
        return Err(HarnessError::Config("synthetic image size must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(HarnessError::Config(format!("noise level {} must be finite and non-negative", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise level");
    let s = spec.size;
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % ORIENTATIONS.len()).collect();
    labels.shuffle(&mut rng);
    let mut images = Vec::with_capacity(spec.n * s * s * 3);
    for &label in &labels {
        let theta = ORIENTATIONS[label].to_radians();
        let (dx, dy) = (theta.cos(), theta.sin());
        let period: f64 = rng.gen_range(6.0..14.0);
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        for y in 0..s {
            for x in 0..s {
                let along = x as f64 * dx + y as f64 * dy;
                let mut v = 0.5 + 0.5 * (2.0 * PI * along / period + phase).sin();
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                let v = v.clamp(0.0, 1.0) as f32;
                images.extend([v, v, v]);
            }
        }
    }
    Ok(Dataset { images, labels, height: s, width: s, channels: 3, num_classes: ORIENTATIONS.len() })
}

/// Deterministic epoch-wise shuffled batches.
#[derive(Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..len).collect(), pos: 0, batch, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.order.shuffle(&mut s.rng);
        s
    }

    /// Indices of the next batch; wraps into a reshuffled epoch when exhausted.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

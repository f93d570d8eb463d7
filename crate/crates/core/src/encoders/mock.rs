//! Deterministic stand-in encoders for development and tests.
//!
//! None of these carry learned weights; each is a fixed seeded random
//! projection of simple image statistics.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{resize_square, PlainEncoder, RegionEncoder, RegionImage, TextEncoder};
use crate::embedding::{Embedding, EmbeddingSpace};
use crate::Result;

const BINS: usize = 64;

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * scale) as f32
        })
        .collect()
}

fn project(matrix: &[f32], features: &[f64], rows: usize) -> Vec<f64> {
    let cols = features.len();
    (0..rows)
        .map(|r| {
            let row = &matrix[r * cols..(r + 1) * cols];
            row.iter().zip(features).map(|(&w, &f)| w as f64 * f).sum()
        })
        .collect()
}

fn luma(p: &image::Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

fn bin(v: f64) -> usize {
    ((v / 256.0 * BINS as f64) as usize).min(BINS - 1)
}

/// Region encoder over the grayscale histograms of `pixels ⊙ alpha` and
/// `pixels ⊙ (1 − alpha)`, concatenated and randomly projected to 768-d.
#[derive(Debug, Clone)]
pub struct MockRegionEncoder {
    resolution: u32,
    projection: Vec<f32>,
}

impl MockRegionEncoder {
    pub fn new(seed: u64) -> Self {
        Self::with_resolution(seed, 224)
    }

    pub fn with_resolution(seed: u64, resolution: u32) -> Self {
        Self {
            resolution,
            projection: gaussian_matrix(768, 2 * BINS, seed ^ 0xa1fa),
        }
    }

    pub fn histograms(&self, img: &RegionImage) -> Vec<f64> {
        let pixels = resize_square(img.pixels(), self.resolution);
        let alpha = img.alpha().resample_area(self.resolution, self.resolution);
        let mut hist = vec![0.0f64; 2 * BINS];
        for (x, y, p) in pixels.enumerate_pixels() {
            let g = luma(p);
            let a = alpha.get(x, y) as f64;
            hist[bin(g * a)] += 1.0;
            hist[BINS + bin(g * (1.0 - a))] += 1.0;
        }
        let n = (self.resolution * self.resolution) as f64;
        hist.iter_mut().for_each(|h| *h /= n);
        hist
    }
}

impl RegionEncoder for MockRegionEncoder {
    fn id(&self) -> &str {
        "mock-region"
    }

    fn input_resolution(&self) -> u32 {
        self.resolution
    }

    fn encode_region(&self, img: &RegionImage) -> Result<Embedding> {
        let features = self.histograms(img);
        Embedding::from_f64(
            EmbeddingSpace::AlphaClip768,
            &project(&self.projection, &features, 768),
        )
    }
}

/// Plain encoder over per-channel histograms and an 8x8 luma thumbnail,
/// with a small content-hash term so distinct images never collide.
#[derive(Debug, Clone)]
pub struct MockPlainEncoder {
    resolution: u32,
    seed: u64,
    projection: Vec<f32>,
}

const PLAIN_FEATURES: usize = 3 * BINS + 64;

impl MockPlainEncoder {
    pub fn new(seed: u64) -> Self {
        Self {
            resolution: 224,
            seed,
            projection: gaussian_matrix(1024, PLAIN_FEATURES, seed ^ 0x0c11),
        }
    }

    fn features(&self, img: &RgbImage) -> Vec<f64> {
        let mut f = vec![0.0f64; PLAIN_FEATURES];
        let (w, h) = img.dimensions();
        let n = (w as f64 * h as f64).max(1.0);
        for p in img.pixels() {
            for c in 0..3 {
                f[c * BINS + bin(p[c] as f64)] += 1.0 / n;
            }
        }
        let thumb = image::imageops::resize(img, 8, 8, image::imageops::FilterType::Triangle);
        for (i, p) in thumb.pixels().enumerate() {
            f[3 * BINS + i] = luma(p) / 255.0;
        }
        f
    }
}

impl PlainEncoder for MockPlainEncoder {
    fn id(&self) -> &str {
        "mock-plain"
    }

    fn input_resolution(&self) -> u32 {
        self.resolution
    }

    fn encode_plain(&self, pixels: &RgbImage) -> Result<Embedding> {
        let mut v = project(&self.projection, &self.features(pixels), 1024);
        let mut hasher_input = Vec::with_capacity(pixels.as_raw().len() + 8);
        hasher_input.extend_from_slice(&pixels.width().to_le_bytes());
        hasher_input.extend_from_slice(&pixels.height().to_le_bytes());
        hasher_input.extend_from_slice(pixels.as_raw());
        let digest = crate::content_hash(&hasher_input);
        let hash_seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest") ^ self.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(hash_seed);
        for x in v.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += 1e-3 * z;
        }
        Embedding::from_f64(EmbeddingSpace::Adapter1024, &v)
    }
}

/// Text encoder mapping each string to a seeded random direction.
#[derive(Debug, Clone)]
pub struct MockTextEncoder {
    seed: u64,
}

impl MockTextEncoder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl TextEncoder for MockTextEncoder {
    fn id(&self) -> &str {
        "mock-text"
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        let digest = crate::content_hash(text.as_bytes());
        let s = u64::from_str_radix(&digest[..16], 16).expect("hex digest") ^ self.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let v: Vec<f64> = (0..1024).map(|_| StandardNormal.sample(&mut rng)).collect();
        Embedding::from_f64(EmbeddingSpace::Adapter1024, &v)
    }
}

/// Plain encoder that ignores its input. Useful as a regression target.
#[derive(Debug, Clone)]
pub struct ConstantPlainEncoder {
    value: Embedding,
}

impl ConstantPlainEncoder {
    pub fn new(value: Embedding) -> Self {
        Self { value }
    }
}

impl PlainEncoder for ConstantPlainEncoder {
    fn id(&self) -> &str {
        "constant-plain"
    }

    fn input_resolution(&self) -> u32 {
        224
    }

    fn output_space(&self) -> EmbeddingSpace {
        self.value.space()
    }

    fn encode_plain(&self, _pixels: &RgbImage) -> Result<Embedding> {
        Ok(self.value.clone())
    }
}

//! Image feature extractors for the realism metric.

use std::path::Path;

use image::RgbImage;

use crate::encoders::external::{scratch_dir, ExternalCommand};
use crate::{Error, Result};

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, img: &RgbImage) -> Result<Vec<f64>>;
}

/// Colour layout features: a 4x4 grid of per-channel means, scaled to `[0, 1]`.
#[derive(Debug, Clone, Default)]
pub struct MockFeatureExtractor;

impl FeatureExtractor for MockFeatureExtractor {
    fn id(&self) -> &str {
        "mock-layout-4x4"
    }

    fn dim(&self) -> usize {
        48
    }

    fn extract(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::Metric("cannot extract features from an empty image".into()));
        }
        let mut sums = vec![0.0f64; 48];
        let mut counts = vec![0u32; 16];
        for (x, y, p) in img.enumerate_pixels() {
            let cell = ((y * 4 / h) * 4 + x * 4 / w) as usize;
            counts[cell] += 1;
            for c in 0..3 {
                sums[cell * 3 + c] += p[c] as f64;
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            for c in 0..3 {
                sums[cell * 3 + c] /= 255.0 * n.max(1) as f64;
            }
        }
        Ok(sums)
    }
}

/// Out-of-process extractor (for example an inception pool layer). The
/// scratch directory receives `image.png`; the command writes
/// `features.f32` holding `dim` little-endian floats.
#[derive(Debug, Clone)]
pub struct ExternalFeatureExtractor {
    pub id: String,
    pub dim: usize,
    pub command: ExternalCommand,
}

impl FeatureExtractor for ExternalFeatureExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let dir = scratch_dir()?;
        let p = dir.path();
        img.save(p.join("image.png"))
            .map_err(|e| Error::ImageDecode(e.to_string()))?;
        self.command.run(p)?;
        read_f32_features(&p.join("features.f32"), self.dim)
    }
}

fn read_f32_features(path: &Path, dim: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != dim * 4 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bytes.len() / 4,
        });
    }
    let v: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(v)
}

//! Encoder interfaces.
//!
//! A [`RegionEncoder`] takes an image plus an alpha map marking the region of
//! interest and emits a 768-d embedding; a [`PlainEncoder`] emits the 1024-d
//! embedding the image-prompt adapter consumes. [`TextEncoder`] covers the
//! text tower used for zero-shot classification during evaluation.
//!
//! Implementations are immutable once constructed, so `encode` calls may run
//! concurrently.

mod alpha;
pub mod external;
pub mod mock;

use image::RgbImage;

use crate::embedding::{Embedding, EmbeddingSpace};
use crate::raster::AlphaMap;
use crate::{Error, Result};

pub use alpha::{preprocess_alpha, PreprocessedAlpha};

/// An image with an aligned alpha map.
#[derive(Debug, Clone)]
pub struct RegionImage {
    pixels: RgbImage,
    alpha: AlphaMap,
}

impl RegionImage {
    pub fn new(pixels: RgbImage, alpha: AlphaMap) -> Result<Self> {
        if pixels.dimensions() != alpha.dimensions() {
            return Err(Error::ImageDecode(format!(
                "alpha {:?} does not match image {:?}",
                alpha.dimensions(),
                pixels.dimensions()
            )));
        }
        Ok(Self { pixels, alpha })
    }

    /// Whole-image focus.
    pub fn full(pixels: RgbImage) -> Self {
        let (w, h) = pixels.dimensions();
        Self {
            alpha: AlphaMap::filled(w, h, 1.0),
            pixels,
        }
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn alpha(&self) -> &AlphaMap {
        &self.alpha
    }
}

pub trait RegionEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn input_resolution(&self) -> u32;
    fn output_space(&self) -> EmbeddingSpace {
        EmbeddingSpace::AlphaClip768
    }
    fn encode_region(&self, img: &RegionImage) -> Result<Embedding>;
}

pub trait PlainEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn input_resolution(&self) -> u32;
    fn output_space(&self) -> EmbeddingSpace {
        EmbeddingSpace::Adapter1024
    }
    fn encode_plain(&self, pixels: &RgbImage) -> Result<Embedding>;
}

pub trait TextEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn encode_text(&self, text: &str) -> Result<Embedding>;
}

pub(crate) fn check_output(space: EmbeddingSpace, e: &Embedding, who: &str) -> Result<()> {
    if e.space() != space {
        return Err(Error::EncoderSpaceMismatch(format!(
            "{who} produced {} values, expected {}",
            e.dim(),
            space.dim()
        )));
    }
    Ok(())
}

/// Resize to the encoder's square input resolution.
pub fn resize_square(img: &RgbImage, resolution: u32) -> RgbImage {
    if img.dimensions() == (resolution, resolution) {
        return img.clone();
    }
    image::imageops::resize(img, resolution, resolution, image::imageops::FilterType::Triangle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_shape_must_match() {
        let img = RgbImage::new(10, 10);
        let alpha = AlphaMap::filled(10, 9, 1.0);
        assert!(matches!(
            RegionImage::new(img, alpha),
            Err(Error::ImageDecode(_))
        ));
    }
}

use crate::raster::{AlphaMap, BinaryMask};

/// Alpha map at encoder resolution plus any warnings raised on the way.
#[derive(Debug, Clone)]
pub struct PreprocessedAlpha {
    pub alpha: AlphaMap,
    pub warnings: Vec<String>,
}

/// Resample a binary mask to the encoder's input grid with area weighting.
///
/// An empty mask is still processed; it only raises an `empty_mask` warning.
pub fn preprocess_alpha(mask: &BinaryMask, width: u32, height: u32) -> PreprocessedAlpha {
    let mut warnings = Vec::new();
    if mask.is_empty() {
        log::warn!("alpha mask is empty; region focus will be degenerate");
        warnings.push("empty_mask".to_string());
    }
    PreprocessedAlpha {
        alpha: mask.to_alpha().resample_area(width, height),
        warnings,
    }
}

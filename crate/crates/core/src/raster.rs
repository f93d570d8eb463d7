//! Binary masks, soft alpha maps and image I/O helpers.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};

use crate::{Error, Result};

/// Foreground threshold for 8-bit mask images: value > 127 is foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::DimensionMismatch {
                expected: (width * height) as usize,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Threshold an 8-bit single-channel image.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self::from_fn(img.width(), img.height(), |x, y| {
            img.get_pixel(x, y)[0] > MASK_THRESHOLD
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dimensions() == other.dimensions()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn to_alpha(&self) -> AlphaMap {
        AlphaMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Row-major soft alpha in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl AlphaMap {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::DimensionMismatch {
                expected: (width * height) as usize,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidRequest("alpha values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); (width * height) as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// `1 - alpha`.
    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|a| 1.0 - a).collect(),
        }
    }

    /// Area-weighted resampling: each output pixel is the mean of the
    /// source area it covers, with fractional coverage at the edges.
    pub fn resample_area(&self, width: u32, height: u32) -> AlphaMap {
        if (width, height) == self.dimensions() {
            return self.clone();
        }
        let xs = axis_weights(self.width, width);
        let ys = axis_weights(self.height, height);
        let mut data = Vec::with_capacity((width * height) as usize);
        for wy in &ys {
            for wx in &xs {
                let mut acc = 0.0f64;
                let mut total = 0.0f64;
                for &(sy, fy) in wy {
                    let row = (sy * self.width) as usize;
                    for &(sx, fx) in wx {
                        let w = fx * fy;
                        acc += w * self.data[row + sx as usize] as f64;
                        total += w;
                    }
                }
                data.push(((acc / total) as f32).clamp(0.0, 1.0));
            }
        }
        AlphaMap {
            width,
            height,
            data,
        }
    }

    pub fn to_gray16(&self) -> image::ImageBuffer<Luma<u16>, Vec<u16>> {
        image::ImageBuffer::from_fn(self.width, self.height, |x, y| {
            Luma([(self.get(x, y) * 65535.0).round() as u16])
        })
    }
}

/// For each output index, the covered source indices with overlap lengths.
fn axis_weights(src: u32, dst: u32) -> Vec<Vec<(u32, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let start = o as f64 * scale;
            let end = (o + 1) as f64 * scale;
            let first = start.floor() as u32;
            let last = (end.ceil() as u32).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (end.min(s as f64 + 1.0) - start.max(s as f64)).max(0.0);
                    (overlap > 1e-12).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::ImageDecode(e.to_string()))?;
    Ok(img.to_rgb8())
}

/// Decode a mask image; any channel layout is reduced to luma first.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::ImageDecode(e.to_string()))?;
    Ok(BinaryMask::from_gray(&img.to_luma8()))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::ImageDecode(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::ImageDecode(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = encode_png_rgb(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

//! Region-focused embeddings and the vector math used to combine them.
//!
//! The central operation is [`project_away`]: given a background-focused
//! embedding `b` and a foreground-focused embedding `f`, it returns the
//! component of `b` orthogonal to `f`,
//!
//! ```text
//! b - ((b · f) / ‖f‖) (f / ‖f‖)
//! ```
//!
//! Inputs arrive as `f32` (what encoders emit) but every reduction runs in
//! `f64`; results are rounded back to `f32` once at the end.

mod cache;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use cache::{read_embeddings, write_embeddings, CACHE_MAGIC};

/// Norms at or below this are treated as degenerate.
pub const EPS_NORM: f64 = 1e-8;

/// The encoder output space an embedding lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmbeddingSpace {
    /// Region-aware encoder output (CLIP-L/14 width).
    #[serde(rename = "ALPHA_CLIP_768")]
    AlphaClip768,
    /// Image-prompt adapter encoder space (ViT-H/14 width).
    #[serde(rename = "ADAPTER_1024")]
    Adapter1024,
}

impl EmbeddingSpace {
    pub const fn dim(self) -> usize {
        match self {
            EmbeddingSpace::AlphaClip768 => 768,
            EmbeddingSpace::Adapter1024 => 1024,
        }
    }

    pub(crate) const fn tag(self) -> u16 {
        match self {
            EmbeddingSpace::AlphaClip768 => 0,
            EmbeddingSpace::Adapter1024 => 1,
        }
    }

    pub(crate) fn from_tag(tag: u16) -> Option<Self> {
        match tag {
            0 => Some(EmbeddingSpace::AlphaClip768),
            1 => Some(EmbeddingSpace::Adapter1024),
            _ => None,
        }
    }
}

/// A fixed-width, finite embedding vector tagged with its space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    space: EmbeddingSpace,
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(space: EmbeddingSpace, values: Vec<f32>) -> Result<Self> {
        if values.len() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self { space, values })
    }

    /// Build from `f64` values, rounding to `f32`.
    pub fn from_f64(space: EmbeddingSpace, values: &[f64]) -> Result<Self> {
        Self::new(space, values.iter().map(|&v| v as f32).collect())
    }

    pub fn space(&self) -> EmbeddingSpace {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        self.check_space(other)?;
        Ok(dot(&self.values, &other.values))
    }

    /// Unit-norm copy. Fails on a degenerate vector.
    pub fn normalized(&self) -> Result<Embedding> {
        let n = self.norm();
        if n <= EPS_NORM {
            return Err(Error::DegenerateForeground {
                norm: n,
                eps: EPS_NORM,
            });
        }
        let values = self.values.iter().map(|&v| (v as f64 / n) as f32).collect();
        Ok(Embedding {
            space: self.space,
            values,
        })
    }

    /// Copy rescaled to the given norm.
    pub fn rescaled_to(&self, target_norm: f64) -> Result<Embedding> {
        let unit = self.normalized()?;
        let values = unit
            .values
            .iter()
            .map(|&v| (v as f64 * target_norm) as f32)
            .collect();
        Embedding::new(self.space, values)
    }

    fn check_space(&self, other: &Embedding) -> Result<()> {
        if self.space != other.space {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Component of `background` orthogonal to `foreground`, on raw slices.
///
/// The result is not renormalized.
pub fn reject(background: &[f32], foreground: &[f32]) -> Result<Vec<f32>> {
    if background.len() != foreground.len() {
        return Err(Error::DimensionMismatch {
            expected: background.len(),
            actual: foreground.len(),
        });
    }
    let f_norm = norm(foreground);
    if !(f_norm > EPS_NORM) {
        return Err(Error::DegenerateForeground {
            norm: f_norm,
            eps: EPS_NORM,
        });
    }
    let coeff = dot(background, foreground) / f_norm;
    Ok(background
        .iter()
        .zip(foreground)
        .map(|(&b, &f)| (b as f64 - coeff * (f as f64 / f_norm)) as f32)
        .collect())
}

/// Cosine similarity on raw slices, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    let smallest = na.min(nb);
    if !(smallest > EPS_NORM) {
        return Err(Error::DegenerateForeground {
            norm: smallest,
            eps: EPS_NORM,
        });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Remove the foreground direction from a background-focused embedding.
pub fn project_away(background: &Embedding, foreground: &Embedding) -> Result<Embedding> {
    background.check_space(foreground)?;
    let values = reject(&background.values, &foreground.values)?;
    Embedding::new(background.space, values)
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    a.check_space(b)?;
    cosine(&a.values, &b.values)
}

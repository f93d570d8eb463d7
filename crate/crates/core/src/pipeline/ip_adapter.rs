//! The image-prompt adapter's token projection: a linear map from one
//! 1024-d image embedding to `num_tokens` cross-attention tokens followed by
//! layer normalization over each token.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingSpace};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Image-prompt tokens ready for the UNet's decoupled cross-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub num_tokens: usize,
    pub dim: usize,
    /// Row-major `num_tokens x dim`.
    pub values: Vec<f32>,
}

impl PromptTokens {
    pub fn empty() -> Self {
        Self {
            num_tokens: 0,
            dim: 0,
            values: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.num_tokens == 0
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePromptProjection {
    num_tokens: usize,
    token_dim: usize,
    /// Row-major `[num_tokens * token_dim][1024]`.
    weight: Vec<f32>,
    bias: Vec<f32>,
    norm_weight: Vec<f32>,
    norm_bias: Vec<f32>,
}

impl ImagePromptProjection {
    pub fn new(
        num_tokens: usize,
        token_dim: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
        norm_weight: Vec<f32>,
        norm_bias: Vec<f32>,
    ) -> Result<Self> {
        let out = num_tokens * token_dim;
        if weight.len() != out * 1024 || bias.len() != out {
            return Err(Error::LayerShapeMismatch(format!(
                "token projection expects [{out}, 1024] weight and [{out}] bias"
            )));
        }
        if norm_weight.len() != token_dim || norm_bias.len() != token_dim {
            return Err(Error::LayerShapeMismatch(format!(
                "token norm expects [{token_dim}] parameters"
            )));
        }
        Ok(Self {
            num_tokens,
            token_dim,
            weight,
            bias,
            norm_weight,
            norm_bias,
        })
    }

    /// Seeded random projection for mock mode (4 tokens of width 768).
    pub fn random(seed: u64) -> Self {
        let (n, d) = (4, 768);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (1024f64).sqrt();
        let weight = (0..n * d * 1024)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        Self {
            num_tokens: n,
            token_dim: d,
            weight,
            bias: vec![0.0; n * d],
            norm_weight: vec![1.0; d],
            norm_bias: vec![0.0; d],
        }
    }

    /// Load `proj.weight`, `proj.bias`, `norm.weight` and `norm.bias` from a
    /// safetensors file, with or without an `image_proj.` prefix. `num_tokens`
    /// is inferred from the weight shape and the norm width.
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::WeightsNotLoaded(format!("{}: {e}", path.display())))?;
        let fetch = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let view = st
                .tensor(&format!("image_proj.{name}"))
                .or_else(|_| st.tensor(name))
                .map_err(|_| Error::WeightsNotLoaded(format!("missing tensor {name}")))?;
            let data = view.data();
            let values = match view.dtype() {
                Dtype::F32 => data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                Dtype::F16 => data
                    .chunks_exact(2)
                    .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
                Dtype::BF16 => data
                    .chunks_exact(2)
                    .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
                other => {
                    return Err(Error::WeightsNotLoaded(format!(
                        "unsupported dtype {other:?} for {name}"
                    )))
                }
            };
            Ok((view.shape().to_vec(), values))
        };
        let (wshape, weight) = fetch("proj.weight")?;
        let (_, bias) = fetch("proj.bias")?;
        let (nshape, norm_weight) = fetch("norm.weight")?;
        let (_, norm_bias) = fetch("norm.bias")?;
        if wshape.len() != 2 || wshape[1] != 1024 || nshape.len() != 1 || nshape[0] == 0 {
            return Err(Error::LayerShapeMismatch(format!(
                "unexpected token projection shapes {wshape:?} / {nshape:?}"
            )));
        }
        let token_dim = nshape[0];
        if wshape[0] % token_dim != 0 {
            return Err(Error::LayerShapeMismatch(format!(
                "projection width {} is not a multiple of token width {token_dim}",
                wshape[0]
            )));
        }
        Self::new(
            wshape[0] / token_dim,
            token_dim,
            weight,
            bias,
            norm_weight,
            norm_bias,
        )
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn project(&self, e: &Embedding) -> Result<PromptTokens> {
        if e.space() != EmbeddingSpace::Adapter1024 {
            return Err(Error::DimensionMismatch {
                expected: 1024,
                actual: e.dim(),
            });
        }
        let x = e.values();
        let out = self.num_tokens * self.token_dim;
        let mut flat = vec![0.0f64; out];
        for (o, slot) in flat.iter_mut().enumerate() {
            let row = &self.weight[o * 1024..(o + 1) * 1024];
            *slot = self.bias[o] as f64
                + row.iter().zip(x).map(|(&w, &v)| w as f64 * v as f64).sum::<f64>();
        }
        let mut values = Vec::with_capacity(out);
        for t in flat.chunks_exact(self.token_dim) {
            let d = self.token_dim as f64;
            let mean = t.iter().sum::<f64>() / d;
            let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for (i, v) in t.iter().enumerate() {
                values.push(
                    ((v - mean) * r * self.norm_weight[i] as f64 + self.norm_bias[i] as f64) as f32,
                );
            }
        }
        Ok(PromptTokens {
            num_tokens: self.num_tokens,
            dim: self.token_dim,
            values,
        })
    }
}

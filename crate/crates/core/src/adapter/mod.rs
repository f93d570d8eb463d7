//! Projection from the region encoder's 768-d space into the 1024-d space the
//! image-prompt adapter was trained against.
//!
//! The network is fixed at seven affine layers:
//!
//! | layer | affine       | then              |
//! |-------|--------------|-------------------|
//! | 1     | 768 → 768    | LayerNorm + GELU  |
//! | 2     | 768 → 768    | LayerNorm + GELU  |
//! | 3     | 768 → 1024   | LayerNorm + GELU  |
//! | 4     | 1024 → 1024  | LayerNorm + GELU  |
//! | 5     | 1024 → 1024  | LayerNorm + GELU  |
//! | 6     | 1024 → 1024  | LayerNorm + GELU  |
//! | 7     | 1024 → 1024  | none              |

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod train;

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingSpace};
use crate::{Error, Result};

pub use checkpoint::{load_adapter, save_adapter};
pub use mlp::Mlp;
pub use train::{
    train_projection_adapter, write_loss_csv, AdapterTrainer, AdapterTrainingConfig, ImageDataset,
    PairSource, TrainingRun,
};

/// Input width followed by each layer's output width.
pub const ADAPTER_WIDTHS: [usize; 8] = [768, 768, 768, 1024, 1024, 1024, 1024, 1024];

/// One row of the architecture table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub layer_norm: bool,
    pub activation: Option<String>,
}

pub fn layer_table(mlp: &Mlp) -> Vec<LayerSpec> {
    mlp.layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerSpec {
            index: i + 1,
            in_features: l.linear.in_dim(),
            out_features: l.linear.out_dim(),
            layer_norm: l.norm.is_some(),
            activation: l.norm.as_ref().map(|_| "gelu".to_string()),
        })
        .collect()
}

pub fn expected_layer_table() -> Vec<LayerSpec> {
    let n = ADAPTER_WIDTHS.len() - 1;
    (0..n)
        .map(|i| LayerSpec {
            index: i + 1,
            in_features: ADAPTER_WIDTHS[i],
            out_features: ADAPTER_WIDTHS[i + 1],
            layer_norm: i + 1 < n,
            activation: (i + 1 < n).then(|| "gelu".to_string()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionAdapter {
    mlp: Mlp,
}

impl ProjectionAdapter {
    /// Freshly initialized adapter.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            mlp: Mlp::new(&ADAPTER_WIDTHS, &mut rng),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        let table = layer_table(&mlp);
        if table != expected_layer_table() {
            return Err(Error::LayerShapeMismatch(format!(
                "widths {:?}, expected {:?}",
                mlp.widths(),
                ADAPTER_WIDTHS
            )));
        }
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn into_mlp(self) -> Mlp {
        self.mlp
    }

    pub fn layer_table(&self) -> Vec<LayerSpec> {
        layer_table(&self.mlp)
    }

    pub fn forward(&self, e: &Embedding) -> Result<Embedding> {
        Ok(self
            .forward_batch(std::slice::from_ref(e))?
            .pop()
            .expect("one output per input"))
    }

    pub fn forward_batch(&self, inputs: &[Embedding]) -> Result<Vec<Embedding>> {
        for e in inputs {
            if e.space() != EmbeddingSpace::AlphaClip768 {
                return Err(Error::DimensionMismatch {
                    expected: 768,
                    actual: e.dim(),
                });
            }
        }
        if !self.mlp.is_finite() {
            return Err(Error::NonFiniteParameters);
        }
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let x = DMatrix::from_fn(inputs.len(), 768, |r, c| inputs[r].values()[c] as f64);
        let y = self.mlp.forward(&x);
        y.row_iter()
            .map(|row| {
                let v: Vec<f64> = row.iter().copied().collect();
                Embedding::from_f64(EmbeddingSpace::Adapter1024, &v)
                    .map_err(|_| Error::NonFiniteParameters)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_adapter(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_adapter(path)
    }
}

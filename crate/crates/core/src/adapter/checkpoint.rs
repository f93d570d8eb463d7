//! Binary container for adapter weights and training state.
//!
//! ```text
//! magic    8 bytes  "CLAWADPT"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of JSON (CheckpointHeader)
//! payload  f64 LE values of every tensor listed in the header, in order
//! ```
//!
//! Weight matrices are stored row-major `[out][in]`. Nothing is built until
//! the header validates and the payload length matches exactly, so a
//! truncated or mismatched file never yields a partial adapter.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Layer, LayerNorm, Linear, Mlp};
use super::optim::{AdamHyper, AdamW};
use super::train::AdapterTrainingConfig;
use super::{expected_layer_table, layer_table, LayerSpec, ProjectionAdapter};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CLAWADPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    /// Batches are drawn from a per-epoch permutation; the stream index is
    /// the epoch, so the step counter fully determines the sampler position.
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub weight_decay_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub step: u64,
    pub config: AdapterTrainingConfig,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub training: Option<TrainingState>,
}

/// Everything restored from a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub mlp: Mlp,
    pub optimizer: Option<AdamW>,
    pub loss_history: Vec<f64>,
}

pub(crate) fn encode(
    mlp: &Mlp,
    training: Option<(&TrainingState, &AdamW, &[f64])>,
) -> Result<Vec<u8>> {
    let mut tensors: Vec<TensorEntry> = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    for (name, t) in mlp.tensor_names().into_iter().zip(mlp.tensors()) {
        tensors.push(TensorEntry { name, len: t.len() });
        payload.push(t);
    }
    if let Some((_, opt, losses)) = training {
        for (i, m) in opt.first_moment.iter().enumerate() {
            tensors.push(TensorEntry {
                name: format!("optimizer.m.{i}"),
                len: m.len(),
            });
            payload.push(m);
        }
        for (i, v) in opt.second_moment.iter().enumerate() {
            tensors.push(TensorEntry {
                name: format!("optimizer.v.{i}"),
                len: v.len(),
            });
            payload.push(v);
        }
        tensors.push(TensorEntry {
            name: "loss_history".into(),
            len: losses.len(),
        });
        payload.push(losses);
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        layers: layer_table(mlp),
        tensors,
        training: training.map(|(s, _, _)| s.clone()),
    };
    let header_json = serde_json::to_vec(&header)?;
    let total: usize = payload.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(20 + header_json.len() + total * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in payload {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::FormatVersionMismatch(
            "not an adapter checkpoint".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch(format!(
            "file version {version}, supported {FORMAT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[20..];
    if hlen > rest.len() {
        return Err(Error::FormatVersionMismatch("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..hlen])
        .map_err(|e| Error::FormatVersionMismatch(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(Error::FormatVersionMismatch(
            "header and preamble versions disagree".into(),
        ));
    }
    let payload = &rest[hlen..];
    let expected: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != expected * 8 {
        return Err(Error::FormatVersionMismatch(format!(
            "payload has {} bytes, header describes {}",
            payload.len(),
            expected * 8
        )));
    }

    // Shapes must be internally consistent before anything is allocated.
    let mut skeleton = skeleton_from_table(&header.layers)?;
    let names = skeleton.tensor_names();
    let n_params = names.len();
    if header.tensors.len() < n_params {
        return Err(Error::LayerShapeMismatch("missing parameter tensors".into()));
    }
    for ((entry, name), t) in header.tensors.iter().zip(&names).zip(skeleton.tensors()) {
        if &entry.name != name || entry.len != t.len() {
            return Err(Error::LayerShapeMismatch(format!(
                "tensor {} has {} values, layer table implies {} ({})",
                entry.name,
                entry.len,
                t.len(),
                name
            )));
        }
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in skeleton.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }

    let extra = &header.tensors[n_params..];
    let (optimizer, loss_history) = match &header.training {
        None => (None, Vec::new()),
        Some(state) => {
            let shapes: Vec<usize> = skeleton.tensors().iter().map(|t| t.len()).collect();
            if extra.len() != 2 * n_params + 1 {
                return Err(Error::LayerShapeMismatch(
                    "optimizer state does not match parameters".into(),
                ));
            }
            let mut take = |len: usize| -> Vec<f64> { (&mut values).take(len).collect() };
            let mut m = Vec::with_capacity(n_params);
            for (i, e) in extra[..n_params].iter().enumerate() {
                if e.len != shapes[i] {
                    return Err(Error::LayerShapeMismatch(format!("{} length", e.name)));
                }
                m.push(take(e.len));
            }
            let mut v = Vec::with_capacity(n_params);
            for (i, e) in extra[n_params..2 * n_params].iter().enumerate() {
                if e.len != shapes[i] {
                    return Err(Error::LayerShapeMismatch(format!("{} length", e.name)));
                }
                v.push(take(e.len));
            }
            let losses = take(extra[2 * n_params].len);
            let opt = AdamW {
                hyper: state.optimizer.hyper,
                step: state.optimizer.step,
                first_moment: m,
                second_moment: v,
            };
            (Some(opt), losses)
        }
    };
    if header.training.is_none() && !extra.is_empty() {
        return Err(Error::FormatVersionMismatch(
            "unexpected tensors without training state".into(),
        ));
    }

    Ok(Checkpoint {
        header,
        mlp: skeleton,
        optimizer,
        loss_history,
    })
}

fn skeleton_from_table(table: &[LayerSpec]) -> Result<Mlp> {
    if table.is_empty() {
        return Err(Error::LayerShapeMismatch("empty layer table".into()));
    }
    let mut layers = Vec::with_capacity(table.len());
    for (i, spec) in table.iter().enumerate() {
        if i > 0 && table[i - 1].out_features != spec.in_features {
            return Err(Error::LayerShapeMismatch(format!(
                "layer {} input {} does not follow previous output {}",
                spec.index,
                spec.in_features,
                table[i - 1].out_features
            )));
        }
        layers.push(Layer {
            linear: Linear::zeros(spec.in_features, spec.out_features),
            norm: spec.layer_norm.then(|| LayerNorm::new(spec.out_features)),
        });
    }
    Ok(Mlp { layers })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_adapter(adapter: &ProjectionAdapter, path: &Path) -> Result<()> {
    write_atomic(path, &encode(adapter.mlp(), None)?)
}

/// Load adapter weights from a weights file or a full training checkpoint.
pub fn load_adapter(path: &Path) -> Result<ProjectionAdapter> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.header.layers != expected_layer_table() {
        return Err(Error::LayerShapeMismatch(format!(
            "file describes widths {:?}",
            ckpt.mlp.widths()
        )));
    }
    ProjectionAdapter::from_mlp(ckpt.mlp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedding, EmbeddingSpace};
    use rand::{Rng, SeedableRng};

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        let a = ProjectionAdapter::new(11);
        a.save(&path).unwrap();
        let b = ProjectionAdapter::load(&path).unwrap();
        assert_eq!(a, b);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let e = Embedding::new(
                EmbeddingSpace::AlphaClip768,
                (0..768).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
            )
            .unwrap();
            assert_eq!(a.forward(&e).unwrap(), b.forward(&e).unwrap());
        }
    }

    #[test]
    fn wrong_widths_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.bin");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[768, 512, 1024], &mut rng);
        write_atomic(&path, &encode(&mlp, None).unwrap()).unwrap();
        assert!(matches!(
            load_adapter(&path),
            Err(Error::LayerShapeMismatch(_))
        ));
    }

    #[test]
    fn truncation_never_loads() {
        let a = ProjectionAdapter::new(1);
        let bytes = encode(a.mlp(), None).unwrap();
        for cut in [0, 7, 19, 25, 200, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::FormatVersionMismatch(_)),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn future_version_rejected() {
        let a = ProjectionAdapter::new(1);
        let mut bytes = encode(a.mlp(), None).unwrap();
        bytes[8] = 2;
        assert!(matches!(decode(&bytes), Err(Error::FormatVersionMismatch(_))));
    }

    #[test]
    fn tampered_tensor_length_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 4, 2], &mut rng);
        let bytes = encode(&mlp, None).unwrap();
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        header.tensors[0].len -= 1;
        header.tensors[1].len += 1;
        let hj = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
        out.extend_from_slice(&hj);
        out.extend_from_slice(&bytes[20 + hlen..]);
        assert!(matches!(decode(&out), Err(Error::LayerShapeMismatch(_))));
    }
}

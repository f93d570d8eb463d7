//! Embedding cache files.
//!
//! Layout: 4-byte magic `EMB1`, little-endian `u16` space tag, `u16` reserved
//! (zero), then one or more embeddings of that space as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use super::{Embedding, EmbeddingSpace};
use crate::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 8;

pub fn encode(space: EmbeddingSpace, embeddings: &[Embedding]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + embeddings.len() * space.dim() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&space.tag().to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for e in embeddings {
        if e.space() != space {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                actual: e.dim(),
            });
        }
        for v in e.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(EmbeddingSpace, Vec<Embedding>)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::FormatVersionMismatch(
            "missing EMB1 header".to_string(),
        ));
    }
    let tag = u16::from_le_bytes([bytes[4], bytes[5]]);
    let space = EmbeddingSpace::from_tag(tag)
        .ok_or_else(|| Error::FormatVersionMismatch(format!("unknown space tag {tag}")))?;
    let body = &bytes[HEADER_LEN..];
    let stride = space.dim() * 4;
    if body.len() % stride != 0 {
        return Err(Error::FormatVersionMismatch(format!(
            "payload of {} bytes is not a multiple of {stride}",
            body.len()
        )));
    }
    let embeddings = body
        .chunks_exact(stride)
        .map(|chunk| {
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Embedding::new(space, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((space, embeddings))
}

/// Write embeddings (all of one space) to a cache file.
pub fn write_embeddings(path: &Path, space: EmbeddingSpace, embeddings: &[Embedding]) -> Result<()> {
    let bytes = encode(space, embeddings)?;
    let tmp = path.with_extension("emb.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingSpace, Vec<Embedding>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let e = Embedding::new(EmbeddingSpace::Adapter1024, vec![1.5; 1024]).unwrap();
        let bytes = encode(EmbeddingSpace::Adapter1024, &[e]).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes.len(), 8 + 4096);
        assert_eq!(&bytes[8..12], &1.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_rejected() {
        let e = Embedding::new(EmbeddingSpace::AlphaClip768, vec![0.25; 768]).unwrap();
        let bytes = encode(EmbeddingSpace::AlphaClip768, &[e]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"EMB2\0\0\0\0").is_err());
        assert!(decode(b"EMB1\x07\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(seed in any::<u64>(), count in 0usize..4) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let embs: Vec<_> = (0..count)
                .map(|_| Embedding::new(
                    EmbeddingSpace::AlphaClip768,
                    (0..768).map(|_| rng.random_range(-10.0f32..10.0)).collect(),
                ).unwrap())
                .collect();
            let bytes = encode(EmbeddingSpace::AlphaClip768, &embs).unwrap();
            let (space, back) = decode(&bytes).unwrap();
            prop_assert_eq!(space, EmbeddingSpace::AlphaClip768);
            prop_assert_eq!(back, embs);
        }
    }
}

//! Object removal by background-focused embedding projection.
//!
//! The crate is split along the removal workflow:
//!
//! * [`embedding`]: vector math on region-focused embeddings, including the
//!   orthogonal rejection that strips the foreground direction from a
//!   background-focused embedding, and the on-disk embedding cache format.
//! * [`adapter`]: the 7-layer MLP that maps region-encoder embeddings into
//!   the image-prompt adapter's encoder space, with its training loop and
//!   checkpoint container.
//! * [`encoders`]: region-aware and plain image encoder interfaces, alpha
//!   preprocessing and deterministic mock encoders.
//! * [`pipeline`]: mask preparation, final-embedding computation and the
//!   end-to-end removal call against a pluggable diffusion backend.
//! * [`eval`]: COCO ingestion and the removal/realism metrics.

pub mod adapter;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod raster;

pub use error::{Error, Result};

/// Hex-encoded SHA-256 of a byte slice. Used for weight and artifact provenance.
pub fn content_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn file_hash(path: &std::path::Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

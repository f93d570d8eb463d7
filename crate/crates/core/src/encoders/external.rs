//! Process bridge for encoders that run outside this crate (for example the
//! released Python encoders).
//!
//! Each call creates a scratch directory, writes the inputs, appends the
//! directory path to the configured command line and runs it. The command
//! must leave its result in the same directory:
//!
//! | file            | written by | contents                                  |
//! |-----------------|------------|-------------------------------------------|
//! | `request.json`  | us         | `{"kind", "resolution", "text"?}`         |
//! | `image.png`     | us         | RGB source image                          |
//! | `alpha.png`     | us         | 16-bit alpha, region encoders only        |
//! | `embedding.emb` | command    | one embedding in the `EMB1` cache format  |

use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{check_output, PlainEncoder, RegionEncoder, RegionImage, TextEncoder};
use crate::embedding::{read_embeddings, Embedding, EmbeddingSpace};
use crate::{Error, Result};

/// A command line; the scratch directory is appended as the final argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalCommand {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }

    pub(crate) fn run(&self, dir: &Path) -> std::result::Result<(), CommandFailure> {
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(dir)
            .output()
            .map_err(|e| CommandFailure {
                out_of_memory: false,
                message: format!("{}: {e}", self.program.display()),
            })?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            let lower = stderr.to_ascii_lowercase();
            return Err(CommandFailure {
                out_of_memory: lower.contains("out of memory") || lower.contains("outofmemory"),
                message: format!(
                    "{} exited with {}: {}",
                    self.program.display(),
                    output.status,
                    stderr.trim()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CommandFailure {
    pub out_of_memory: bool,
    pub message: String,
}

impl From<CommandFailure> for Error {
    fn from(f: CommandFailure) -> Self {
        Error::BackendUnavailable(f.message)
    }
}

pub(crate) fn scratch_dir() -> Result<tempfile::TempDir> {
    tempfile::Builder::new()
        .prefix("clipaway-")
        .tempdir()
        .map_err(|e| Error::io(std::env::temp_dir(), e))
}

fn write_request(dir: &Path, kind: &str, resolution: u32, text: Option<&str>) -> Result<()> {
    let req = serde_json::json!({ "kind": kind, "resolution": resolution, "text": text });
    let path = dir.join("request.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&req)?).map_err(|e| Error::io(&path, e))
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))
}

fn read_single(dir: &Path, space: EmbeddingSpace, who: &str) -> Result<Embedding> {
    let path = dir.join("embedding.emb");
    let (_, mut embs) = read_embeddings(&path)?;
    if embs.len() != 1 {
        return Err(Error::EncoderSpaceMismatch(format!(
            "{who} wrote {} embeddings, expected 1",
            embs.len()
        )));
    }
    let e = embs.pop().expect("one embedding");
    check_output(space, &e, who)?;
    Ok(e)
}

#[derive(Debug, Clone)]
pub struct ExternalRegionEncoder {
    pub id: String,
    pub command: ExternalCommand,
    pub resolution: u32,
}

impl RegionEncoder for ExternalRegionEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_resolution(&self) -> u32 {
        self.resolution
    }

    fn encode_region(&self, img: &RegionImage) -> Result<Embedding> {
        let dir = scratch_dir()?;
        write_request(dir.path(), "region", self.resolution, None)?;
        save(img.pixels(), &dir.path().join("image.png"))?;
        let alpha_path = dir.path().join("alpha.png");
        img.alpha()
            .to_gray16()
            .save(&alpha_path)
            .map_err(|e| Error::ImageDecode(e.to_string()))?;
        self.command.run(dir.path())?;
        read_single(dir.path(), EmbeddingSpace::AlphaClip768, &self.id)
    }
}

#[derive(Debug, Clone)]
pub struct ExternalPlainEncoder {
    pub id: String,
    pub command: ExternalCommand,
    pub resolution: u32,
}

impl PlainEncoder for ExternalPlainEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_resolution(&self) -> u32 {
        self.resolution
    }

    fn encode_plain(&self, pixels: &RgbImage) -> Result<Embedding> {
        let dir = scratch_dir()?;
        write_request(dir.path(), "plain", self.resolution, None)?;
        save(pixels, &dir.path().join("image.png"))?;
        self.command.run(dir.path())?;
        read_single(dir.path(), EmbeddingSpace::Adapter1024, &self.id)
    }
}

#[derive(Debug, Clone)]
pub struct ExternalTextEncoder {
    pub id: String,
    pub command: ExternalCommand,
}

impl TextEncoder for ExternalTextEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        let dir = scratch_dir()?;
        write_request(dir.path(), "text", 0, Some(text))?;
        self.command.run(dir.path())?;
        read_single(dir.path(), EmbeddingSpace::Adapter1024, &self.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_program_is_backend_unavailable() {
        let enc = ExternalPlainEncoder {
            id: "x".into(),
            command: ExternalCommand::new("/nonexistent/encoder", vec![]),
            resolution: 224,
        };
        let err = enc.encode_plain(&RgbImage::new(4, 4)).unwrap_err();
        assert!(matches!(err, Error::BackendUnavailable(_)));
    }

    #[test]
    fn shell_command_roundtrip() {
        // The command copies a pre-built embedding into place.
        let src = tempfile::tempdir().unwrap();
        let emb_path = src.path().join("fixed.emb");
        let e = Embedding::new(EmbeddingSpace::AlphaClip768, vec![0.5; 768]).unwrap();
        crate::embedding::write_embeddings(&emb_path, EmbeddingSpace::AlphaClip768, &[e.clone()])
            .unwrap();
        let enc = ExternalRegionEncoder {
            id: "sh".into(),
            command: ExternalCommand::new(
                "sh",
                vec![
                    "-c".into(),
                    format!(
                        "test -f \"$0/alpha.png\" && cp {} \"$0/embedding.emb\"",
                        emb_path.display()
                    ),
                ],
            ),
            resolution: 224,
        };
        let out = enc
            .encode_region(&RegionImage::full(RgbImage::new(8, 8)))
            .unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn wrong_space_is_reported() {
        let src = tempfile::tempdir().unwrap();
        let emb_path = src.path().join("fixed.emb");
        let e = Embedding::new(EmbeddingSpace::AlphaClip768, vec![0.5; 768]).unwrap();
        crate::embedding::write_embeddings(&emb_path, EmbeddingSpace::AlphaClip768, &[e]).unwrap();
        let enc = ExternalPlainEncoder {
            id: "sh".into(),
            command: ExternalCommand::new(
                "sh",
                vec!["-c".into(), format!("cp {} \"$0/embedding.emb\"", emb_path.display())],
            ),
            resolution: 224,
        };
        assert!(matches!(
            enc.encode_plain(&RgbImage::new(8, 8)),
            Err(Error::EncoderSpaceMismatch(_))
        ));
    }
}

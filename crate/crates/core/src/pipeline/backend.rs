//! Mask-conditioned diffusion inpainting backends.
//!
//! A backend receives the source image, the dilated mask and its latent
//! downscaling, seeded initial noise, and the conditioning (image-prompt
//! tokens plus text prompt), and returns an image of the source dimensions.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ip_adapter::PromptTokens;
use super::mask::upscale_mask;
use crate::encoders::external::{scratch_dir, ExternalCommand};
use crate::raster::BinaryMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    SdInpaint,
    BlendedLatent,
    Unipaint,
}

impl BackendKind {
    pub const ALL: [BackendKind; 3] = [
        BackendKind::SdInpaint,
        BackendKind::BlendedLatent,
        BackendKind::Unipaint,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            BackendKind::SdInpaint => "sd",
            BackendKind::BlendedLatent => "blended",
            BackendKind::Unipaint => "unipaint",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sd" | "sd_inpaint" | "sd-inpaint" => Ok(BackendKind::SdInpaint),
            "blended" | "blended_latent" | "blended-latent" => Ok(BackendKind::BlendedLatent),
            "unipaint" => Ok(BackendKind::Unipaint),
            other => Err(Error::InvalidRequest(format!("unknown backend '{other}'"))),
        }
    }
}

/// Latent tensor, channel-major `[channels][height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Latent {
    /// Standard normal noise from a seeded stream.
    pub fn gaussian(seed: u64, channels: usize, width: u32, height: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = channels * (width * height) as usize;
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        Self {
            channels,
            width,
            height,
            data,
        }
    }

    pub fn get(&self, c: usize, x: u32, y: u32) -> f32 {
        self.data[c * (self.width * self.height) as usize + (y * self.width + x) as usize]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Image-prompt conditioning with an optional spatial gate at latent
/// resolution. Without a gate every latent position attends to the same
/// tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub tokens: PromptTokens,
    pub ip_adapter_scale: f32,
    pub text_prompt: String,
    pub gate: Option<SpatialGate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGate {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl Conditioning {
    /// Gate value at a latent position (1 when ungated).
    pub fn gate_at(&self, x: u32, y: u32) -> f32 {
        match &self.gate {
            None => 1.0,
            Some(g) => g.values[(y * g.width + x) as usize],
        }
    }

    /// Tokens seen by the attention at latent position `(x, y)`.
    pub fn tokens_at(&self, x: u32, y: u32) -> Vec<f32> {
        let g = self.gate_at(x, y);
        self.tokens.values.iter().map(|v| v * g).collect()
    }
}

/// Restrict the image-prompt tokens to the masked latent region: the
/// tokens reaching latent position `p` are `m[p] * tokens`.
pub fn unipaint_condition(
    backend: BackendKind,
    tokens: PromptTokens,
    latent_mask: &BinaryMask,
    ip_adapter_scale: f32,
    text_prompt: &str,
) -> Result<Conditioning> {
    if backend != BackendKind::Unipaint {
        return Err(Error::InvalidRequest(format!(
            "masked token conditioning requires the unipaint backend, got {backend}"
        )));
    }
    let values = latent_mask
        .as_slice()
        .iter()
        .map(|&m| if m { 1.0 } else { 0.0 })
        .collect();
    Ok(Conditioning {
        tokens,
        ip_adapter_scale,
        text_prompt: text_prompt.to_string(),
        gate: Some(SpatialGate {
            width: latent_mask.width(),
            height: latent_mask.height(),
            values,
        }),
    })
}

pub struct BackendInput<'a> {
    pub image: &'a RgbImage,
    /// Dilated mask at pixel resolution.
    pub mask: &'a BinaryMask,
    /// Mask max-pooled to latent resolution.
    pub latent_mask: &'a BinaryMask,
    pub noise: &'a Latent,
    pub conditioning: &'a Conditioning,
    pub steps: u32,
    pub guidance_scale: f32,
}

pub trait DiffusionBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn id(&self) -> &str;
    fn latent_downscale(&self) -> u32 {
        8
    }
    fn latent_channels(&self) -> usize {
        4
    }
    fn inpaint(&self, input: &BackendInput<'_>) -> Result<RgbImage>;
}

/// Deterministic backend that paints the masked latent blocks with a flat
/// colour derived from the first three conditioning values, dithered by the
/// initial noise. Unmasked pixels come back off by one level to mimic an
/// autoencoder round trip.
#[derive(Debug, Clone)]
pub struct MockBackend {
    kind: BackendKind,
    id: String,
}

impl MockBackend {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            id: format!("mock-{kind}"),
        }
    }

    pub fn base_color(conditioning: &Conditioning) -> [f32; 3] {
        if conditioning.tokens.is_empty() {
            return [128.0; 3];
        }
        let s = conditioning.ip_adapter_scale;
        let mut c = [0.0f32; 3];
        for (i, slot) in c.iter_mut().enumerate() {
            let v = conditioning.tokens.values[i] * s;
            *slot = 255.0 / (1.0 + (-v).exp());
        }
        c
    }
}

impl DiffusionBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        self.kind
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn inpaint(&self, input: &BackendInput<'_>) -> Result<RgbImage> {
        let (w, h) = input.image.dimensions();
        let f = self.latent_downscale();
        let region = upscale_mask(input.latent_mask, f, w, h);
        let base = Self::base_color(input.conditioning);
        Ok(RgbImage::from_fn(w, h, |x, y| {
            if region.get(x, y) {
                let (lx, ly) = (x / f, y / f);
                let gate = input.conditioning.gate_at(lx, ly);
                let dither = 4.0 * input.noise.get(0, lx, ly);
                let px = base.map(|b| (gate * b + (1.0 - gate) * 128.0 + dither).clamp(0.0, 255.0) as u8);
                Rgb(px)
            } else {
                let p = input.image.get_pixel(x, y);
                Rgb(p.0.map(|v| if v == 255 { 254 } else { v + 1 }))
            }
        }))
    }
}

/// Returns the source untouched. A no-op removal, used as a metrics tripwire.
#[derive(Debug, Clone)]
pub struct IdentityBackend {
    kind: BackendKind,
}

impl IdentityBackend {
    pub fn new(kind: BackendKind) -> Self {
        Self { kind }
    }
}

impl DiffusionBackend for IdentityBackend {
    fn kind(&self) -> BackendKind {
        self.kind
    }

    fn id(&self) -> &str {
        "identity"
    }

    fn inpaint(&self, input: &BackendInput<'_>) -> Result<RgbImage> {
        Ok(input.image.clone())
    }
}

/// Runs an out-of-process inpainting implementation.
///
/// The scratch directory holds `request.json`, `image.png`, `mask.png`,
/// `latent_mask.png`, `noise.f32` (channel-major little-endian), `tokens.f32`
/// (row-major little-endian) and, for gated conditioning, `gate.f32`. The
/// command must write `output.png` with the source dimensions.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub kind: BackendKind,
    pub id: String,
    pub command: ExternalCommand,
}

fn write_f32(path: &std::path::Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl DiffusionBackend for ExternalBackend {
    fn kind(&self) -> BackendKind {
        self.kind
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn inpaint(&self, input: &BackendInput<'_>) -> Result<RgbImage> {
        let dir = scratch_dir()?;
        let p = dir.path();
        let (w, h) = input.image.dimensions();
        let c = input.conditioning;
        let request = serde_json::json!({
            "backend": self.kind,
            "width": w,
            "height": h,
            "latent": {
                "channels": input.noise.channels,
                "width": input.noise.width,
                "height": input.noise.height,
            },
            "tokens": { "count": c.tokens.num_tokens, "dim": c.tokens.dim },
            "gated": c.gate.is_some(),
            "ip_adapter_scale": c.ip_adapter_scale,
            "text_prompt": c.text_prompt,
            "steps": input.steps,
            "guidance_scale": input.guidance_scale,
        });
        std::fs::write(p.join("request.json"), serde_json::to_vec_pretty(&request)?)
            .map_err(|e| Error::io(p, e))?;
        let save_err = |e: image::ImageError| Error::ImageDecode(e.to_string());
        input.image.save(p.join("image.png")).map_err(save_err)?;
        input.mask.to_gray().save(p.join("mask.png")).map_err(save_err)?;
        input
            .latent_mask
            .to_gray()
            .save(p.join("latent_mask.png"))
            .map_err(save_err)?;
        write_f32(&p.join("noise.f32"), &input.noise.data)?;
        write_f32(&p.join("tokens.f32"), &c.tokens.values)?;
        if let Some(g) = &c.gate {
            write_f32(&p.join("gate.f32"), &g.values)?;
        }
        if let Err(failure) = self.command.run(p) {
            if failure.out_of_memory {
                return Err(Error::OutOfMemory {
                    width: w,
                    height: h,
                });
            }
            return Err(failure.into());
        }
        let out = crate::raster::load_rgb(&p.join("output.png"))?;
        if out.dimensions() != (w, h) {
            return Err(Error::BackendUnavailable(format!(
                "{} returned {:?}, expected {:?}",
                self.id,
                out.dimensions(),
                (w, h)
            )));
        }
        Ok(out)
    }
}

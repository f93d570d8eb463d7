//! End-to-end object removal.
//!
//! The request flow is: dilate the mask, encode the image twice with the
//! region encoder (focus on the mask, then on its complement), map both
//! embeddings through the projection adapter, reject the foreground
//! direction from the background embedding, project the result to
//! image-prompt tokens, and hand everything to a mask-aware diffusion
//! backend. With `composite_unmasked` the generated pixels are only kept
//! inside the dilated mask.
//!
//! [`RemovalPipeline::prepare`] and [`RemovalPipeline::generate`] split the
//! work so the embedding stage of one request can overlap the diffusion
//! stage of another.

pub mod backend;
pub mod ip_adapter;
pub mod mask;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::adapter::ProjectionAdapter;
use crate::embedding::{cosine_similarity, project_away, Embedding};
use crate::encoders::{preprocess_alpha, resize_square, RegionEncoder, RegionImage};
use crate::raster::BinaryMask;
use crate::{Error, Result};

pub use backend::{
    unipaint_condition, BackendInput, BackendKind, Conditioning, DiffusionBackend,
    ExternalBackend, IdentityBackend, Latent, MockBackend, SpatialGate,
};
pub use ip_adapter::{ImagePromptProjection, PromptTokens};
pub use mask::{dilate_mask, downscale_mask, upscale_mask};

/// Largest tolerated |cos(e_final, e_fg)| before a warning is attached.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-4;

/// Relative norm below which the rejected embedding counts as vanished.
pub const VANISHING_RATIO: f64 = 1e-6;

/// Which embedding feeds the image-prompt branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Background embedding with the foreground direction removed.
    #[default]
    Clipaway,
    /// Raw background-focused embedding, no rejection.
    Background,
    /// No image prompt; the bare inpainting baseline.
    Unconditioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemovalOptions {
    pub dilation_kernel: u32,
    pub backend: BackendKind,
    pub steps: u32,
    pub guidance_scale: f32,
    pub ip_adapter_scale: f32,
    pub seed: u64,
    pub composite_unmasked: bool,
    pub conditioning: ConditioningMode,
    /// Rescale e_final to the norm of e_bg before token projection.
    pub rescale_final: bool,
    pub text_prompt: String,
}

impl Default for RemovalOptions {
    fn default() -> Self {
        Self {
            dilation_kernel: 5,
            backend: BackendKind::SdInpaint,
            steps: 50,
            guidance_scale: 7.5,
            ip_adapter_scale: 1.0,
            seed: 0,
            composite_unmasked: true,
            conditioning: ConditioningMode::Clipaway,
            rescale_final: false,
            text_prompt: String::new(),
        }
    }
}

impl RemovalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_kernel == 0 || self.dilation_kernel % 2 == 0 {
            return Err(Error::InvalidRequest(format!(
                "dilation_kernel must be odd and >= 1, got {}",
                self.dilation_kernel
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidRequest("steps must be >= 1".into()));
        }
        if !self.guidance_scale.is_finite() || !self.ip_adapter_scale.is_finite() {
            return Err(Error::InvalidRequest("scales must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RemovalRequest {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub options: RemovalOptions,
}

impl RemovalRequest {
    pub fn new(image: RgbImage, mask: BinaryMask) -> Self {
        Self {
            image,
            mask,
            options: RemovalOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.dimensions() != self.image.dimensions() {
            return Err(Error::MaskShapeMismatch {
                mask: self.mask.dimensions(),
                image: self.image.dimensions(),
            });
        }
        self.options.validate()
    }
}

/// The three embeddings of one request.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalEmbedding {
    pub e_fg: Embedding,
    pub e_bg: Embedding,
    pub e_final: Embedding,
    pub cos_final_fg: f64,
    pub warnings: Vec<String>,
}

/// Encode foreground and background focus, project both through the
/// adapter and reject the foreground direction. `mask` should already be
/// dilated.
pub fn compute_final_embedding(
    image: &RgbImage,
    mask: &BinaryMask,
    encoder: &dyn RegionEncoder,
    adapter: &ProjectionAdapter,
) -> Result<FinalEmbedding> {
    if mask.dimensions() != image.dimensions() {
        return Err(Error::MaskShapeMismatch {
            mask: mask.dimensions(),
            image: image.dimensions(),
        });
    }
    let res = encoder.input_resolution();
    let pixels = resize_square(image, res);
    let fg_alpha = preprocess_alpha(mask, res, res);
    let bg_alpha = mask.inverted().to_alpha().resample_area(res, res);
    let mut warnings = fg_alpha.warnings;
    if mask.count() == mask.as_slice().len() {
        warnings.push("full_mask".to_string());
    }

    let fg = encoder.encode_region(&RegionImage::new(pixels.clone(), fg_alpha.alpha)?)?;
    let bg = encoder.encode_region(&RegionImage::new(pixels, bg_alpha)?)?;
    let mut projected = adapter.forward_batch(&[fg, bg])?;
    let e_bg = projected.pop().expect("two outputs");
    let e_fg = projected.pop().expect("two outputs");

    let e_final = project_away(&e_bg, &e_fg)?;
    let floor = VANISHING_RATIO * e_bg.norm();
    if e_final.norm() <= floor {
        return Err(Error::DegenerateForeground {
            norm: e_final.norm(),
            eps: floor,
        });
    }
    let cos_final_fg = cosine_similarity(&e_final, &e_fg)?;
    if cos_final_fg.abs() > ORTHOGONALITY_TOLERANCE {
        log::warn!("final embedding not orthogonal to foreground: cos = {cos_final_fg:e}");
        warnings.push("orthogonality_violation".to_string());
    }
    Ok(FinalEmbedding {
        e_fg,
        e_bg,
        e_final,
        cos_final_fg,
        warnings,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub embedding_ms: f64,
    pub diffusion_ms: f64,
    pub total_ms: f64,
}

/// JSON sidecar written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub e_fg_norm: Option<f64>,
    pub e_bg_norm: Option<f64>,
    pub e_final_norm: Option<f64>,
    pub cos_final_fg: Option<f64>,
    pub cos_final_bg: Option<f64>,
    pub dilation_kernel: u32,
    pub masked_pixels: usize,
    pub dilated_pixels: usize,
    pub latent_size: (u32, u32),
    pub backend: BackendKind,
    pub backend_id: String,
    pub region_encoder_id: String,
    /// Where the spatial token mask is applied, for gated backends.
    pub token_masking: Option<String>,
    pub warnings: Vec<String>,
    pub timing: Timing,
    pub options: RemovalOptions,
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RemovalResult {
    pub output: RgbImage,
    pub embeddings: Option<FinalEmbedding>,
    pub diagnostics: Diagnostics,
}

/// Output of the embedding stage, ready for the diffusion stage.
#[derive(Debug, Clone)]
pub struct PreparedRequest {
    request: RemovalRequest,
    dilated: BinaryMask,
    embeddings: Option<FinalEmbedding>,
    tokens: PromptTokens,
    warnings: Vec<String>,
    embedding_ms: f64,
}

impl PreparedRequest {
    pub fn request(&self) -> &RemovalRequest {
        &self.request
    }

    pub fn dilated_mask(&self) -> &BinaryMask {
        &self.dilated
    }

    pub fn embeddings(&self) -> Option<&FinalEmbedding> {
        self.embeddings.as_ref()
    }
}

/// Read-only model state shared by all requests.
#[derive(Clone)]
pub struct RemovalPipeline {
    pub region_encoder: Arc<dyn RegionEncoder>,
    pub adapter: Arc<ProjectionAdapter>,
    pub projection: Arc<ImagePromptProjection>,
    /// Weight hashes and config identifiers copied into every diagnostics record.
    pub provenance: BTreeMap<String, String>,
}

impl RemovalPipeline {
    pub fn new(
        region_encoder: Arc<dyn RegionEncoder>,
        adapter: Arc<ProjectionAdapter>,
        projection: Arc<ImagePromptProjection>,
    ) -> Self {
        Self {
            region_encoder,
            adapter,
            projection,
            provenance: BTreeMap::new(),
        }
    }

    /// Mask dilation, embeddings and token projection.
    pub fn prepare(&self, request: RemovalRequest) -> Result<PreparedRequest> {
        request.validate()?;
        let start = Instant::now();
        let opts = &request.options;
        let dilated = dilate_mask(&request.mask, opts.dilation_kernel)?;

        let (embeddings, conditioning_embedding) = match opts.conditioning {
            ConditioningMode::Unconditioned => (None, None),
            mode => {
                let fe = compute_final_embedding(
                    &request.image,
                    &dilated,
                    self.region_encoder.as_ref(),
                    &self.adapter,
                )?;
                let chosen = match mode {
                    ConditioningMode::Background => fe.e_bg.clone(),
                    _ if opts.rescale_final => fe.e_final.rescaled_to(fe.e_bg.norm())?,
                    _ => fe.e_final.clone(),
                };
                (Some(fe), Some(chosen))
            }
        };
        let tokens = match &conditioning_embedding {
            None => PromptTokens::empty(),
            Some(e) => self.projection.project(e)?,
        };
        if !tokens.is_finite() {
            return Err(Error::NonFiniteLatent("image-prompt tokens".into()));
        }
        let warnings = embeddings
            .as_ref()
            .map(|fe| fe.warnings.clone())
            .unwrap_or_default();
        Ok(PreparedRequest {
            request,
            dilated,
            embeddings,
            tokens,
            warnings,
            embedding_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Seeded noise, conditioning, backend call and compositing.
    pub fn generate(
        &self,
        prepared: PreparedRequest,
        backend: &dyn DiffusionBackend,
    ) -> Result<RemovalResult> {
        let start = Instant::now();
        let PreparedRequest {
            request,
            dilated,
            embeddings,
            tokens,
            warnings,
            embedding_ms,
        } = prepared;
        let opts = &request.options;
        if backend.kind() != opts.backend {
            return Err(Error::InvalidRequest(format!(
                "request targets {} but backend {} is {}",
                opts.backend,
                backend.id(),
                backend.kind()
            )));
        }
        let (w, h) = request.image.dimensions();
        let factor = backend.latent_downscale().max(1);
        let latent_mask = downscale_mask(&dilated, factor);

        let (conditioning, token_masking) = if opts.backend == BackendKind::Unipaint {
            let c = unipaint_condition(
                BackendKind::Unipaint,
                tokens,
                &latent_mask,
                opts.ip_adapter_scale,
                &opts.text_prompt,
            )?;
            (c, Some("projected_tokens".to_string()))
        } else {
            let c = Conditioning {
                tokens,
                ip_adapter_scale: opts.ip_adapter_scale,
                text_prompt: opts.text_prompt.clone(),
                gate: None,
            };
            (c, None)
        };

        let noise = Latent::gaussian(
            opts.seed,
            backend.latent_channels(),
            latent_mask.width(),
            latent_mask.height(),
        );
        if !noise.is_finite() {
            return Err(Error::NonFiniteLatent("initial noise".into()));
        }

        let generated = backend.inpaint(&BackendInput {
            image: &request.image,
            mask: &dilated,
            latent_mask: &latent_mask,
            noise: &noise,
            conditioning: &conditioning,
            steps: opts.steps,
            guidance_scale: opts.guidance_scale,
        })?;
        if generated.dimensions() != (w, h) {
            return Err(Error::BackendUnavailable(format!(
                "{} returned {:?} for a {:?} input",
                backend.id(),
                generated.dimensions(),
                (w, h)
            )));
        }
        let output = if opts.composite_unmasked {
            composite(&request.image, &generated, &dilated)
        } else {
            generated
        };
        let diffusion_ms = start.elapsed().as_secs_f64() * 1e3;

        let cos_final_bg = match &embeddings {
            Some(fe) => Some(cosine_similarity(&fe.e_final, &fe.e_bg)?),
            None => None,
        };
        let diagnostics = Diagnostics {
            e_fg_norm: embeddings.as_ref().map(|fe| fe.e_fg.norm()),
            e_bg_norm: embeddings.as_ref().map(|fe| fe.e_bg.norm()),
            e_final_norm: embeddings.as_ref().map(|fe| fe.e_final.norm()),
            cos_final_fg: embeddings.as_ref().map(|fe| fe.cos_final_fg),
            cos_final_bg,
            dilation_kernel: opts.dilation_kernel,
            masked_pixels: request.mask.count(),
            dilated_pixels: dilated.count(),
            latent_size: latent_mask.dimensions(),
            backend: backend.kind(),
            backend_id: backend.id().to_string(),
            region_encoder_id: self.region_encoder.id().to_string(),
            token_masking,
            warnings,
            timing: Timing {
                embedding_ms,
                diffusion_ms,
                total_ms: embedding_ms + diffusion_ms,
            },
            options: opts.clone(),
            provenance: self.provenance.clone(),
        };
        Ok(RemovalResult {
            output,
            embeddings,
            diagnostics,
        })
    }

    pub fn remove_object(
        &self,
        request: RemovalRequest,
        backend: &dyn DiffusionBackend,
    ) -> Result<RemovalResult> {
        if backend.kind() != request.options.backend {
            return Err(Error::InvalidRequest(format!(
                "request targets {} but backend is {}",
                request.options.backend,
                backend.kind()
            )));
        }
        let prepared = self.prepare(request)?;
        self.generate(prepared, backend)
    }
}

/// `mask ? generated : source`, per pixel.
pub fn composite(source: &RgbImage, generated: &RgbImage, mask: &BinaryMask) -> RgbImage {
    RgbImage::from_fn(source.width(), source.height(), |x, y| {
        if mask.get(x, y) {
            *generated.get_pixel(x, y)
        } else {
            *source.get_pixel(x, y)
        }
    })
}

//! Model construction from a [`ToolkitConfig`], either mocked or backed by
//! weight files and external processes.

use std::collections::BTreeMap;
use std::sync::Arc;

use clipaway_core::adapter::ProjectionAdapter;
use clipaway_core::encoders::external::{
    ExternalPlainEncoder, ExternalRegionEncoder, ExternalTextEncoder,
};
use clipaway_core::encoders::mock::{MockPlainEncoder, MockRegionEncoder, MockTextEncoder};
use clipaway_core::encoders::{PlainEncoder, RegionEncoder, TextEncoder};
use clipaway_core::eval::{EvalModels, ExternalFeatureExtractor, FeatureExtractor, MockFeatureExtractor};
use clipaway_core::pipeline::{
    BackendKind, DiffusionBackend, ExternalBackend, ImagePromptProjection, MockBackend,
    RemovalPipeline,
};
use clipaway_core::{Error, Result};

use crate::config::ToolkitConfig;

/// Everything a command or the service needs at runtime.
#[derive(Clone)]
pub struct Models {
    pub pipeline: RemovalPipeline,
    pub backends: BTreeMap<BackendKind, Arc<dyn DiffusionBackend>>,
    pub plain_encoder: Option<Arc<dyn PlainEncoder>>,
    pub text_encoder: Option<Arc<dyn TextEncoder>>,
    pub features: Option<Arc<dyn FeatureExtractor>>,
    /// Observed SHA-256 per weight role.
    pub weight_hashes: BTreeMap<String, String>,
    pub config_hash: String,
    pub mock: bool,
}

impl Models {
    /// Build from config; `config.mock` selects deterministic mocks for every
    /// model, seeded from `config.seed`.
    pub fn from_config(config: &ToolkitConfig) -> Result<Self> {
        config.validate()?;
        if config.mock {
            Ok(Self::mock(config))
        } else {
            Self::load(config)
        }
    }

    pub fn mock(config: &ToolkitConfig) -> Self {
        let seed = config.seed;
        let resolution = config
            .models
            .region_encoder
            .as_ref()
            .map(|e| e.resolution)
            .unwrap_or(224);
        let region: Arc<dyn RegionEncoder> =
            Arc::new(MockRegionEncoder::with_resolution(seed, resolution));
        let pipeline = RemovalPipeline::new(
            region,
            Arc::new(ProjectionAdapter::new(seed)),
            Arc::new(ImagePromptProjection::random(seed)),
        );
        let backends = BackendKind::ALL
            .iter()
            .map(|&k| (k, Arc::new(MockBackend::new(k)) as Arc<dyn DiffusionBackend>))
            .collect();
        let mut models = Self {
            pipeline,
            backends,
            plain_encoder: Some(Arc::new(MockPlainEncoder::new(seed))),
            text_encoder: Some(Arc::new(MockTextEncoder::new(seed))),
            features: Some(Arc::new(MockFeatureExtractor)),
            weight_hashes: BTreeMap::new(),
            config_hash: config.snapshot_hash(),
            mock: true,
        };
        models.stamp_provenance(config);
        models
    }

    pub fn load(config: &ToolkitConfig) -> Result<Self> {
        let weight_hashes = config.verify_weights()?;
        let m = &config.models;
        let region_cfg = m
            .region_encoder
            .as_ref()
            .ok_or_else(|| Error::WeightsNotLoaded("[models.region_encoder] is not configured".into()))?;
        let region: Arc<dyn RegionEncoder> = Arc::new(ExternalRegionEncoder {
            id: format!("external-region:{}", region_cfg.command.program.display()),
            command: region_cfg.command.clone(),
            resolution: region_cfg.resolution,
        });
        let adapter_ref = m
            .adapter
            .as_ref()
            .ok_or_else(|| Error::WeightsNotLoaded("[models.adapter] is not configured".into()))?;
        let adapter = ProjectionAdapter::load(&adapter_ref.path)?;
        let ip_ref = m
            .ip_adapter
            .as_ref()
            .ok_or_else(|| Error::WeightsNotLoaded("[models.ip_adapter] is not configured".into()))?;
        let projection = ImagePromptProjection::from_safetensors(&ip_ref.path)?;

        let mut backends: BTreeMap<BackendKind, Arc<dyn DiffusionBackend>> = BTreeMap::new();
        for (key, b) in &m.backends {
            let kind: BackendKind = key.parse()?;
            backends.insert(
                kind,
                Arc::new(ExternalBackend {
                    kind,
                    id: format!("external-{kind}"),
                    command: b.command.clone(),
                }),
            );
        }
        if backends.is_empty() {
            return Err(Error::WeightsNotLoaded("no [models.backends] configured".into()));
        }

        let plain_encoder = m.plain_encoder.as_ref().map(|e| {
            Arc::new(ExternalPlainEncoder {
                id: format!("external-plain:{}", e.command.program.display()),
                command: e.command.clone(),
                resolution: e.resolution,
            }) as Arc<dyn PlainEncoder>
        });
        let text_encoder = m.text_encoder.as_ref().map(|e| {
            Arc::new(ExternalTextEncoder {
                id: format!("external-text:{}", e.command.program.display()),
                command: e.command.clone(),
            }) as Arc<dyn TextEncoder>
        });
        let features = m.feature_extractor.as_ref().map(|f| {
            Arc::new(ExternalFeatureExtractor {
                id: format!("external-features:{}", f.command.program.display()),
                dim: f.dim,
                command: f.command.clone(),
            }) as Arc<dyn FeatureExtractor>
        });

        let mut models = Self {
            pipeline: RemovalPipeline::new(region, Arc::new(adapter), Arc::new(projection)),
            backends,
            plain_encoder,
            text_encoder,
            features,
            weight_hashes,
            config_hash: config.snapshot_hash(),
            mock: false,
        };
        models.stamp_provenance(config);
        Ok(models)
    }

    fn stamp_provenance(&mut self, config: &ToolkitConfig) {
        let p = &mut self.pipeline.provenance;
        p.insert("config_sha256".into(), self.config_hash.clone());
        p.insert("seed".into(), config.seed.to_string());
        p.insert("mock".into(), self.mock.to_string());
        p.insert("device".into(), config.device.clone());
        for (role, h) in &self.weight_hashes {
            p.insert(format!("weights.{role}"), h.clone());
        }
    }

    pub fn provenance(&self) -> &BTreeMap<String, String> {
        &self.pipeline.provenance
    }

    pub fn backend(&self, kind: BackendKind) -> Result<Arc<dyn DiffusionBackend>> {
        self.backends
            .get(&kind)
            .cloned()
            .ok_or_else(|| Error::BackendUnavailable(format!("backend {kind} is not configured")))
    }

    /// The subset needed by the benchmark; errors name the missing model.
    pub fn eval_models(&self) -> Result<EvalModels> {
        let missing = |what: &str| Error::WeightsNotLoaded(format!("[models.{what}] is required for eval"));
        Ok(EvalModels {
            pipeline: self.pipeline.clone(),
            plain_encoder: self.plain_encoder.clone().ok_or_else(|| missing("plain_encoder"))?,
            text_encoder: self.text_encoder.clone().ok_or_else(|| missing("text_encoder"))?,
            features: self.features.clone().ok_or_else(|| missing("feature_extractor"))?,
        })
    }
}

/// The two frozen encoders used to train the adapter.
pub fn training_encoders(config: &ToolkitConfig) -> Result<(Arc<dyn RegionEncoder>, Arc<dyn PlainEncoder>)> {
    if config.mock {
        return Ok((
            Arc::new(MockRegionEncoder::new(config.seed)),
            Arc::new(MockPlainEncoder::new(config.seed)),
        ));
    }
    for (role, w) in config.weight_refs() {
        if role == "region_encoder" || role == "plain_encoder" {
            let actual = clipaway_core::file_hash(&w.path)
                .map_err(|e| Error::WeightsNotLoaded(format!("{role}: {e}")))?;
            if w.sha256.as_ref().is_some_and(|h| !h.eq_ignore_ascii_case(&actual)) {
                return Err(Error::WeightsNotLoaded(format!("{role}: hash mismatch for {}", w.path.display())));
            }
        }
    }
    let m = &config.models;
    let region = m
        .region_encoder
        .as_ref()
        .ok_or_else(|| Error::WeightsNotLoaded("[models.region_encoder] is required for training".into()))?;
    let plain = m
        .plain_encoder
        .as_ref()
        .ok_or_else(|| Error::WeightsNotLoaded("[models.plain_encoder] is required for training".into()))?;
    Ok((
        Arc::new(ExternalRegionEncoder {
            id: format!("external-region:{}", region.command.program.display()),
            command: region.command.clone(),
            resolution: region.resolution,
        }),
        Arc::new(ExternalPlainEncoder {
            id: format!("external-plain:{}", plain.command.program.display()),
            command: plain.command.clone(),
            resolution: plain.resolution,
        }),
    ))
}

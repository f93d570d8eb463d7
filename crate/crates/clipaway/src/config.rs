//! TOML configuration.
//!
//! ```toml
//! seed = 0
//! mock = true
//! device = "cpu"
//!
//! [pipeline]
//! dilation_kernel = 5
//! steps = 50
//!
//! [models.adapter]
//! path = "weights/adapter.ckpt"
//! sha256 = "…"
//!
//! [models.region_encoder]
//! command = { program = "python3", args = ["tools/alpha_clip_encode.py"] }
//! resolution = 224
//!
//! [models.backends.sd]
//! command = { program = "python3", args = ["tools/sd_inpaint.py"] }
//! weights = { path = "weights/sd-inpaint.safetensors", sha256 = "…" }
//!
//! [service]
//! port = 8080
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clipaway_core::adapter::AdapterTrainingConfig;
use clipaway_core::encoders::external::ExternalCommand;
use clipaway_core::eval::CmmdConfig;
use clipaway_core::pipeline::RemovalOptions;
use clipaway_core::{content_hash, file_hash, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub seed: u64,
    /// Replace every encoder and backend with deterministic mocks.
    pub mock: bool,
    pub device: String,
    pub models: ModelsConfig,
    pub pipeline: RemovalOptions,
    pub service: ServiceConfig,
    pub eval: EvalConfig,
    pub training: TrainingConfig,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mock: false,
            device: "cpu".into(),
            models: ModelsConfig::default(),
            pipeline: RemovalOptions::default(),
            service: ServiceConfig::default(),
            eval: EvalConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

/// A weight file with an optional expected SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRef {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub command: ExternalCommand,
    #[serde(default = "default_resolution")]
    pub resolution: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightRef>,
}

fn default_resolution() -> u32 {
    224
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub command: ExternalCommand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureExtractorConfig {
    pub command: ExternalCommand,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightRef>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub region_encoder: Option<EncoderConfig>,
    pub plain_encoder: Option<EncoderConfig>,
    pub text_encoder: Option<EncoderConfig>,
    pub adapter: Option<WeightRef>,
    pub ip_adapter: Option<WeightRef>,
    pub feature_extractor: Option<FeatureExtractorConfig>,
    /// Keyed by `sd`, `blended` or `unipaint`.
    pub backends: BTreeMap<String, BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub max_upload_bytes: usize,
    pub job_retention_secs: u64,
    pub jobs_dir: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            max_upload_bytes: 32 * 1024 * 1024,
            job_retention_secs: 24 * 3600,
            jobs_dir: PathBuf::from("jobs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub annotation_file: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub limit: Option<usize>,
    pub output_dir: PathBuf,
    pub include_crowd: bool,
    pub template: String,
    pub cmmd: CmmdConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            annotation_file: None,
            image_dir: None,
            limit: None,
            output_dir: PathBuf::from("eval-out"),
            include_crowd: false,
            template: clipaway_core::eval::clip::DEFAULT_TEMPLATE.into(),
            cmmd: CmmdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub image_dir: Option<PathBuf>,
    pub output: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    #[serde(flatten)]
    pub optimizer: AdapterTrainingConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            image_dir: None,
            output: PathBuf::from("adapter.ckpt"),
            checkpoint: None,
            loss_csv: None,
            optimizer: AdapterTrainingConfig::default(),
        }
    }
}

impl ToolkitConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        Ok(cfg)
    }

    /// Interpret relative weight and data paths against the config's directory.
    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let m = &mut self.models;
        for w in [&mut m.adapter, &mut m.ip_adapter].into_iter().flatten() {
            fix(&mut w.path);
        }
        for e in [&mut m.region_encoder, &mut m.plain_encoder, &mut m.text_encoder]
            .into_iter()
            .flatten()
        {
            if let Some(w) = e.weights.as_mut() {
                fix(&mut w.path);
            }
        }
        for b in m.backends.values_mut() {
            if let Some(w) = b.weights.as_mut() {
                fix(&mut w.path);
            }
        }
        if let Some(w) = m.feature_extractor.as_mut().and_then(|f| f.weights.as_mut()) {
            fix(&mut w.path);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unserializable config: {e}\n"))
    }

    pub fn snapshot_hash(&self) -> String {
        content_hash(self.to_toml().as_bytes())
    }

    /// Range checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.pipeline
            .validate()
            .map_err(|e| Error::Config(format!("[pipeline] {e}")))?;
        if self.pipeline.dilation_kernel > 101 {
            return Err(Error::Config("[pipeline] dilation_kernel must be <= 101".into()));
        }
        if !(0.0..=50.0).contains(&self.pipeline.guidance_scale) {
            return Err(Error::Config("[pipeline] guidance_scale must be in [0, 50]".into()));
        }
        if !(0.0..=10.0).contains(&self.pipeline.ip_adapter_scale) {
            return Err(Error::Config("[pipeline] ip_adapter_scale must be in [0, 10]".into()));
        }
        if self.pipeline.steps > 1000 {
            return Err(Error::Config("[pipeline] steps must be <= 1000".into()));
        }
        if self.service.max_upload_bytes == 0 {
            return Err(Error::Config("[service] max_upload_bytes must be positive".into()));
        }
        if !(self.eval.cmmd.sigma > 0.0) {
            return Err(Error::Config("[eval.cmmd] sigma must be positive".into()));
        }
        for key in self.models.backends.keys() {
            key.parse::<clipaway_core::pipeline::BackendKind>()
                .map_err(|_| Error::Config(format!("[models.backends] unknown backend '{key}'")))?;
        }
        self.training
            .optimizer
            .validate()
            .map_err(|e| Error::Config(format!("[training] {e}")))
    }

    /// Every referenced weight file, keyed by role.
    pub fn weight_refs(&self) -> Vec<(String, &WeightRef)> {
        let m = &self.models;
        let mut out = Vec::new();
        if let Some(w) = &m.adapter {
            out.push(("adapter".to_string(), w));
        }
        if let Some(w) = &m.ip_adapter {
            out.push(("ip_adapter".to_string(), w));
        }
        for (name, e) in [
            ("region_encoder", &m.region_encoder),
            ("plain_encoder", &m.plain_encoder),
            ("text_encoder", &m.text_encoder),
        ] {
            if let Some(w) = e.as_ref().and_then(|e| e.weights.as_ref()) {
                out.push((name.to_string(), w));
            }
        }
        if let Some(w) = m.feature_extractor.as_ref().and_then(|f| f.weights.as_ref()) {
            out.push(("feature_extractor".to_string(), w));
        }
        for (k, b) in &m.backends {
            if let Some(w) = &b.weights {
                out.push((format!("backend.{k}"), w));
            }
        }
        out
    }

    /// Check that each referenced file exists and matches its hash; returns
    /// the observed hashes by role.
    pub fn verify_weights(&self) -> Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        for (role, w) in self.weight_refs() {
            if !w.path.exists() {
                return Err(Error::WeightsNotLoaded(format!(
                    "{role}: {} does not exist",
                    w.path.display()
                )));
            }
            let actual = file_hash(&w.path)?;
            if let Some(expected) = &w.sha256 {
                if !expected.eq_ignore_ascii_case(&actual) {
                    return Err(Error::WeightsNotLoaded(format!(
                        "{role}: {} has sha256 {actual}, expected {expected}",
                        w.path.display()
                    )));
                }
            }
            hashes.insert(role, actual);
        }
        Ok(hashes)
    }
}

/// Overlay a JSON object of option overrides on `base`. Keys follow
/// [`RemovalOptions`]; unknown keys are rejected.
pub fn apply_overrides(base: &RemovalOptions, overrides: &str) -> Result<RemovalOptions> {
    let patch: serde_json::Value = serde_json::from_str(overrides)
        .map_err(|e| Error::InvalidRequest(format!("options are not valid JSON: {e}")))?;
    let serde_json::Value::Object(patch) = patch else {
        return Err(Error::InvalidRequest("options must be a JSON object".into()));
    };
    let mut merged = serde_json::to_value(base)?;
    if let serde_json::Value::Object(m) = &mut merged {
        m.extend(patch);
    }
    let opts: RemovalOptions =
        serde_json::from_value(merged).map_err(|e| Error::InvalidRequest(format!("options: {e}")))?;
    opts.validate()?;
    Ok(opts)
}

impl ToolkitConfig {
    /// Pipeline defaults with the top-level seed applied.
    pub fn default_options(&self) -> RemovalOptions {
        RemovalOptions {
            seed: self.seed,
            ..self.pipeline.clone()
        }
    }
}

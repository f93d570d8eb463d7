//! Per-instance removal runs and metric aggregation.
//!
//! Each instance is removed once per [`BenchmarkEntry`]. Crop metrics use
//! the instance box on the source and on the (composited) output; the
//! realism metrics compare the distribution of full source images with the
//! distribution of full outputs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::clip::{embedding_distance, ClipAccuracy, TopkFlags, ZeroShotClassifier, DEFAULT_TEMPLATE};
use super::coco::{IngestStats, InstanceRecord};
use super::features::FeatureExtractor;
use super::fid::fid;
use super::mmd::{cmmd, CmmdConfig};
use crate::embedding::{read_embeddings, write_embeddings, Embedding};
use crate::encoders::{PlainEncoder, TextEncoder};
use crate::pipeline::{
    BackendKind, ConditioningMode, DiffusionBackend, RemovalOptions, RemovalPipeline, RemovalRequest,
};
use crate::{content_hash, Error, Result};

/// One row of Table-style comparison: a backend and how it is conditioned.
#[derive(Clone)]
pub struct BenchmarkEntry {
    pub label: String,
    pub backend: Arc<dyn DiffusionBackend>,
    pub conditioning: ConditioningMode,
}

impl BenchmarkEntry {
    pub fn new(backend: Arc<dyn DiffusionBackend>, conditioning: ConditioningMode) -> Self {
        let suffix = match conditioning {
            ConditioningMode::Clipaway => "+clipaway",
            ConditioningMode::Background => "+background",
            ConditioningMode::Unconditioned => "",
        };
        Self {
            label: format!("{}{suffix}", backend.id()),
            backend,
            conditioning,
        }
    }
}

/// Encoders used for scoring, separate from the removal pipeline.
#[derive(Clone)]
pub struct EvalModels {
    pub pipeline: RemovalPipeline,
    pub plain_encoder: Arc<dyn PlainEncoder>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub features: Arc<dyn FeatureExtractor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub limit: Option<usize>,
    pub seed: u64,
    /// Base options; `backend`, `conditioning` and `seed` are set per run.
    pub options: RemovalOptions,
    pub template: String,
    pub cmmd: CmmdConfig,
    pub output_dir: Option<PathBuf>,
    pub resume: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            limit: None,
            seed: 0,
            options: RemovalOptions::default(),
            template: DEFAULT_TEMPLATE.to_string(),
            cmmd: CmmdConfig::default(),
            output_dir: None,
            resume: false,
        }
    }
}

/// Per-instance CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub image_id: u64,
    pub instance_id: u64,
    pub class_label: String,
    pub bbox_x: u32,
    pub bbox_y: u32,
    pub bbox_w: u32,
    pub bbox_h: u32,
    pub bbox_expanded: bool,
    pub clip_distance: f64,
    pub removed_at1: bool,
    pub removed_at3: bool,
    pub removed_at5: bool,
}

impl InstanceRow {
    pub fn flags(&self) -> TopkFlags {
        TopkFlags {
            at1: self.removed_at1,
            at3: self.removed_at3,
            at5: self.removed_at5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub image_id: Option<u64>,
    pub instance_id: Option<u64>,
    pub reason: String,
}

/// Resume log line: a finished instance with everything aggregation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Done {
        row: InstanceRow,
        source_features: Vec<f64>,
        output_features: Vec<f64>,
        source_clip: Vec<f32>,
        output_clip: Vec<f32>,
    },
    Skipped(SkipRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub clip_distance: String,
    pub template: String,
    pub cmmd: CmmdConfig,
    pub fid_reference: String,
    pub crop_source: String,
    pub feature_extractor: String,
    pub plain_encoder: String,
    pub text_encoder: String,
    pub region_encoder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub backend: BackendKind,
    pub backend_id: String,
    pub conditioning: ConditioningMode,
    pub n_instances: usize,
    pub n_skipped: usize,
    pub skipped: Vec<SkipRecord>,
    pub fid: Option<f64>,
    pub fid_regularized: bool,
    pub cmmd: Option<f64>,
    pub cmmd_mmd2: Option<f64>,
    pub cmmd_negative: bool,
    pub clip_distance_mean: Option<f64>,
    pub clip_acc: ClipAccuracy,
    pub ingest: IngestStats,
    pub metadata: ReportMetadata,
    pub config: BenchmarkConfig,
    pub provenance: BTreeMap<String, String>,
}

#[derive(Default)]
struct Accumulator {
    rows: Vec<InstanceRow>,
    source_features: Vec<Vec<f64>>,
    output_features: Vec<Vec<f64>>,
    source_clip: Vec<Vec<f64>>,
    output_clip: Vec<Vec<f64>>,
    skipped: Vec<SkipRecord>,
    done: HashSet<(u64, u64)>,
    log: Option<File>,
}

impl Accumulator {
    fn absorb(&mut self, line: LogLine) {
        match line {
            LogLine::Done {
                row,
                source_features,
                output_features,
                source_clip,
                output_clip,
            } => {
                self.done.insert((row.image_id, row.instance_id));
                self.rows.push(row);
                self.source_features.push(source_features);
                self.output_features.push(output_features);
                self.source_clip.push(source_clip.iter().map(|&v| v as f64).collect());
                self.output_clip.push(output_clip.iter().map(|&v| v as f64).collect());
            }
            LogLine::Skipped(s) => {
                if let (Some(i), Some(a)) = (s.image_id, s.instance_id) {
                    self.done.insert((i, a));
                }
                self.skipped.push(s);
            }
        }
    }

    fn record(&mut self, line: LogLine) -> Result<()> {
        if let Some(f) = self.log.as_mut() {
            let mut s = serde_json::to_string(&line)?;
            s.push('\n');
            f.write_all(s.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io("benchmark log", e))?;
        }
        self.absorb(line);
        Ok(())
    }
}

fn safe_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Source-side embeddings keyed by content hash, optionally persisted as
/// `EMB1` files so repeated comparisons skip re-encoding.
struct SourceCache {
    dir: Option<PathBuf>,
    clip: HashMap<String, Embedding>,
    features: HashMap<String, Vec<f64>>,
}

impl SourceCache {
    fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Self {
            dir,
            clip: HashMap::new(),
            features: HashMap::new(),
        })
    }

    fn key(img: &RgbImage) -> String {
        let mut bytes = Vec::with_capacity(img.as_raw().len() + 8);
        bytes.extend_from_slice(&img.width().to_le_bytes());
        bytes.extend_from_slice(&img.height().to_le_bytes());
        bytes.extend_from_slice(img.as_raw());
        content_hash(&bytes)
    }

    fn clip(&mut self, img: &RgbImage, enc: &dyn PlainEncoder) -> Result<Embedding> {
        let key = Self::key(img);
        if let Some(e) = self.clip.get(&key) {
            return Ok(e.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{}-{key}.emb", safe_name(enc.id()))));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            if let Ok((space, mut v)) = read_embeddings(p) {
                if space == enc.output_space() && v.len() == 1 {
                    let e = v.pop().expect("one embedding");
                    self.clip.insert(key, e.clone());
                    return Ok(e);
                }
            }
        }
        let e = enc.encode_plain(img)?;
        if let Some(p) = &path {
            write_embeddings(p, e.space(), std::slice::from_ref(&e))?;
        }
        self.clip.insert(key, e.clone());
        Ok(e)
    }

    fn features(&mut self, img: &RgbImage, fx: &dyn FeatureExtractor) -> Result<Vec<f64>> {
        let key = Self::key(img);
        if let Some(f) = self.features.get(&key) {
            return Ok(f.clone());
        }
        let f = fx.extract(img)?;
        self.features.insert(key, f.clone());
        Ok(f)
    }
}

fn run_instance(
    rec: &InstanceRecord,
    entry: &BenchmarkEntry,
    models: &EvalModels,
    classifier: &ZeroShotClassifier,
    cache: &mut SourceCache,
    cfg: &BenchmarkConfig,
) -> Result<LogLine> {
    let mut options = cfg.options.clone();
    options.backend = entry.backend.kind();
    options.conditioning = entry.conditioning;
    options.seed = cfg.seed.wrapping_add(rec.instance_id);
    let request = RemovalRequest {
        image: (*rec.image).clone(),
        mask: rec.mask.clone(),
        options,
    };
    let result = models.pipeline.remove_object(request, entry.backend.as_ref())?;

    let plain = models.plain_encoder.as_ref();
    let source_crop = rec.bbox.crop(&rec.image);
    let output_crop = rec.bbox.crop(&result.output);
    let e_src = cache.clip(&source_crop, plain)?;
    let e_out = plain.encode_plain(&output_crop)?;
    let clip_distance = embedding_distance(&e_src, &e_out)?;
    let flags = classifier.flags(&e_src, &e_out)?;

    let source_features = cache.features(&rec.image, models.features.as_ref())?;
    let output_features = models.features.extract(&result.output)?;
    let source_clip = cache.clip(&rec.image, plain)?.into_values();
    let output_clip = plain.encode_plain(&result.output)?.into_values();
    Ok(LogLine::Done {
        row: InstanceRow {
            image_id: rec.image_id,
            instance_id: rec.instance_id,
            class_label: rec.class_label.clone(),
            bbox_x: rec.bbox.x,
            bbox_y: rec.bbox.y,
            bbox_w: rec.bbox.w,
            bbox_h: rec.bbox.h,
            bbox_expanded: rec.bbox_expanded,
            clip_distance,
            removed_at1: flags.at1,
            removed_at3: flags.at3,
            removed_at5: flags.at5,
        },
        source_features,
        output_features,
        source_clip,
        output_clip,
    })
}

fn open_log(path: &Path, resume: bool, acc: &mut Accumulator) -> Result<()> {
    if resume && path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LogLine>(&line) {
                Ok(l) => acc.absorb(l),
                // A torn final line from an interrupted run.
                Err(e) => log::warn!("{}:{}: ignoring unreadable line: {e}", path.display(), i + 1),
            }
        }
    }
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    acc.log = Some(file);
    Ok(())
}

/// Run every entry over the instances and aggregate one report per entry.
///
/// With an output directory, writes `<label>.jsonl` (resume log),
/// `<label>.csv`, `<label>.report.json` and a combined `report.json`.
pub fn run_benchmark(
    instances: &mut dyn Iterator<Item = Result<InstanceRecord>>,
    classes: &[String],
    models: &EvalModels,
    entries: &[BenchmarkEntry],
    cfg: &BenchmarkConfig,
) -> Result<Vec<MetricReport>> {
    let classifier = ZeroShotClassifier::new(classes, &cfg.template, models.text_encoder.as_ref())?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut cache = SourceCache::new(cfg.output_dir.as_ref().map(|d| d.join("cache")))?;
    let mut accs: Vec<Accumulator> = Vec::with_capacity(entries.len());
    for entry in entries {
        let mut acc = Accumulator::default();
        if let Some(dir) = &cfg.output_dir {
            open_log(&dir.join(format!("{}.jsonl", safe_name(&entry.label))), cfg.resume, &mut acc)?;
        }
        accs.push(acc);
    }

    let limit = cfg.limit.unwrap_or(usize::MAX);
    let mut seen = 0usize;
    while seen < limit {
        let Some(item) = instances.next() else { break };
        seen += 1;
        let rec = match item {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping unreadable instance: {e}");
                for acc in accs.iter_mut() {
                    acc.record(LogLine::Skipped(SkipRecord {
                        image_id: None,
                        instance_id: None,
                        reason: e.to_string(),
                    }))?;
                }
                continue;
            }
        };
        for (entry, acc) in entries.iter().zip(accs.iter_mut()) {
            if acc.done.contains(&(rec.image_id, rec.instance_id)) {
                continue;
            }
            let line = match run_instance(&rec, entry, models, &classifier, &mut cache, cfg) {
                Ok(l) => l,
                Err(e) => {
                    log::warn!(
                        "{}: instance {}/{} failed: {e}",
                        entry.label,
                        rec.image_id,
                        rec.instance_id
                    );
                    LogLine::Skipped(SkipRecord {
                        image_id: Some(rec.image_id),
                        instance_id: Some(rec.instance_id),
                        reason: e.reason().to_string(),
                    })
                }
            };
            acc.record(line)?;
        }
    }

    let mut reports = Vec::with_capacity(entries.len());
    for (entry, acc) in entries.iter().zip(accs) {
        reports.push(aggregate(entry, acc, models, &classifier, cfg)?);
    }
    if let Some(dir) = &cfg.output_dir {
        write_reports(dir, &reports)?;
    }
    Ok(reports)
}

/// Write `<label>.report.json` per report and the combined `report.json`.
pub fn write_reports(dir: &Path, reports: &[MetricReport]) -> Result<()> {
    for report in reports {
        let path = dir.join(format!("{}.report.json", safe_name(&report.label)));
        std::fs::write(&path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_vec_pretty(reports)?).map_err(|e| Error::io(&path, e))
}

fn aggregate(
    entry: &BenchmarkEntry,
    mut acc: Accumulator,
    models: &EvalModels,
    classifier: &ZeroShotClassifier,
    cfg: &BenchmarkConfig,
) -> Result<MetricReport> {
    // Rows may arrive out of order after a resume.
    let mut order: Vec<usize> = (0..acc.rows.len()).collect();
    order.sort_by_key(|&i| (acc.rows[i].image_id, acc.rows[i].instance_id));
    let pick = |v: &Vec<Vec<f64>>| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let source_features = pick(&acc.source_features);
    let output_features = pick(&acc.output_features);
    let source_clip = pick(&acc.source_clip);
    let output_clip = pick(&acc.output_clip);
    let rows: Vec<InstanceRow> = order.iter().map(|&i| acc.rows[i].clone()).collect();
    acc.log = None;

    let n = rows.len();
    let (fid_value, fid_regularized) = if n >= 2 {
        let r = fid(&source_features, &output_features)?;
        (Some(r.value), r.regularized)
    } else {
        (None, false)
    };
    let cm = if n >= 2 {
        Some(cmmd(&source_clip, &output_clip, &cfg.cmmd)?)
    } else {
        None
    };
    let flags: Vec<TopkFlags> = rows.iter().map(InstanceRow::flags).collect();
    let clip_distance_mean = (n > 0).then(|| rows.iter().map(|r| r.clip_distance).sum::<f64>() / n as f64);

    if let Some(dir) = &cfg.output_dir {
        let path = dir.join(format!("{}.csv", safe_name(&entry.label)));
        let mut w = csv::Writer::from_path(&path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    Ok(MetricReport {
        label: entry.label.clone(),
        backend: entry.backend.kind(),
        backend_id: entry.backend.id().to_string(),
        conditioning: entry.conditioning,
        n_instances: n,
        n_skipped: acc.skipped.len(),
        skipped: acc.skipped,
        fid: fid_value,
        fid_regularized,
        cmmd: cm.map(|c| c.value),
        cmmd_mmd2: cm.map(|c| c.mmd2),
        cmmd_negative: cm.is_some_and(|c| c.negative),
        clip_distance_mean,
        clip_acc: ClipAccuracy::aggregate(&flags),
        ingest: IngestStats::default(),
        metadata: ReportMetadata {
            clip_distance: "1 - cosine_similarity".into(),
            template: classifier.template().to_string(),
            cmmd: cfg.cmmd,
            fid_reference: "source_images".into(),
            crop_source: if cfg.options.composite_unmasked {
                "composited_output".into()
            } else {
                "raw_output".into()
            },
            feature_extractor: models.features.id().to_string(),
            plain_encoder: models.plain_encoder.id().to_string(),
            text_encoder: models.text_encoder.id().to_string(),
            region_encoder: models.pipeline.region_encoder.id().to_string(),
        },
        config: cfg.clone(),
        provenance: models.pipeline.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::ProjectionAdapter;
    use crate::encoders::mock::{MockPlainEncoder, MockRegionEncoder, MockTextEncoder};
    use crate::eval::coco::{ingest_coco, IngestOptions};
    use crate::eval::features::MockFeatureExtractor;
    use crate::eval::synthetic::write_synthetic_coco;
    use crate::pipeline::{IdentityBackend, ImagePromptProjection, MockBackend};

    fn models() -> EvalModels {
        EvalModels {
            pipeline: RemovalPipeline::new(
                Arc::new(MockRegionEncoder::with_resolution(1, 64)),
                Arc::new(ProjectionAdapter::new(2)),
                Arc::new(ImagePromptProjection::random(3)),
            ),
            plain_encoder: Arc::new(MockPlainEncoder::new(4)),
            text_encoder: Arc::new(MockTextEncoder::new(5)),
            features: Arc::new(MockFeatureExtractor),
        }
    }

    fn classes(ds: &super::super::coco::CocoDataset) -> Vec<String> {
        ds.thing_classes().iter().map(|c| c.name.clone()).collect()
    }

    #[test]
    fn limit_zero_gives_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_synthetic_coco(dir.path(), 2, 2, 0).unwrap();
        let mut it = ingest_coco(&ds.annotation_file, &ds.image_dir, IngestOptions::default()).unwrap();
        let entries = [BenchmarkEntry::new(
            Arc::new(MockBackend::new(BackendKind::SdInpaint)),
            ConditioningMode::Clipaway,
        )];
        let cfg = BenchmarkConfig {
            limit: Some(0),
            ..Default::default()
        };
        let r = run_benchmark(&mut it, &classes(&ds.dataset), &models(), &entries, &cfg).unwrap();
        assert_eq!(r[0].n_instances, 0);
        assert!(r[0].fid.is_none());
    }

    #[test]
    fn identity_backend_scores_zero() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_synthetic_coco(dir.path(), 4, 2, 1).unwrap();
        let mut it = ingest_coco(&ds.annotation_file, &ds.image_dir, IngestOptions::default()).unwrap();
        let entries = [BenchmarkEntry::new(
            Arc::new(IdentityBackend::new(BackendKind::SdInpaint)),
            ConditioningMode::Clipaway,
        )];
        let r = run_benchmark(&mut it, &classes(&ds.dataset), &models(), &entries, &BenchmarkConfig::default())
            .unwrap();
        let r = &r[0];
        assert_eq!(r.n_instances, 8);
        assert!(r.clip_distance_mean.unwrap().abs() < 1e-12);
        assert_eq!(r.clip_acc, ClipAccuracy::default());
        assert!(r.fid.unwrap() <= 1e-6);
    }

    #[test]
    fn resume_reproduces_uninterrupted_report() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_synthetic_coco(dir.path(), 3, 2, 2).unwrap();
        let cls = classes(&ds.dataset);
        let m = models();
        let entries = [BenchmarkEntry::new(
            Arc::new(MockBackend::new(BackendKind::BlendedLatent)),
            ConditioningMode::Clipaway,
        )];
        let out = dir.path().join("out");
        let full_cfg = BenchmarkConfig {
            output_dir: Some(dir.path().join("full")),
            ..Default::default()
        };
        let mut it = ingest_coco(&ds.annotation_file, &ds.image_dir, IngestOptions::default()).unwrap();
        let full = run_benchmark(&mut it, &cls, &m, &entries, &full_cfg).unwrap();

        let partial = BenchmarkConfig {
            limit: Some(2),
            output_dir: Some(out.clone()),
            ..Default::default()
        };
        let mut it = ingest_coco(&ds.annotation_file, &ds.image_dir, IngestOptions::default()).unwrap();
        run_benchmark(&mut it, &cls, &m, &entries, &partial).unwrap();
        let resumed_cfg = BenchmarkConfig {
            output_dir: Some(out.clone()),
            resume: true,
            ..Default::default()
        };
        let mut it = ingest_coco(&ds.annotation_file, &ds.image_dir, IngestOptions::default()).unwrap();
        let resumed = run_benchmark(&mut it, &cls, &m, &entries, &resumed_cfg).unwrap();
        assert_eq!(full[0].n_instances, resumed[0].n_instances);
        assert_eq!(full[0].fid, resumed[0].fid);
        assert_eq!(full[0].cmmd, resumed[0].cmmd);
        assert_eq!(full[0].clip_acc, resumed[0].clip_acc);
        let a = std::fs::read_to_string(dir.path().join("full").join(format!("{}.csv", safe_name(&entries[0].label)))).unwrap();
        let b = std::fs::read_to_string(out.join(format!("{}.csv", safe_name(&entries[0].label)))).unwrap();
        assert_eq!(a, b);
        assert!(out.join("cache").read_dir().unwrap().count() > 0);
    }
}

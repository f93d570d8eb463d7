//! Evaluation on COCO-style instance annotations.
//!
//! Removal quality is scored on the instance box (CLIP distance between the
//! source and inpainted crops, and whether a zero-shot classifier still
//! finds the source class in its top-k); realism is scored on full images
//! (FID over extractor features, CMMD over CLIP embeddings).

pub mod benchmark;
pub mod clip;
pub mod coco;
pub mod features;
pub mod fid;
pub mod mmd;
pub mod polygon;
pub mod rle;
pub mod synthetic;

pub use benchmark::{run_benchmark, write_reports, BenchmarkConfig, BenchmarkEntry, EvalModels, InstanceRow, MetricReport};
pub use clip::{clip_accuracy, clip_distance, ClipAccuracy, TopkFlags, ZeroShotClassifier};
pub use coco::{ingest_coco, BBox, CocoDataset, CocoInstances, IngestOptions, InstanceRecord};
pub use features::{ExternalFeatureExtractor, FeatureExtractor, MockFeatureExtractor};
pub use fid::{fid, FidResult};
pub use mmd::{cmmd, mmd_squared, CmmdConfig, MmdEstimator};
pub use rle::Rle;

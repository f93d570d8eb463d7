//! Adapter training: regress projected region-encoder embeddings (whole-image
//! alpha) onto the plain encoder's embeddings of the same images.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, OptimizerState, RngState, TrainingState};
use super::mlp::Mlp;
use super::optim::{AdamHyper, AdamW};
use super::{ProjectionAdapter, ADAPTER_WIDTHS};
use crate::embedding::EmbeddingSpace;
use crate::encoders::{PlainEncoder, RegionEncoder, RegionImage};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterTrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Memoize per-image embeddings (encoders are frozen and deterministic).
    pub cache_embeddings: bool,
}

impl Default for AdapterTrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            total_steps: 300_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_interval: 10_000,
            cache_embeddings: true,
        }
    }
}

impl AdapterTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment coefficients must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Indexed collection of training images.
pub trait ImageDataset {
    fn len(&self) -> usize;
    fn image(&self, index: usize) -> Result<RgbImage>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageDataset for [RgbImage] {
    fn len(&self) -> usize {
        <[RgbImage]>::len(self)
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        Ok(self[index].clone())
    }
}

impl ImageDataset for Vec<RgbImage> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        Ok(self[index].clone())
    }
}

/// Image files on disk, loaded on demand.
#[derive(Debug, Clone)]
pub struct ImageFiles {
    paths: Vec<PathBuf>,
}

impl ImageFiles {
    /// Every PNG/JPEG in `dir`, sorted by file name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
                )
            })
            .collect();
        paths.sort();
        Ok(Self { paths })
    }
}

impl ImageDataset for ImageFiles {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        crate::raster::load_rgb(&self.paths[index])
    }
}

/// Source of (input, target) regression pairs.
pub trait PairSource {
    fn len(&self) -> usize;
    fn pair(&mut self, index: usize) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Pairs produced by running both frozen encoders on a dataset image, with
/// the region encoder's alpha set to all ones.
pub struct EncodedPairs<'a, D: ImageDataset + ?Sized> {
    dataset: &'a D,
    region: &'a dyn RegionEncoder,
    plain: &'a dyn PlainEncoder,
    memo: Option<HashMap<usize, (Vec<f64>, Vec<f64>)>>,
}

impl<'a, D: ImageDataset + ?Sized> EncodedPairs<'a, D> {
    pub fn new(
        dataset: &'a D,
        region: &'a dyn RegionEncoder,
        plain: &'a dyn PlainEncoder,
        cache: bool,
    ) -> Result<Self> {
        if region.output_space() != EmbeddingSpace::AlphaClip768 {
            return Err(Error::EncoderSpaceMismatch(format!(
                "region encoder {} emits {} values, expected 768",
                region.id(),
                region.output_space().dim()
            )));
        }
        if plain.output_space() != EmbeddingSpace::Adapter1024 {
            return Err(Error::EncoderSpaceMismatch(format!(
                "target encoder {} emits {} values, expected 1024",
                plain.id(),
                plain.output_space().dim()
            )));
        }
        Ok(Self {
            dataset,
            region,
            plain,
            memo: cache.then(HashMap::new),
        })
    }
}

impl<D: ImageDataset + ?Sized> PairSource for EncodedPairs<'_, D> {
    fn len(&self) -> usize {
        self.dataset.len()
    }

    fn pair(&mut self, index: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if let Some(hit) = self.memo.as_ref().and_then(|m| m.get(&index)) {
            return Ok(hit.clone());
        }
        let img = self.dataset.image(index)?;
        let region = self.region.encode_region(&RegionImage::full(img.clone()))?;
        crate::encoders::check_output(EmbeddingSpace::AlphaClip768, &region, self.region.id())?;
        let target = self.plain.encode_plain(&img)?;
        crate::encoders::check_output(EmbeddingSpace::Adapter1024, &target, self.plain.id())?;
        let pair = (
            region.values().iter().map(|&v| v as f64).collect(),
            target.values().iter().map(|&v| v as f64).collect(),
        );
        if let Some(m) = self.memo.as_mut() {
            m.insert(index, pair.clone());
        }
        Ok(pair)
    }
}

impl PairSource for Vec<(Vec<f64>, Vec<f64>)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn pair(&mut self, index: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(self[index].clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub adapter: ProjectionAdapter,
    pub losses: Vec<f64>,
}

/// Owns the network, the optimizer and the sampler position.
pub struct AdapterTrainer<S: PairSource> {
    cfg: AdapterTrainingConfig,
    source: S,
    mlp: Mlp,
    optimizer: AdamW,
    step: u64,
    losses: Vec<f64>,
    epoch_cache: Option<(u64, Vec<usize>)>,
    checkpoint_path: Option<PathBuf>,
}

impl<S: PairSource> AdapterTrainer<S> {
    pub fn new(mlp: Mlp, source: S, cfg: AdapterTrainingConfig) -> Result<Self> {
        cfg.validate()?;
        if source.len() == 0 {
            return Err(Error::Dataset("training dataset is empty".into()));
        }
        let optimizer = AdamW::new(cfg.hyper(), &mlp);
        Ok(Self {
            cfg,
            source,
            mlp,
            optimizer,
            step: 0,
            losses: Vec::new(),
            epoch_cache: None,
            checkpoint_path: None,
        })
    }

    /// Continue from a training checkpoint written by [`Self::save_checkpoint`].
    pub fn resume(path: &Path, source: S) -> Result<Self> {
        let ckpt = checkpoint::read_checkpoint(path)?;
        let state = ckpt.header.training.clone().ok_or_else(|| {
            Error::FormatVersionMismatch("file holds weights only, no training state".into())
        })?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::FormatVersionMismatch("missing optimizer state".into()))?;
        if source.len() == 0 {
            return Err(Error::Dataset("training dataset is empty".into()));
        }
        Ok(Self {
            cfg: state.config,
            source,
            mlp: ckpt.mlp,
            optimizer,
            step: state.step,
            losses: ckpt.loss_history,
            epoch_cache: None,
            checkpoint_path: None,
        })
    }

    pub fn with_checkpoint_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn config(&self) -> &AdapterTrainingConfig {
        &self.cfg
    }

    fn sample_index(&mut self, position: u64) -> usize {
        let n = self.source.len() as u64;
        let epoch = position / n;
        let fresh = !matches!(&self.epoch_cache, Some((e, _)) if *e == epoch);
        if fresh {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(epoch + 1);
            let mut perm: Vec<usize> = (0..n as usize).collect();
            perm.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, perm));
        }
        let perm = &self.epoch_cache.as_ref().expect("just filled").1;
        perm[(position % n) as usize]
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let b = self.cfg.batch_size;
        let (in_dim, out_dim) = (self.mlp.in_dim(), self.mlp.out_dim());
        let mut x = DMatrix::zeros(b, in_dim);
        let mut t = DMatrix::zeros(b, out_dim);
        for row in 0..b {
            let idx = self.sample_index(self.step * b as u64 + row as u64);
            let (input, target) = self.source.pair(idx)?;
            if input.len() != in_dim || target.len() != out_dim {
                return Err(Error::EncoderSpaceMismatch(format!(
                    "pair widths ({}, {}) do not match network ({in_dim}, {out_dim})",
                    input.len(),
                    target.len()
                )));
            }
            for c in 0..in_dim {
                x[(row, c)] = input[c];
            }
            for c in 0..out_dim {
                t[(row, c)] = target[c];
            }
        }
        let (loss, grads) = self.mlp.mse_loss_and_grad(&x, &t);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
            });
        }
        self.optimizer.update(&mut self.mlp, &grads);
        self.step += 1;
        self.losses.push(loss);
        if let Some(path) = self.checkpoint_path.clone() {
            let every = self.cfg.checkpoint_interval;
            if every > 0 && self.step % every == 0 {
                self.save_checkpoint(&path)?;
            }
        }
        Ok(loss)
    }

    /// Train until `total_steps` is reached.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.cfg.total_steps {
            self.train_step()?;
        }
        if let Some(path) = self.checkpoint_path.clone() {
            self.save_checkpoint(&path)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let n = self.source.len() as u64;
        let state = TrainingState {
            step: self.step,
            config: self.cfg.clone(),
            optimizer: OptimizerState {
                hyper: self.optimizer.hyper,
                step: self.optimizer.step,
                weight_decay_mode: "decoupled".into(),
            },
            rng: RngState {
                algorithm: "chacha8-epoch-permutation".into(),
                seed: self.cfg.seed,
                epoch: self.step * self.cfg.batch_size as u64 / n,
            },
        };
        let bytes = checkpoint::encode(&self.mlp, Some((&state, &self.optimizer, &self.losses)))?;
        checkpoint::write_atomic(path, &bytes)
    }

    pub fn into_parts(self) -> (Mlp, Vec<f64>) {
        (self.mlp, self.losses)
    }
}

/// Train a fresh adapter against two frozen encoders.
///
/// When `checkpoint_path` is set a full training checkpoint is written every
/// `checkpoint_interval` steps and once at the end.
pub fn train_projection_adapter<D: ImageDataset + ?Sized>(
    images: &D,
    region_encoder: &dyn RegionEncoder,
    target_encoder: &dyn PlainEncoder,
    cfg: &AdapterTrainingConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainingRun> {
    let pairs = EncodedPairs::new(images, region_encoder, target_encoder, cfg.cache_embeddings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mlp = Mlp::new(&ADAPTER_WIDTHS, &mut rng);
    let mut trainer = AdapterTrainer::new(mlp, pairs, cfg.clone())?;
    if let Some(p) = checkpoint_path {
        trainer = trainer.with_checkpoint_path(p);
    }
    trainer.run()?;
    let (mlp, losses) = trainer.into_parts();
    Ok(TrainingRun {
        adapter: ProjectionAdapter::from_mlp(mlp)?,
        losses,
    })
}

/// Loss history as `step,loss` CSV with 1-based steps.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:e}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

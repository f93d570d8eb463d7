//! COCO instance annotations (the `instances_val2017.json` schema).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::polygon::rasterize_polygons;
use super::rle::Rle;
use crate::raster::{load_rgb, BinaryMask};
use crate::{Error, Result};

/// Highest category id used by COCO object ("thing") classes.
pub const MAX_THING_CATEGORY_ID: u64 = 90;

/// Smallest crop side fed to an encoder.
pub const MIN_BOX_SIDE: u32 = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(RleAnnotation),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RleAnnotation {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: RleCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u32>),
    Compressed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
    /// Present in panoptic-style files; otherwise inferred from the id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isthing: Option<u8>,
}

impl CocoCategory {
    pub fn is_thing(&self) -> bool {
        match self.isthing {
            Some(v) => v != 0,
            None => self.id <= MAX_THING_CATEGORY_ID,
        }
    }
}

impl CocoDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }

    /// Object classes, in category-id order.
    pub fn thing_classes(&self) -> Vec<&CocoCategory> {
        let mut v: Vec<_> = self.categories.iter().filter(|c| c.is_thing()).collect();
        v.sort_by_key(|c| c.id);
        v
    }
}

impl Segmentation {
    pub fn rasterize(&self, width: u32, height: u32) -> Result<BinaryMask> {
        match self {
            Segmentation::Polygons(polys) => Ok(rasterize_polygons(polys, width, height)),
            Segmentation::Rle(r) => {
                let [h, w] = r.size;
                let rle = match &r.counts {
                    RleCounts::Raw(c) => Rle {
                        height: h,
                        width: w,
                        counts: c.clone(),
                    },
                    RleCounts::Compressed(s) => Rle::from_compressed(h, w, s)?,
                };
                let m = rle.decode()?;
                if m.dimensions() != (width, height) {
                    return Err(Error::Dataset(format!(
                        "RLE size {w}x{h} does not match image {width}x{height}"
                    )));
                }
                Ok(m)
            }
        }
    }
}

/// Pixel box `(x, y, w, h)`, inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    /// Clip a COCO float box to the image, rounding outward. `None` if
    /// nothing is left.
    pub fn clip(b: [f64; 4], width: u32, height: u32) -> Option<BBox> {
        let x0 = b[0].floor().clamp(0.0, width as f64) as u32;
        let y0 = b[1].floor().clamp(0.0, height as f64) as u32;
        let x1 = (b[0] + b[2]).ceil().clamp(0.0, width as f64) as u32;
        let y1 = (b[1] + b[3]).ceil().clamp(0.0, height as f64) as u32;
        (x1 > x0 && y1 > y0).then_some(BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    /// Grow each side to at least `min` pixels (bounded by the image),
    /// keeping the box centred where possible. Returns whether it grew.
    pub fn expand_to(&mut self, min: u32, width: u32, height: u32) -> bool {
        fn grow(start: u32, len: u32, min: u32, limit: u32) -> (u32, u32) {
            let target = min.min(limit);
            if len >= target {
                return (start, len);
            }
            let extra = target - len;
            let s = start.saturating_sub(extra / 2);
            let s = s.min(limit - target);
            (s, target)
        }
        let before = *self;
        (self.x, self.w) = grow(self.x, self.w, min, width);
        (self.y, self.h) = grow(self.y, self.h, min, height);
        *self != before
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn crop(&self, img: &RgbImage) -> RgbImage {
        image::imageops::crop_imm(img, self.x, self.y, self.w, self.h).to_image()
    }
}

/// One object instance ready for removal.
#[derive(Debug, Clone)]
pub struct InstanceRecord {
    pub image_id: u64,
    pub instance_id: u64,
    pub category_id: u64,
    pub class_label: String,
    pub bbox: BBox,
    pub bbox_expanded: bool,
    pub mask: BinaryMask,
    pub image: Arc<RgbImage>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub include_crowd: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub stuff_skipped: usize,
    pub crowd_skipped: usize,
    pub missing_images: usize,
    pub empty_instances: usize,
}

/// Lazily yields object instances sorted by `(image_id, annotation id)`.
/// Images are decoded once per image id.
pub struct CocoInstances {
    annotations: std::vec::IntoIter<CocoAnnotation>,
    images: HashMap<u64, CocoImage>,
    categories: HashMap<u64, CocoCategory>,
    image_dir: PathBuf,
    current: Option<(u64, Option<Arc<RgbImage>>)>,
    stats: IngestStats,
}

pub fn ingest_coco(
    annotation_file: &Path,
    image_dir: &Path,
    options: IngestOptions,
) -> Result<CocoInstances> {
    Ok(CocoInstances::new(CocoDataset::load(annotation_file)?, image_dir, options))
}

impl CocoInstances {
    pub fn new(dataset: CocoDataset, image_dir: &Path, options: IngestOptions) -> Self {
        let categories: HashMap<u64, CocoCategory> =
            dataset.categories.into_iter().map(|c| (c.id, c)).collect();
        let mut stats = IngestStats::default();
        let mut anns: Vec<CocoAnnotation> = dataset
            .annotations
            .into_iter()
            .filter(|a| {
                let thing = categories.get(&a.category_id).is_some_and(|c| c.is_thing());
                if !thing {
                    stats.stuff_skipped += 1;
                    return false;
                }
                if a.iscrowd != 0 && !options.include_crowd {
                    stats.crowd_skipped += 1;
                    return false;
                }
                true
            })
            .collect();
        anns.sort_by_key(|a| (a.image_id, a.id));
        Self {
            annotations: anns.into_iter(),
            images: dataset.images.into_iter().map(|i| (i.id, i)).collect(),
            categories,
            image_dir: image_dir.to_path_buf(),
            current: None,
            stats,
        }
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    fn image_for(&mut self, image_id: u64) -> Option<Arc<RgbImage>> {
        if let Some((id, img)) = &self.current {
            if *id == image_id {
                return img.clone();
            }
        }
        let loaded = self.images.get(&image_id).and_then(|meta| {
            let path = self.image_dir.join(&meta.file_name);
            match load_rgb(&path) {
                Ok(img) => Some(Arc::new(img)),
                Err(e) => {
                    log::warn!("skipping image {image_id}: {e}");
                    None
                }
            }
        });
        self.current = Some((image_id, loaded.clone()));
        loaded
    }
}

impl Iterator for CocoInstances {
    type Item = Result<InstanceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let ann = self.annotations.next()?;
            let fresh = self.current.as_ref().map(|c| c.0) != Some(ann.image_id);
            let Some(image) = self.image_for(ann.image_id) else {
                if fresh {
                    self.stats.missing_images += 1;
                }
                continue;
            };
            let (w, h) = image.dimensions();
            let mask = match ann.segmentation.rasterize(w, h) {
                Ok(m) => m,
                Err(e) => return Some(Err(e)),
            };
            let Some(mut bbox) = BBox::clip(ann.bbox, w, h).filter(|_| !mask.is_empty()) else {
                self.stats.empty_instances += 1;
                continue;
            };
            let bbox_expanded = bbox.expand_to(MIN_BOX_SIDE, w, h);
            let class_label = self.categories[&ann.category_id].name.clone();
            return Some(Ok(InstanceRecord {
                image_id: ann.image_id,
                instance_id: ann.id,
                category_id: ann.category_id,
                class_label,
                bbox,
                bbox_expanded,
                mask,
                image,
            }));
        }
    }
}

//! Small COCO-format datasets with procedurally drawn objects, for tests
//! and weight-free dry runs of the benchmark.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::coco::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage, Segmentation};
use super::polygon::rasterize_polygon;
use crate::{Error, Result};

const THINGS: [(u64, &str, &str); 6] = [
    (1, "person", "person"),
    (3, "car", "vehicle"),
    (18, "dog", "animal"),
    (44, "bottle", "kitchen"),
    (47, "cup", "kitchen"),
    (62, "chair", "furniture"),
];

/// A stuff class; every image carries one such annotation, which ingestion
/// must drop.
const STUFF: (u64, &str, &str) = (118, "floor-wood", "floor");

pub struct SyntheticDataset {
    pub annotation_file: PathBuf,
    pub image_dir: PathBuf,
    pub dataset: CocoDataset,
}

/// Write `images/*.png` and `annotations.json` under `root`.
pub fn write_synthetic_coco(
    root: &Path,
    num_images: usize,
    objects_per_image: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    let image_dir = root.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (64u32, 48u32);
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    for i in 0..num_images {
        let id = i as u64 + 1;
        let tint: [u8; 3] = [rng.random_range(20..120), rng.random_range(20..120), rng.random_range(20..120)];
        let mut img = RgbImage::from_fn(w, h, |x, y| {
            Rgb([
                tint[0].saturating_add((x * 2) as u8),
                tint[1].saturating_add(y as u8),
                tint[2],
            ])
        });
        // floor band at the bottom
        let floor = vec![0.0, 36.0, w as f64, 36.0, w as f64, h as f64, 0.0, h as f64];
        annotations.push(CocoAnnotation {
            id: ann_id,
            image_id: id,
            category_id: STUFF.0,
            segmentation: Segmentation::Polygons(vec![floor.clone()]),
            bbox: [0.0, 36.0, w as f64, 12.0],
            area: w as f64 * 12.0,
            iscrowd: 0,
        });
        ann_id += 1;
        for _ in 0..objects_per_image {
            let (cat, _, _) = THINGS[rng.random_range(0..THINGS.len())];
            let cx = rng.random_range(10.0..54.0);
            let cy = rng.random_range(10.0..38.0);
            let r = rng.random_range(4.0..10.0);
            let poly: Vec<f64> = if rng.random_bool(0.5) {
                vec![cx - r, cy - r, cx + r, cy - r, cx + r, cy + r, cx - r, cy + r]
            } else {
                vec![cx, cy - r, cx + r, cy + r, cx - r, cy + r]
            };
            let color = Rgb([rng.random_range(150..255), rng.random_range(150..255), rng.random_range(0..255)]);
            let m = rasterize_polygon(&poly, w, h);
            for (x, y, px) in img.enumerate_pixels_mut() {
                if m.get(x, y) {
                    *px = color;
                }
            }
            let xs = poly.iter().step_by(2);
            let ys = poly.iter().skip(1).step_by(2);
            let (x0, x1) = xs.fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let (y0, y1) = ys.fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: id,
                category_id: cat,
                segmentation: Segmentation::Polygons(vec![poly]),
                bbox: [x0, y0, x1 - x0, y1 - y0],
                area: m.count() as f64,
                iscrowd: 0,
            });
            ann_id += 1;
        }
        let file_name = format!("{id:012}.png");
        let path = image_dir.join(&file_name);
        img.save(&path)
            .map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))?;
        images.push(CocoImage {
            id,
            file_name,
            width: w,
            height: h,
        });
    }
    let categories = THINGS
        .iter()
        .chain(std::iter::once(&STUFF))
        .map(|&(id, name, sup)| CocoCategory {
            id,
            name: name.into(),
            supercategory: sup.into(),
            isthing: None,
        })
        .collect();
    let dataset = CocoDataset {
        images,
        annotations,
        categories,
    };
    let annotation_file = root.join("annotations.json");
    std::fs::write(&annotation_file, serde_json::to_vec_pretty(&dataset)?)
        .map_err(|e| Error::io(&annotation_file, e))?;
    Ok(SyntheticDataset {
        annotation_file,
        image_dir,
        dataset,
    })
}

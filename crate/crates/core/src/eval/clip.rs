//! Crop-level removal metrics in CLIP space.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, Embedding};
use crate::encoders::{PlainEncoder, TextEncoder};
use crate::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "a photo of a {class}";

/// Ranks reported by the accuracy metric.
pub const TOP_K: [usize; 3] = [1, 3, 5];

fn check_crop(img: &RgbImage, which: &str) -> Result<()> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Metric(format!("{which} crop has zero area")));
    }
    Ok(())
}

/// `1 - cos` between two embeddings, clamped to `[0, 2]`.
pub fn embedding_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    Ok((1.0 - cosine_similarity(a, b)?).clamp(0.0, 2.0))
}

pub fn clip_distance(
    source_crop: &RgbImage,
    inpainted_crop: &RgbImage,
    encoder: &dyn PlainEncoder,
) -> Result<f64> {
    check_crop(source_crop, "source")?;
    check_crop(inpainted_crop, "inpainted")?;
    let a = encoder.encode_plain(source_crop)?;
    let b = encoder.encode_plain(inpainted_crop)?;
    embedding_distance(&a, &b)
}

/// Success flags: the source's predicted class is *absent* from the
/// inpainted crop's top-k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TopkFlags {
    pub at1: bool,
    pub at3: bool,
    pub at5: bool,
}

impl TopkFlags {
    pub fn from_ranking(source_class: usize, ranking: &[usize]) -> Self {
        let absent = |k: usize| !ranking.iter().take(k).any(|&c| c == source_class);
        Self {
            at1: absent(1),
            at3: absent(3),
            at5: absent(5),
        }
    }
}

/// Zero-shot classifier over a fixed class list, using prompt embeddings
/// from a text encoder that shares the plain encoder's space.
#[derive(Debug, Clone)]
pub struct ZeroShotClassifier {
    classes: Vec<String>,
    template: String,
    prompts: Vec<Embedding>,
}

impl ZeroShotClassifier {
    pub fn new(classes: &[String], template: &str, text: &dyn TextEncoder) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Metric("class set is empty".into()));
        }
        let prompts = classes
            .iter()
            .map(|c| text.encode_text(&template.replace("{class}", c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: classes.to_vec(),
            template: template.to_string(),
            prompts,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// Class indices by decreasing similarity; ties keep class order.
    pub fn rank(&self, image_embedding: &Embedding) -> Result<Vec<usize>> {
        let scores = self
            .prompts
            .iter()
            .map(|p| cosine_similarity(image_embedding, p))
            .collect::<Result<Vec<f64>>>()?;
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(idx)
    }

    pub fn predict(&self, image_embedding: &Embedding) -> Result<usize> {
        Ok(self.rank(image_embedding)?[0])
    }

    /// Flags for precomputed crop embeddings.
    pub fn flags(&self, source: &Embedding, inpainted: &Embedding) -> Result<TopkFlags> {
        let predicted = self.predict(source)?;
        Ok(TopkFlags::from_ranking(predicted, &self.rank(inpainted)?))
    }
}

pub fn clip_accuracy(
    source_crop: &RgbImage,
    inpainted_crop: &RgbImage,
    classifier: &ZeroShotClassifier,
    encoder: &dyn PlainEncoder,
) -> Result<TopkFlags> {
    check_crop(source_crop, "source")?;
    check_crop(inpainted_crop, "inpainted")?;
    let a = encoder.encode_plain(source_crop)?;
    let b = encoder.encode_plain(inpainted_crop)?;
    classifier.flags(&a, &b)
}

/// Success percentages at each k.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipAccuracy {
    pub at1: f64,
    pub at3: f64,
    pub at5: f64,
}

impl ClipAccuracy {
    pub fn aggregate(flags: &[TopkFlags]) -> Self {
        if flags.is_empty() {
            return Self::default();
        }
        let pct = |f: fn(&TopkFlags) -> bool| {
            100.0 * flags.iter().filter(|x| f(x)).count() as f64 / flags.len() as f64
        };
        Self {
            at1: pct(|f| f.at1),
            at3: pct(|f| f.at3),
            at5: pct(|f| f.at5),
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.at1 >= self.at3 && self.at3 >= self.at5
    }
}

//! Annotated grayscale images, the synthetic corpus generator, on-disk
//! corpus format and subject-level hold-out splits.

pub mod io;
pub mod split;
pub mod synth;

use std::collections::BTreeMap;

use crate::ndtensor::Tensor;
use crate::{BBox, Error, GtBox, Result};

pub use io::{load_corpus, save_corpus, CorpusSummary};
pub use split::{split, SplitPlan};
pub use synth::{generate_synthetic, SynthParams};

pub const CLASS_HC: usize = 0;
pub const CLASS_APD: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["HC", "APD"];

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("image", format!("{width}x{height} needs {} pixels, got {}", width * height, data.len())));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// `i + 0.5`), edge-clamped.
    pub fn sample_bilinear(&self, x: f32, y: f32) -> f32 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f32);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f32);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
        let top = self.get(x0, y0) * (1.0 - ax) + self.get(x1, y0) * ax;
        let bot = self.get(x0, y1) * (1.0 - ax) + self.get(x1, y1) * ax;
        top * (1.0 - ay) + bot * ay
    }

    /// Rounds every pixel to the nearest multiple of 1/255.
    pub fn quantize_u8(&mut self) {
        self.data.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    }
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Tight end-exclusive box around the set pixels.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then(|| BBox::new(x1 as f32, y1 as f32, x2 as f32, y2 as f32))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: GrayImage,
    pub subject_id: String,
    pub slice_index: usize,
    pub boxes: Vec<GtBox>,
    /// Synthetic data only: the class-discriminative mid-body region.
    pub gt_region_mask: Option<Mask>,
}

impl AnnotatedImage {
    /// Image-level label: the class of the first box.
    pub fn class_id(&self) -> usize {
        self.boxes.first().map_or(CLASS_HC, |b| b.class_id)
    }

    pub fn primary_box(&self) -> Option<BBox> {
        self.boxes.first().map(|b| b.bbox)
    }

    /// Corpus-level invariants: one in-bounds box per image.
    pub fn validate(&self) -> Result<()> {
        let record = format!("{}#{}", self.subject_id, self.slice_index);
        if self.boxes.len() != 1 {
            return Err(Error::Dataset { record, detail: format!("expected exactly one box, found {}", self.boxes.len()) });
        }
        let b = self.boxes[0].bbox;
        if !b.within(self.image.width as f32, self.image.height as f32) {
            return Err(Error::Dataset { record, detail: format!("box {b:?} invalid or outside the image") });
        }
        if let Some(m) = &self.gt_region_mask {
            if (m.width, m.height) != (self.image.width, self.image.height) {
                return Err(Error::Dataset { record, detail: "mask size differs from image".into() });
            }
        }
        Ok(())
    }
}

/// Stacks images into an `N × 1 × H × W` tensor.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::shape("images_to_tensor", "images differ in size"));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new([images.len(), 1, h, w], data)
}

/// Subject id → class, checking that every slice of a subject agrees.
pub fn subject_classes(corpus: &[AnnotatedImage]) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for s in corpus {
        let c = s.class_id();
        if let Some(prev) = out.insert(s.subject_id.clone(), c) {
            if prev != c {
                return Err(Error::Dataset {
                    record: format!("{}#{}", s.subject_id, s.slice_index),
                    detail: format!("class {c} disagrees with earlier slices ({prev})"),
                });
            }
        }
    }
    Ok(out)
}

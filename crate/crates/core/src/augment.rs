//! Training-time augmentation: four-image mosaic, horizontal flip and gamma
//! correction. Boxes are carried through every geometric map exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, GrayImage};
use crate::{BBox, Error, GtBox, Result};

/// Fraction of a box's area that may be lost to clipping before the box is dropped.
pub const MAX_CLIPPED_FRACTION: f32 = 0.6;

/// How an input image is fitted to its mosaic quadrant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MosaicFill {
    /// Scale each axis independently so the whole image fills the quadrant.
    Stretch,
    /// Scale isotropically until the quadrant is covered, anchor the image at
    /// the pivot and crop whatever falls outside the quadrant.
    Cover,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Off by default: mosaics shift the box-size distribution away from the
    /// full-frame test images and localisation suffers.
    pub mosaic_prob: f64,
    pub mosaic_fill: MosaicFill,
    pub flip_prob: f64,
    pub gamma_range: (f32, f32),
    pub min_box_area_px: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mosaic_prob: 0.0,
            mosaic_fill: MosaicFill::Stretch,
            flip_prob: 0.5,
            gamma_range: (0.7, 1.5),
            min_box_area_px: 16.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        AugmentConfig { mosaic_prob: 0.0, flip_prob: 0.0, gamma_range: (1.0, 1.0), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("augment.mosaic_prob", self.mosaic_prob), ("augment.flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("{p} is not in [0, 1]")));
            }
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("augment.gamma_range", format!("({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        if !(self.min_box_area_px >= 0.0) {
            return Err(Error::config("augment.min_box_area_px", "must be non-negative"));
        }
        Ok(())
    }
}

/// Axis-aligned map `x -> ox + sx * x`, `y -> oy + sy * y` from input pixels
/// to canvas pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub sx: f32,
    pub sy: f32,
    pub ox: f32,
    pub oy: f32,
}

impl Affine {
    pub fn apply(&self, b: &BBox) -> BBox {
        BBox::new(self.ox + self.sx * b.x1, self.oy + self.sy * b.y1, self.ox + self.sx * b.x2, self.oy + self.sy * b.y2)
    }
}

/// Outcome of clipping a mapped box to the visible region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Clipped {
    Kept(BBox),
    /// Lost more than [`MAX_CLIPPED_FRACTION`] of its area.
    TooClipped,
    /// Remaining area below the minimum.
    TooSmall,
}

pub fn clip_box(mapped: &BBox, region: &BBox, min_area: f32) -> Clipped {
    let c = BBox::new(
        mapped.x1.max(region.x1),
        mapped.y1.max(region.y1),
        mapped.x2.min(region.x2),
        mapped.y2.min(region.y2),
    );
    let full = mapped.area();
    if !c.is_valid() || c.area() < (1.0 - MAX_CLIPPED_FRACTION) * full {
        Clipped::TooClipped
    } else if c.area() < min_area {
        Clipped::TooSmall
    } else {
        Clipped::Kept(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MosaicOutput {
    pub sample: AnnotatedImage,
    /// Boxes dropped because clipping removed too much of them.
    pub clipped_warnings: usize,
}

/// Quadrant rectangles for a pivot, in the order top-left, top-right,
/// bottom-left, bottom-right.
pub fn quadrants(out_size: usize, pivot: (f32, f32)) -> [BBox; 4] {
    let s = out_size as f32;
    let (px, py) = pivot;
    [BBox::new(0.0, 0.0, px, py), BBox::new(px, 0.0, s, py), BBox::new(0.0, py, px, s), BBox::new(px, py, s, s)]
}

/// Map placing an `w × h` image into quadrant `q` (index as in [`quadrants`]).
pub fn quadrant_affine(fill: MosaicFill, q: usize, region: &BBox, w: usize, h: usize) -> Affine {
    let (w, h) = (w as f32, h as f32);
    match fill {
        MosaicFill::Stretch => {
            Affine { sx: region.width() / w, sy: region.height() / h, ox: region.x1, oy: region.y1 }
        }
        MosaicFill::Cover => {
            let s = (region.width() / w).max(region.height() / h);
            // the image corner nearest the pivot sits on the pivot
            let ox = if q % 2 == 0 { region.x2 - s * w } else { region.x1 };
            let oy = if q < 2 { region.y2 - s * h } else { region.y1 };
            Affine { sx: s, sy: s, ox, oy }
        }
    }
}

/// Composes four samples around a random pivot drawn uniformly from the
/// central half of the canvas.
pub fn mosaic<R: Rng>(
    samples: [&AnnotatedImage; 4],
    out_size: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> MosaicOutput {
    let s = out_size as f32;
    let pivot = (rng.random_range(0.25 * s..=0.75 * s), rng.random_range(0.25 * s..=0.75 * s));
    mosaic_at(samples, out_size, pivot, cfg)
}

pub fn mosaic_at(samples: [&AnnotatedImage; 4], out_size: usize, pivot: (f32, f32), cfg: &AugmentConfig) -> MosaicOutput {
    let mut canvas = GrayImage::filled(out_size, out_size, 0.0);
    let mut boxes = Vec::new();
    let mut clipped_warnings = 0;
    for (q, region) in quadrants(out_size, pivot).iter().enumerate() {
        let src = samples[q];
        let (w, h) = (src.image.width, src.image.height);
        let map = quadrant_affine(cfg.mosaic_fill, q, region, w, h);
        let (x0, x1) = (region.x1.round() as usize, (region.x2.round() as usize).min(out_size));
        let (y0, y1) = (region.y1.round() as usize, (region.y2.round() as usize).min(out_size));
        for y in y0..y1 {
            let sy = (y as f32 + 0.5 - map.oy) / map.sy;
            for x in x0..x1 {
                let sx = (x as f32 + 0.5 - map.ox) / map.sx;
                canvas.data[y * out_size + x] = src.image.sample_bilinear(sx, sy);
            }
        }
        for gt in &src.boxes {
            match clip_box(&map.apply(&gt.bbox), region, cfg.min_box_area_px) {
                Clipped::Kept(b) => boxes.push(GtBox { class_id: gt.class_id, bbox: b }),
                Clipped::TooClipped => clipped_warnings += 1,
                Clipped::TooSmall => {}
            }
        }
    }
    let sample = AnnotatedImage {
        image: canvas,
        subject_id: samples[0].subject_id.clone(),
        slice_index: samples[0].slice_index,
        boxes,
        gt_region_mask: None,
    };
    MosaicOutput { sample, clipped_warnings }
}

/// Mirrors columns; boxes map `x -> W - x`.
pub fn flip_horizontal(sample: &AnnotatedImage) -> AnnotatedImage {
    let (w, h) = (sample.image.width, sample.image.height);
    let mut out = sample.clone();
    for y in 0..h {
        out.image.data[y * w..(y + 1) * w].reverse();
    }
    let wf = w as f32;
    for b in &mut out.boxes {
        b.bbox = BBox::new(wf - b.bbox.x2, b.bbox.y1, wf - b.bbox.x1, b.bbox.y2);
    }
    if let Some(m) = &mut out.gt_region_mask {
        for y in 0..h {
            m.data[y * w..(y + 1) * w].reverse();
        }
    }
    out
}

pub fn hflip<R: Rng>(sample: &AnnotatedImage, cfg: &AugmentConfig, rng: &mut R) -> AnnotatedImage {
    if rng.random::<f64>() < cfg.flip_prob {
        flip_horizontal(sample)
    } else {
        sample.clone()
    }
}

pub fn apply_gamma(sample: &AnnotatedImage, gamma: f32) -> AnnotatedImage {
    let mut out = sample.clone();
    out.image.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0).powf(gamma));
    out
}

pub fn gamma<R: Rng>(sample: &AnnotatedImage, cfg: &AugmentConfig, rng: &mut R) -> AnnotatedImage {
    let (lo, hi) = cfg.gamma_range;
    let g = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    apply_gamma(sample, g)
}

/// The full per-sample pipeline: optional mosaic with three partners drawn
/// from `pool`, then flip, then gamma. Returns the sample and the number of
/// clipping warnings raised.
pub fn augment_sample<R: Rng>(
    corpus: &[AnnotatedImage],
    index: usize,
    pool: &[usize],
    out_size: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (AnnotatedImage, usize) {
    let mut warnings = 0;
    let base = if !pool.is_empty() && rng.random::<f64>() < cfg.mosaic_prob {
        let pick = |rng: &mut R| &corpus[pool[rng.random_range(0..pool.len())]];
        let others = [pick(rng), pick(rng), pick(rng)];
        let m = mosaic([&corpus[index], others[0], others[1], others[2]], out_size, cfg, rng);
        warnings += m.clipped_warnings;
        m.sample
    } else {
        corpus[index].clone()
    };
    let flipped = hflip(&base, cfg, rng);
    (gamma(&flipped, cfg, rng), warnings)
}

//! Procedural corpus: one C-shaped annular arc per image on a noisy,
//! low-frequency background.
//!
//! Class 0 (HC) arcs have uniform thickness. Class 1 (APD) arcs are thinned
//! by a factor in `[0.35, 0.6]` and dimmed by a factor in `[0.6, 0.85]` over
//! the central third of their length (the mid-body). Each subject gets one
//! base shape; its slices jitter that shape slightly, the way neighbouring
//! slices of one scan differ.
//!
//! Geometry is expressed for a 128-pixel canvas and scaled with `size`.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedImage, GrayImage, Mask, CLASS_APD, CLASS_HC};
use crate::{Error, GtBox, Result};

pub const THINNING_RANGE: (f32, f32) = (0.35, 0.6);
pub const ATTENUATION_RANGE: (f32, f32) = (0.6, 0.85);
/// Fraction of the mid-body third, at each end, over which thickness and
/// intensity ramp to their reduced value.
const RAMP: f32 = 0.04;
const MARGIN: f32 = 4.0;

/// Geometry of one rendered arc.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub class_id: usize,
    pub center: (f32, f32),
    pub radius: f32,
    pub thickness: f32,
    /// Angular extent in radians.
    pub span: f32,
    /// Direction (radians, image coordinates) from the centre to the mid-body.
    pub mid_angle: f32,
    pub intensity: f32,
    /// Thickness multiplier on the mid-body (1 for HC).
    pub thinning: f32,
    /// Intensity multiplier on the mid-body (1 for HC).
    pub attenuation: f32,
}

impl SynthParams {
    /// Position along the arc in `[0, 1]` for a point, or `None` outside the span.
    pub fn arc_position(&self, x: f32, y: f32) -> Option<(f32, f32)> {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let rho = (dx * dx + dy * dy).sqrt();
        let mut delta = dy.atan2(dx) - self.mid_angle;
        while delta > PI {
            delta -= 2.0 * PI;
        }
        while delta <= -PI {
            delta += 2.0 * PI;
        }
        (delta.abs() <= self.span / 2.0).then(|| ((delta + self.span / 2.0) / self.span, rho))
    }

    /// 1 inside the mid-body third (after short ramps), 0 elsewhere.
    pub fn midbody_weight(u: f32) -> f32 {
        let (a, b) = (1.0 / 3.0, 2.0 / 3.0);
        if u <= a || u >= b {
            0.0
        } else if u < a + RAMP {
            0.5 - 0.5 * (PI * (u - a) / RAMP).cos()
        } else if u > b - RAMP {
            0.5 - 0.5 * (PI * (b - u) / RAMP).cos()
        } else {
            1.0
        }
    }

    pub fn thickness_at(&self, u: f32) -> f32 {
        self.thickness * (1.0 - (1.0 - self.thinning) * Self::midbody_weight(u))
    }

    pub fn intensity_at(&self, u: f32) -> f32 {
        self.intensity * (1.0 - (1.0 - self.attenuation) * Self::midbody_weight(u))
    }

    /// Whether the point lies on the structure.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        self.arc_position(x, y).is_some_and(|(u, rho)| (rho - self.radius).abs() <= self.thickness_at(u) / 2.0)
    }

    /// Mid-body third of the arc together with a band of one nominal
    /// thickness around the structure.
    pub fn in_midbody_region(&self, x: f32, y: f32) -> bool {
        self.arc_position(x, y)
            .is_some_and(|(u, rho)| (1.0 / 3.0..=2.0 / 3.0).contains(&u) && (rho - self.radius).abs() <= self.thickness)
    }

    /// Axis-aligned extent of the nominal (unthinned) arc.
    fn extent(&self) -> (f32, f32, f32, f32) {
        let (mut x1, mut y1, mut x2, mut y2) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
        let steps = 256;
        for i in 0..=steps {
            let a = self.mid_angle - self.span / 2.0 + self.span * i as f32 / steps as f32;
            for r in [self.radius - self.thickness / 2.0, self.radius + self.thickness / 2.0] {
                let (x, y) = (self.center.0 + r * a.cos(), self.center.1 + r * a.sin());
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x);
                y2 = y2.max(y);
            }
        }
        (x1, y1, x2, y2)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws a subject's base arc, placed so it fits inside the canvas.
pub fn sample_subject(rng: &mut ChaCha8Rng, class_id: usize, size: usize) -> SynthParams {
    let k = size as f32 / 128.0;
    let mut p = SynthParams {
        class_id,
        center: (0.0, 0.0),
        radius: uniform(rng, 22.0, 34.0) * k,
        thickness: uniform(rng, 6.0, 9.0) * k,
        span: uniform(rng, 180.0, 270.0).to_radians(),
        mid_angle: -PI / 2.0 + uniform(rng, -20.0, 20.0).to_radians(),
        intensity: uniform(rng, 0.72, 0.92),
        thinning: 1.0,
        attenuation: 1.0,
    };
    if class_id == CLASS_APD {
        p.thinning = uniform(rng, THINNING_RANGE.0, THINNING_RANGE.1);
        p.attenuation = uniform(rng, ATTENUATION_RANGE.0, ATTENUATION_RANGE.1);
    }
    place(rng, &mut p, size);
    p
}

/// Random centre such that the arc stays `MARGIN` pixels inside the canvas.
fn place(rng: &mut ChaCha8Rng, p: &mut SynthParams, size: usize) {
    p.center = (0.0, 0.0);
    let (x1, y1, x2, y2) = p.extent();
    let s = size as f32;
    let cx = uniform(rng, MARGIN - x1, s - MARGIN - x2);
    let cy = uniform(rng, MARGIN - y1, s - MARGIN - y2);
    p.center = (cx, cy);
}

/// A slice of the same subject: small perturbations of the base arc.
pub fn jitter_slice(rng: &mut ChaCha8Rng, base: &SynthParams, size: usize) -> SynthParams {
    let k = size as f32 / 128.0;
    let mut p = base.clone();
    p.radius *= 1.0 + uniform(rng, -0.04, 0.04);
    p.thickness *= 1.0 + uniform(rng, -0.05, 0.05);
    p.span = (p.span + uniform(rng, -4.0, 4.0).to_radians()).clamp(PI, 1.5 * PI);
    p.mid_angle += uniform(rng, -3.0, 3.0).to_radians();
    p.intensity = (p.intensity + uniform(rng, -0.03, 0.03)).clamp(0.6, 1.0);
    if p.class_id == CLASS_APD {
        p.thinning = (p.thinning + uniform(rng, -0.02, 0.02)).clamp(THINNING_RANGE.0, THINNING_RANGE.1);
        p.attenuation = (p.attenuation + uniform(rng, -0.02, 0.02)).clamp(ATTENUATION_RANGE.0, ATTENUATION_RANGE.1);
    }
    p.center.0 += uniform(rng, -2.0, 2.0) * k;
    p.center.1 += uniform(rng, -2.0, 2.0) * k;
    let (x1, y1, x2, y2) = p.extent();
    let s = size as f32;
    if x1 < MARGIN || y1 < MARGIN || x2 > s - MARGIN || y2 > s - MARGIN {
        place(rng, &mut p, size);
    }
    p
}

/// Smooth random field: bilinear interpolation of a coarse random grid.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let g = 5;
    let base = uniform(rng, 0.12, 0.25);
    let coarse: Vec<f32> = (0..g * g).map(|_| base + uniform(rng, -0.08, 0.08)).collect();
    let mut out = vec![0.0; size * size];
    let scale = (g - 1) as f32 / (size - 1) as f32;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 * scale, y as f32 * scale);
            let (x0, y0) = ((fx as usize).min(g - 2), (fy as usize).min(g - 2));
            let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
            let c = |i: usize, j: usize| coarse[j * g + i];
            let top = c(x0, y0) * (1.0 - ax) + c(x0 + 1, y0) * ax;
            let bot = c(x0, y0 + 1) * (1.0 - ax) + c(x0 + 1, y0 + 1) * ax;
            out[y * size + x] = top * (1.0 - ay) + bot * ay;
        }
    }
    out
}

/// Renders one slice: image (quantised to 8 bits), shape mask (pixel centres
/// on the structure) and mid-body region mask.
pub fn render(rng: &mut ChaCha8Rng, p: &SynthParams, size: usize) -> (GrayImage, Mask, Mask) {
    let mut data = background(rng, size);
    let mut shape = Mask::empty(size, size);
    let mut region = Mask::empty(size, size);
    const SUB: [f32; 2] = [0.25, 0.75];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            shape.data[i] = p.contains(px, py);
            region.data[i] = p.in_midbody_region(px, py);
            // 2x2 supersampled coverage for soft edges
            let mut acc = 0.0;
            for sy in SUB {
                for sx in SUB {
                    let (qx, qy) = (x as f32 + sx, y as f32 + sy);
                    if let Some((u, rho)) = p.arc_position(qx, qy) {
                        if (rho - p.radius).abs() <= p.thickness_at(u) / 2.0 {
                            acc += p.intensity_at(u);
                        }
                    }
                }
            }
            let cover = acc / 4.0;
            let noise = uniform(rng, -0.03, 0.03) + uniform(rng, -0.03, 0.03);
            data[i] = (data[i] * (1.0 - cover.min(1.0)) + cover + noise).clamp(0.0, 1.0);
        }
    }
    let mut img = GrayImage { width: size, height: size, data };
    img.quantize_u8();
    (img, shape, region)
}

/// Tight boxes of `n` sampled slices (shape only, no rendering), as used to
/// fit the default anchors.
pub fn sample_boxes(n: usize, size: usize, seed: u64) -> Vec<crate::BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let class_id = out.len() % 2;
        let base = sample_subject(&mut rng, class_id, size);
        let p = jitter_slice(&mut rng, &base, size);
        let (x1, y1, x2, y2) = p.extent();
        let (mut bx1, mut by1, mut bx2, mut by2) = (usize::MAX, usize::MAX, 0, 0);
        let lo = |v: f32| (v.floor().max(0.0)) as usize;
        let hi = |v: f32| (v.ceil() as usize).min(size);
        for y in lo(y1)..hi(y2) {
            for x in lo(x1)..hi(x2) {
                if p.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    bx1 = bx1.min(x);
                    by1 = by1.min(y);
                    bx2 = bx2.max(x + 1);
                    by2 = by2.max(y + 1);
                }
            }
        }
        if bx1 != usize::MAX {
            out.push(crate::BBox::new(bx1 as f32, by1 as f32, bx2 as f32, by2 as f32));
        }
    }
    out
}

/// One rendered slice plus the parameters and shape mask it came from.
pub struct RenderedSlice {
    pub sample: AnnotatedImage,
    pub params: SynthParams,
    pub shape_mask: Mask,
}

/// Generates `n_subjects_per_class` subjects of each class with
/// `slices_per_subject` slices each, deterministically from `seed`.
pub fn generate_synthetic(
    n_subjects_per_class: usize,
    slices_per_subject: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<AnnotatedImage>> {
    Ok(generate_detailed(n_subjects_per_class, slices_per_subject, size, seed)?.into_iter().map(|r| r.sample).collect())
}

pub fn generate_detailed(
    n_subjects_per_class: usize,
    slices_per_subject: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<RenderedSlice>> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::config("size", format!("{size} is not a positive multiple of 32")));
    }
    if n_subjects_per_class == 0 || slices_per_subject == 0 {
        return Err(Error::config("subjects/slices", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_subjects_per_class * slices_per_subject);
    for class_id in [CLASS_HC, CLASS_APD] {
        for s in 0..n_subjects_per_class {
            let subject_id = format!("{}{:03}", ["hc", "apd"][class_id], s);
            let base = sample_subject(&mut rng, class_id, size);
            for slice_index in 0..slices_per_subject {
                let params = jitter_slice(&mut rng, &base, size);
                let (image, shape_mask, region) = render(&mut rng, &params, size);
                let bbox = shape_mask
                    .bounding_box()
                    .ok_or_else(|| Error::Dataset { record: subject_id.clone(), detail: "empty shape".into() })?;
                let sample = AnnotatedImage {
                    image,
                    subject_id: subject_id.clone(),
                    slice_index,
                    boxes: vec![GtBox { class_id, bbox }],
                    gt_region_mask: Some(region),
                };
                sample.validate()?;
                out.push(RenderedSlice { sample, params, shape_mask });
            }
        }
    }
    Ok(out)
}

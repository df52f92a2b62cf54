//! Eigen-CAM: the projection of a layer's activations onto their first
//! principal direction, used as a class-agnostic saliency map.
//!
//! An activation `C × H × W` is read as the matrix `M` of shape `(H·W) × C`.
//! With `M = U Σ Vᵀ`, the map is `M v₁` reshaped to `H × W`, sign-fixed so it
//! sums to a non-negative value, clamped at zero and min-max normalised.

use serde::{Deserialize, Serialize};

use crate::dataset::{images_to_tensor, AnnotatedImage, GrayImage, Mask};
use crate::detector::{decode, forward_with, DetectorWeights, NECK_OUTPUTS};
use crate::evalmetrics::EvalOptions;
use crate::ndtensor::Tensor;
use crate::postprocess::{classify_image, nms, ImageVerdict};
use crate::{BBox, Error, Exec, Result};

/// Canonical grid for averaging detection-box crops (width × height).
pub const AVERAGE_GRID: (usize, usize) = (64, 32);
/// Share of the hottest pixels used by the mass-in-region statistic.
pub const TOP_FRACTION: f64 = 0.05;

/// Thin SVD `A = U diag(s) Vᵀ` of an `m × n` row-major matrix, with
/// `k = min(m, n)` singular triplets sorted by decreasing singular value.
#[derive(Clone, Debug)]
pub struct Svd {
    pub m: usize,
    pub n: usize,
    /// `m × k`, row-major.
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    /// `n × k`, row-major.
    pub v: Vec<f64>,
}

impl Svd {
    pub fn k(&self) -> usize {
        self.s.len()
    }

    /// Column `j` of `V`.
    pub fn right_vector(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.v[i * self.k() + j]).collect()
    }

    pub fn left_vector(&self, j: usize) -> Vec<f64> {
        (0..self.m).map(|i| self.u[i * self.k() + j]).collect()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let k = self.k();
        let mut a = vec![0.0; self.m * self.n];
        for i in 0..self.m {
            for j in 0..self.n {
                a[i * self.n + j] = (0..k).map(|t| self.u[i * k + t] * self.s[t] * self.v[j * k + t]).sum();
            }
        }
        a
    }
}

/// One-sided Jacobi SVD. Wide inputs are transposed internally.
pub fn svd(a: &[f64], m: usize, n: usize) -> Result<Svd> {
    if m == 0 || n == 0 || a.len() != m * n {
        return Err(Error::shape("svd", format!("{m}x{n} matrix with {} entries", a.len())));
    }
    if m < n {
        let t: Vec<f64> = (0..n * m).map(|idx| a[(idx % m) * n + idx / m]).collect();
        let r = svd(&t, n, m)?;
        return Ok(Svd { m, n, u: r.v, s: r.s, v: r.u });
    }
    // columns of `w` are rotated until mutually orthogonal; `v` tracks the rotations
    let mut w = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    const EPS: f64 = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let (x, y) = (w[r * n + p], w[r * n + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (x, y) = (w[r * n + p], w[r * n + q]);
                    w[r * n + p] = c * x - s * y;
                    w[r * n + q] = s * x + c * y;
                }
                for r in 0..n {
                    let (x, y) = (v[r * n + p], v[r * n + q]);
                    v[r * n + p] = c * x - s * y;
                    v[r * n + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| (0..m).map(|r| w[r * n + j].powi(2)).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut u = vec![0.0; m * n];
    let mut vs = vec![0.0; n * n];
    let mut s = vec![0.0; n];
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        for r in 0..m {
            u[r * n + k] = if norms[j] > 0.0 { w[r * n + j] / norms[j] } else { 0.0 };
        }
        for r in 0..n {
            vs[r * n + k] = v[r * n + j];
        }
    }
    Ok(Svd { m, n, u, s, v: vs })
}

/// Saliency map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub layers: Vec<String>,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// First maximum in row-major order, as `(x, y)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Bilinear resampling of the sub-rectangle `region` (pixel units of this
    /// map) onto a `width × height` grid.
    pub fn resample(&self, region: &BBox, width: usize, height: usize) -> Heatmap {
        let img = GrayImage { width: self.width, height: self.height, data: self.values.clone() };
        let (sx, sy) = (region.width() / width as f32, region.height() / height as f32);
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(img.sample_bilinear(region.x1 + (x as f32 + 0.5) * sx, region.y1 + (y as f32 + 0.5) * sy));
            }
        }
        Heatmap { width, height, values, layers: self.layers.clone() }
    }

    pub fn upsample(&self, width: usize, height: usize) -> Heatmap {
        self.resample(&BBox::new(0.0, 0.0, self.width as f32, self.height as f32), width, height)
    }
}

/// Clamps at zero and rescales to `[0, 1]`; a map with no positive spread
/// becomes all zeros (or all ones when constant and positive).
fn normalize(raw: &[f64]) -> Vec<f32> {
    let clamped: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    let max = clamped.iter().copied().fold(0.0, f64::max);
    let min = clamped.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !max.is_finite() {
        return vec![0.0; raw.len()];
    }
    let span = max - min;
    if span <= max * 1e-12 {
        return vec![1.0; raw.len()];
    }
    clamped.iter().map(|&v| ((v - min) / span) as f32).collect()
}

/// Eigen-CAM of one activation, `C × H × W` or `1 × C × H × W`.
pub fn eigen_cam(activation: &Tensor) -> Result<Heatmap> {
    let s = activation.shape();
    let (c, h, w) = match *s {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => return Err(Error::shape("eigen_cam", format!("activation {s:?}, expected C×H×W"))),
    };
    let hw = h * w;
    let data = activation.data();
    // M[(y, x), ch]
    let mut m = vec![0.0f64; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            m[p * c + ch] = data[ch * hw + p] as f64;
        }
    }
    if m.iter().all(|&v| v == 0.0) {
        return Ok(Heatmap { width: w, height: h, values: vec![0.0; hw], layers: Vec::new() });
    }
    let dec = svd(&m, hw, c)?;
    let v1 = dec.right_vector(0);
    let mut raw: Vec<f64> = (0..hw).map(|p| (0..c).map(|ch| m[p * c + ch] * v1[ch]).sum()).collect();
    if raw.iter().sum::<f64>() < 0.0 {
        raw.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(Heatmap { width: w, height: h, values: normalize(&raw), layers: Vec::new() })
}

/// Pixelwise mean of per-layer maps upsampled to `size × size`, renormalised.
pub fn combine(maps: &[Heatmap], width: usize, height: usize) -> Result<Heatmap> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no layer maps to combine".into()));
    }
    let ups: Vec<Heatmap> = maps.iter().map(|m| m.upsample(width, height)).collect();
    let n = ups.len() as f64;
    let mean: Vec<f64> = (0..width * height).map(|i| ups.iter().map(|u| u.values[i] as f64).sum::<f64>() / n).collect();
    let layers = maps.iter().flat_map(|m| m.layers.clone()).collect();
    Ok(Heatmap { width, height, values: normalize(&mean), layers })
}

/// Default capture points: the three neck outputs feeding the head.
pub fn default_layers() -> Vec<String> {
    NECK_OUTPUTS.iter().map(|s| s.to_string()).collect()
}

/// Heatmap at image resolution together with the image's verdict.
pub fn multilayer_cam(
    weights: &DetectorWeights,
    image: &GrayImage,
    layers: &[String],
    opts: &EvalOptions,
) -> Result<(Heatmap, ImageVerdict)> {
    let x = images_to_tensor(&[image])?;
    let names: Vec<&str> = layers.iter().map(String::as_str).collect();
    let (raw, captured) = forward_with(Exec::Sequential, weights, &x, &names)?;
    let mut maps = Vec::with_capacity(layers.len());
    for name in layers {
        let mut m = eigen_cam(&captured[name])?;
        m.layers = vec![name.clone()];
        maps.push(m);
    }
    let heat = combine(&maps, image.width, image.height)?;
    let dets = decode(&raw, weights.config(), opts.conf_threshold).pop().unwrap_or_default();
    Ok((heat, classify_image(&nms(&dets, opts.iou_threshold))))
}

/// Localisation statistics of one heatmap against a region mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamStats {
    pub argmax: (usize, usize),
    pub argmax_in_region: Option<bool>,
    /// Share of the top-5% pixels' heat that falls inside the region.
    pub top_mass_in_region: Option<f64>,
    pub abstained: bool,
}

pub fn cam_stats(heat: &Heatmap, region: Option<&Mask>, abstained: bool) -> Result<CamStats> {
    let argmax = heat.argmax();
    let (argmax_in_region, top_mass_in_region) = match region {
        None => (None, None),
        Some(m) => {
            if (m.width, m.height) != (heat.width, heat.height) {
                return Err(Error::shape("cam_stats", "mask and heatmap differ in size"));
            }
            let mut order: Vec<usize> = (0..heat.values.len()).collect();
            order.sort_by(|&a, &b| heat.values[b].total_cmp(&heat.values[a]));
            let k = ((heat.values.len() as f64 * TOP_FRACTION).ceil() as usize).max(1);
            let total: f64 = order[..k].iter().map(|&i| heat.values[i] as f64).sum();
            let inside: f64 = order[..k].iter().filter(|&&i| m.data[i]).map(|&i| heat.values[i] as f64).sum();
            let frac = if total > 0.0 { Some(inside / total) } else { None };
            (Some(!heat.is_zero() && m.get(argmax.0, argmax.1)), frac)
        }
    };
    Ok(CamStats { argmax, argmax_in_region, top_mass_in_region, abstained })
}

/// Per-corpus summary of [`cam_stats`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusCamStats {
    pub images: usize,
    pub abstained: usize,
    /// Share of images with a region mask whose brightest pixel lies in it.
    pub brightest_in_region_rate: Option<f64>,
    pub mean_top_mass_in_region: Option<f64>,
    pub per_image: Vec<CamStats>,
}

impl CorpusCamStats {
    pub fn from_stats(per_image: Vec<CamStats>) -> Self {
        let hits: Vec<bool> = per_image.iter().filter_map(|s| s.argmax_in_region).collect();
        let masses: Vec<f64> = per_image.iter().filter_map(|s| s.top_mass_in_region).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let rates: Vec<f64> = hits.iter().map(|&h| h as u8 as f64).collect();
        CorpusCamStats {
            images: per_image.len(),
            abstained: per_image.iter().filter(|s| s.abstained).count(),
            brightest_in_region_rate: mean(&rates),
            mean_top_mass_in_region: mean(&masses),
            per_image,
        }
    }
}

/// Average of detection-box crops on the canonical grid plus per-image
/// statistics. Abstained images are skipped for the average but counted.
pub fn average_cam(
    weights: &DetectorWeights,
    images: &[&AnnotatedImage],
    layers: &[String],
    opts: &EvalOptions,
    exec: Exec,
) -> Result<(Heatmap, CorpusCamStats)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("average_cam needs at least one image".into()));
    }
    let per = exec.map_slice(images, |s| -> Result<(Heatmap, ImageVerdict, CamStats)> {
        let (heat, verdict) = multilayer_cam(weights, &s.image, layers, opts)?;
        let stats = cam_stats(&heat, s.gt_region_mask.as_ref(), verdict.is_abstain())?;
        Ok((heat, verdict, stats))
    });
    let (gw, gh) = AVERAGE_GRID;
    let mut acc = vec![0.0f64; gw * gh];
    let mut used = 0;
    let mut stats = Vec::with_capacity(images.len());
    for r in per {
        let (heat, verdict, st) = r?;
        if let Some(d) = &verdict.detection {
            let crop = heat.resample(&d.bbox, gw, gh);
            acc.iter_mut().zip(&crop.values).for_each(|(a, &v)| *a += v as f64);
            used += 1;
        }
        stats.push(st);
    }
    let corpus = CorpusCamStats::from_stats(stats);
    if used == 0 {
        return Err(Error::InvalidArgument(format!("all {} images abstained; nothing to average", images.len())));
    }
    acc.iter_mut().for_each(|a| *a /= used as f64);
    let avg = Heatmap { width: gw, height: gh, values: normalize(&acc), layers: layers.to_vec() };
    Ok((avg, corpus))
}

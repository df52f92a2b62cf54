//! Anchor fitting: k-means over box sizes with `1 - IoU` of centre-aligned
//! boxes as the distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::synth::sample_boxes;

pub const DEFAULT_ANCHOR_SAMPLES: usize = 10_000;
pub const DEFAULT_ANCHOR_SEED: u64 = 0;

fn aligned_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    inter / (a[0] * a[1] + b[0] * b[1] - inter)
}

fn nearest(p: [f64; 2], centers: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centers.iter().enumerate() {
        let d = 1.0 - aligned_iou(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Seeded k-means++ initialisation followed by Lloyd iterations until the
/// assignment stops changing. Returns centres sorted by area.
pub fn kmeans_wh(sizes: &[[f64; 2]], k: usize, seed: u64, max_iter: usize) -> Vec<[f64; 2]> {
    assert!(k >= 1 && sizes.len() >= k, "need at least k samples");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![sizes[rng.random_range(0..sizes.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = sizes.iter().map(|&p| nearest(p, &centers).1.powi(2)).collect();
        let total: f64 = d2.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = sizes.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            r -= d;
            if r <= 0.0 {
                pick = i;
                break;
            }
        }
        centers.push(sizes[pick]);
    }
    let mut labels = vec![usize::MAX; sizes.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (l, &p) in labels.iter_mut().zip(sizes) {
            let n = nearest(p, &centers).0;
            changed |= *l != n;
            *l = n;
        }
        if !changed {
            break;
        }
        let mut acc = vec![[0.0f64; 3]; k];
        for (&l, p) in labels.iter().zip(sizes) {
            acc[l][0] += p[0];
            acc[l][1] += p[1];
            acc[l][2] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[2] > 0.0 {
                *c = [a[0] / a[2], a[1] / a[2]];
            }
        }
    }
    centers.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
    centers
}

/// Nine anchors fitted to the generator's box distribution at `size`,
/// smallest three to stride 8, largest three to stride 32. Rounded to 0.1 px.
pub fn default_anchors_from_generator(size: usize, samples: usize, seed: u64) -> [[[f32; 2]; 3]; 3] {
    let sizes: Vec<[f64; 2]> =
        sample_boxes(samples, size, seed).iter().map(|b| [b.width() as f64, b.height() as f64]).collect();
    let c = kmeans_wh(&sizes, 9, seed, 300);
    std::array::from_fn(|s| std::array::from_fn(|a| c[3 * s + a].map(|v| ((v * 10.0).round() / 10.0) as f32)))
}

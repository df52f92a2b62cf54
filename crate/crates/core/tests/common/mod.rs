//! Reference implementations used as independent oracles. Everything here is
//! written the slow, obvious way and shares no code with the library beyond
//! plain data types.
#![allow(dead_code)]

pub mod cam;
pub mod data;
pub mod equiv;
pub mod grad;
pub mod run;

use ccdet::detector::{DetectorConfig, RawPrediction, NUM_ANCHORS};
use ccdet::postprocess::Detection;
use ccdet::BBox;

pub fn conv2d_naive(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, ci, k, _] = ws;
    assert_eq!(c, ci);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; n * o * ho * wo];
    for ni in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, o, ho, wo])
}

/// Padding never wins; windows always hold at least one real element here.
pub fn maxpool_naive(x: &[f64], xs: [usize; 4], k: usize, stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            m = m.max(x[(p * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    (out, [n, c, ho, wo])
}

pub fn upsample_naive(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let mut out = vec![0.0; n * c * 4 * h * w];
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn iou_f64(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x1 as f64, a.y1 as f64, a.x2 as f64, a.y2 as f64);
    let (bx1, by1, bx2, by2) = (b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly takes the best remaining detection (lowest index on ties) and
/// deletes everything overlapping it by more than `thr`.
pub fn nms_brute(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.map_or(true, |b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        for j in 0..dets.len() {
            if alive[j] && iou_f64(&dets[b].bbox, &dets[j].bbox) > thr {
                alive[j] = false;
            }
        }
        kept.push(dets[b].clone());
    }
    kept
}

fn logistic(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        x.exp() / (1.0 + x.exp())
    }
}

/// Cell-by-cell decode reading the 5-D head layout by explicit indexing.
pub fn decode_per_cell(raw: &RawPrediction, cfg: &DetectorConfig, conf: f32) -> Vec<Vec<Detection>> {
    let n_img = raw.batch();
    let nc = cfg.num_classes;
    let size = cfg.input_size as f32;
    let mut out = vec![Vec::new(); n_img];
    for (img, dets) in out.iter_mut().enumerate() {
        for s in 0..3 {
            let t = &raw.scales[s];
            let g = t.shape()[3];
            let stride = cfg.strides[s] as f32;
            let at = |a: usize, k: usize, y: usize, x: usize| t.data()[(((img * NUM_ANCHORS + a) * (5 + nc) + k) * g + y) * g + x];
            for a in 0..NUM_ANCHORS {
                for y in 0..g {
                    for x in 0..g {
                        let obj = logistic(at(a, 4, y, x));
                        let scores: Vec<f32> = (0..nc).map(|c| obj * logistic(at(a, 5 + c, y, x))).collect();
                        let mut best = 0;
                        for c in 1..nc {
                            if scores[c] > scores[best] {
                                best = c;
                            }
                        }
                        if scores[best] < conf {
                            continue;
                        }
                        let [aw, ah] = cfg.anchors[s][a];
                        let cx = ((2.0 * logistic(at(a, 0, y, x)) - 0.5 + x as f32) * stride).clamp(0.0, size);
                        let cy = ((2.0 * logistic(at(a, 1, y, x)) - 0.5 + y as f32) * stride).clamp(0.0, size);
                        let w = (aw * (2.0 * logistic(at(a, 2, y, x))).powi(2)).max(1e-3);
                        let h = (ah * (2.0 * logistic(at(a, 3, y, x))).powi(2)).max(1e-3);
                        let bbox = BBox::new(
                            (cx - w / 2.0).clamp(0.0, size),
                            (cy - h / 2.0).clamp(0.0, size),
                            (cx + w / 2.0).clamp(0.0, size),
                            (cy + h / 2.0).clamp(0.0, size),
                        );
                        dets.push(Detection { bbox, class_id: best, score: scores[best], class_scores: scores });
                    }
                }
            }
        }
    }
    out
}

/// IoU by counting the centres of `step × step` cells; exact when every
/// coordinate is a multiple of `step`.
pub fn raster_iou(a: [f64; 4], b: [f64; 4], step: f64) -> f64 {
    let lo_x = a[0].min(b[0]);
    let lo_y = a[1].min(b[1]);
    let nx = ((a[2].max(b[2]) - lo_x) / step).round() as usize;
    let ny = ((a[3].max(b[3]) - lo_y) / step).round() as usize;
    let inside = |r: [f64; 4], x: f64, y: f64| x > r[0] && x < r[2] && y > r[1] && y < r[3];
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..ny {
        let y = lo_y + (j as f64 + 0.5) * step;
        for i in 0..nx {
            let x = lo_x + (i as f64 + 0.5) * step;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    inter as f64 / union as f64
}

/// CIoU with the overlap term measured by rasterisation.
pub fn ciou_raster(a: [f64; 4], b: [f64; 4], step: f64) -> f64 {
    let iou = raster_iou(a, b, step);
    let ca = ((a[0] + a[2]) / 2.0, (a[1] + a[3]) / 2.0);
    let cb = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
    let rho2 = (ca.0 - cb.0).powi(2) + (ca.1 - cb.1).powi(2);
    let diag2 = (a[2].max(b[2]) - a[0].min(b[0])).powi(2) + (a[3].max(b[3]) - a[1].min(b[1])).powi(2);
    let ar_a = ((a[2] - a[0]) / (a[3] - a[1])).atan();
    let ar_b = ((b[2] - b[0]) / (b[3] - b[1])).atan();
    let v = 4.0 / std::f64::consts::PI.powi(2) * (ar_b - ar_a).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / (1.0 - iou + v) };
    iou - rho2 / diag2 - alpha * v
}

/// AUC as the probability that a random positive outranks a random negative,
/// ties counting one half.
pub fn auc_pairs(scores: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// `(scale, image, anchor, cell_y, cell_x)` of every positive slot, found by
/// testing each cell of each grid against the neighbour rule.
pub fn assign_exhaustive(gt: &[Vec<BBox>], cfg: &DetectorConfig, ratio: f64) -> Vec<(usize, usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for (img, boxes) in gt.iter().enumerate() {
        for b in boxes {
            let (w, h) = ((b.x2 - b.x1) as f64, (b.y2 - b.y1) as f64);
            let cx = (b.x1 as f64 + b.x2 as f64) / 2.0;
            let cy = (b.y1 as f64 + b.y2 as f64) / 2.0;
            for s in 0..3 {
                let stride = cfg.strides[s] as f64;
                let g = cfg.input_size / cfg.strides[s];
                let (gx, gy) = (cx / stride, cy / stride);
                for a in 0..NUM_ANCHORS {
                    let [aw, ah] = cfg.anchors[s][a];
                    let (aw, ah) = (aw as f64, ah as f64);
                    let r = [w / aw, aw / w, h / ah, ah / h].into_iter().fold(0.0, f64::max);
                    if r >= ratio {
                        continue;
                    }
                    for y in 0..g {
                        for x in 0..g {
                            let (dx, dy) = (gx - x as f64, gy - y as f64);
                            let in_x = (0.0..1.0).contains(&dx);
                            let in_y = (0.0..1.0).contains(&dy);
                            // neighbour on the side of the nearer edge
                            let nb_x = (1.0..=1.5).contains(&dx) || (dx > -0.5 && dx < 0.0);
                            let nb_y = (1.0..=1.5).contains(&dy) || (dy > -0.5 && dy < 0.0);
                            if (in_x && in_y) || (nb_x && in_y) || (in_x && nb_y) {
                                out.push((s, img, a, y, x));
                            }
                        }
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Central differences of `f` at every coordinate of `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a floor on the denominator so vanishing
/// gradients compare absolutely.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

/// Reads `tests/golden/<name>`, or writes it from `current` when
/// `CCDET_BLESS=1` is set.
pub fn golden<T: serde::Serialize + serde::de::DeserializeOwned>(name: &str, current: &T) -> T {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var("CCDET_BLESS").is_ok_and(|v| v == "1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(current).unwrap() + "\n").unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e} (run with CCDET_BLESS=1 to create)", path.display()));
    serde_json::from_str(&text).unwrap()
}

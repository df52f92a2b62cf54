//! Library vs reference-implementation trials. Each draws its case from `seed`.

use ccdet::detector::{decode, DetectorConfig, RawPrediction, NUM_ANCHORS};
use ccdet::evalmetrics::roc_auc;
use ccdet::losses::{assign_targets, ciou};
use ccdet::ndtensor::{Graph, Tensor};
use ccdet::postprocess::{nms, Detection};
use ccdet::{BBox, Exec, GtBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{assign_exhaustive, auc_pairs, ciou_raster, conv2d_naive, decode_per_cell, maxpool_naive, nms_brute, rel_err};

pub const CONV_TOL: f64 = 1e-6;
pub const CIOU_TOL: f64 = 1e-3;
pub const AUC_TOL: f64 = 1e-9;

fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn both_execs() -> [Exec; 2] {
    [Exec::Sequential, Exec::Parallel]
}

/// `‖lib − naive‖ / ‖naive‖`, worst of both execution modes.
pub fn conv_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let pad = rng.random_range(0..=k / 2);
    let stride = rng.random_range(1..3);
    let xs = [rng.random_range(1..3), rng.random_range(1..9), rng.random_range(k..k + 9), rng.random_range(k..k + 9)];
    let ws = [rng.random_range(1..9), xs[1], k, k];
    let x = values(&mut rng, xs.iter().product());
    let w = values(&mut rng, ws.iter().product());
    let b = values(&mut rng, ws[0]);
    let f64s = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let (want, shape) = conv2d_naive(&f64s(&x), xs, &f64s(&w), ws, Some(&f64s(&b)), stride, pad);
    let mut worst = 0.0f64;
    for exec in both_execs() {
        let mut g = Graph::with_exec(exec);
        let xv = g.constant(Tensor::new(xs.to_vec(), x.clone()).unwrap());
        let wv = g.constant(Tensor::new(ws.to_vec(), w.clone()).unwrap());
        let bv = g.constant(Tensor::new([ws[0]], b.clone()).unwrap());
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(g.shape(y), shape.as_slice());
        let got: Vec<f64> = g.value(y).data().iter().map(|&a| a as f64).collect();
        worst = worst.max(rel_err(&got, &want));
    }
    worst
}

/// Pooling is a selection, so agreement must be exact.
pub fn pool_trial(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, stride, pad) = [(2, 2, 0), (3, 1, 1), (5, 1, 2), (9, 1, 4), (13, 1, 6), (3, 2, 1)][rng.random_range(0..6)];
    let xs = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(k.max(2)..k + 6), rng.random_range(k.max(2)..k + 6)];
    // coarse values so ties occur
    let x: Vec<f32> = (0..xs.iter().product()).map(|_| rng.random_range(-4..4) as f32 * 0.25).collect();
    let (want, shape) = maxpool_naive(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), xs, k, stride, pad);
    both_execs().into_iter().all(|exec| {
        let mut g = Graph::with_exec(exec);
        let xv = g.constant(Tensor::new(xs.to_vec(), x.clone()).unwrap());
        let y = g.maxpool2d(xv, k, stride, pad).unwrap();
        g.shape(y) == shape.as_slice() && g.value(y).data().iter().zip(&want).all(|(a, b)| *a as f64 == *b)
    })
}

fn random_detections(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let n = rng.random_range(0..40);
    // a few cluster centres so that overlaps are common
    let centres: Vec<(f32, f32)> = (0..rng.random_range(1..5)).map(|_| (rng.random_range(20.0..100.0), rng.random_range(20.0..100.0))).collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centres[rng.random_range(0..centres.len())];
            let (x, y) = (cx + rng.random_range(-12.0..12.0), cy + rng.random_range(-12.0..12.0));
            let (w, h) = (rng.random_range(4.0..50.0f32), rng.random_range(4.0..50.0f32));
            let score = rng.random_range(0..20) as f32 / 20.0;
            let class_id = rng.random_range(0..2);
            let mut class_scores = vec![0.0; 2];
            class_scores[class_id] = score;
            Detection { bbox: BBox::from_center(x, y, w, h), class_id, score, class_scores }
        })
        .collect()
}

pub fn nms_trial(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dets = random_detections(&mut rng);
    let thr = rng.random_range(0.1..0.9f32);
    nms(&dets, thr) == nms_brute(&dets, thr as f64)
}

pub fn decode_trial(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DetectorConfig { input_size: [32, 64, 96][rng.random_range(0..3)], ..Default::default() };
    let batch = rng.random_range(1..3);
    let spread = rng.random_range(1.0..8.0f32);
    let scales = (0..3)
        .map(|s| {
            let g = cfg.grid_size(s);
            let shape = vec![batch, NUM_ANCHORS, 5 + cfg.num_classes, g, g];
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-spread..spread)).collect()).unwrap()
        })
        .collect();
    let raw = RawPrediction { scales };
    let conf = rng.random_range(0.0..0.7f32);
    decode(&raw, &cfg, conf) == decode_per_cell(&raw, &cfg, conf)
}

/// Boxes on a quarter-pixel lattice so the rasterised overlap is exact.
pub fn ciou_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quarter_box = |rng: &mut ChaCha8Rng| {
        let x1 = rng.random_range(0..120) as f64 * 0.25;
        let y1 = rng.random_range(0..120) as f64 * 0.25;
        let w = rng.random_range(1..100) as f64 * 0.25;
        let h = rng.random_range(1..100) as f64 * 0.25;
        [x1, y1, x1 + w, y1 + h]
    };
    let a = quarter_box(&mut rng);
    let b = if rng.random_bool(0.1) { a } else { quarter_box(&mut rng) };
    let bb = |v: [f64; 4]| BBox::new(v[0] as f32, v[1] as f32, v[2] as f32, v[3] as f32);
    let lib = ciou(&bb(a), &bb(b)).unwrap();
    (lib - ciou_raster(a, b, 0.25)).abs()
}

pub fn auc_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..200);
    let levels = rng.random_range(2..50);
    let mut scores: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let pos = rng.random_bool(0.5);
            let bias = if pos { rng.random_range(0..=levels) } else { 0 };
            (((rng.random_range(0..=levels) + bias) as f64) / (2 * levels) as f64, pos)
        })
        .collect();
    scores[0].1 = true;
    scores[1].1 = false;
    let (_, auc) = roc_auc(&scores).unwrap();
    (auc - auc_pairs(&scores)).abs()
}

pub fn assignment_trial(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DetectorConfig::default();
    let size = cfg.input_size as f32;
    let gt: Vec<Vec<BBox>> = (0..rng.random_range(1..4))
        .map(|_| {
            (0..rng.random_range(0..4))
                .map(|_| {
                    let (w, h) = (rng.random_range(4.0..120.0f32), rng.random_range(4.0..120.0f32));
                    let (cx, cy) = (rng.random_range(1.0..size - 1.0), rng.random_range(1.0..size - 1.0));
                    BBox::from_center(cx, cy, w, h)
                })
                .collect()
        })
        .collect();
    let labelled: Vec<Vec<GtBox>> = gt.iter().map(|v| v.iter().map(|&bbox| GtBox { class_id: 0, bbox }).collect()).collect();
    let a = assign_targets(&labelled, &cfg);
    let mut got: Vec<_> = a
        .scales
        .iter()
        .enumerate()
        .flat_map(|(s, v)| v.iter().map(move |e| (s, e.image, e.anchor, e.cell_y, e.cell_x)))
        .collect();
    got.sort_unstable();
    got == assign_exhaustive(&gt, &cfg, 4.0)
}

//! Gradient checks. Each trial draws shapes and values from `seed`, runs the
//! library's reverse pass and compares it against central differences of the
//! independent `f64` forward oracles.

use ccdet::detector::{DetectorConfig, NUM_ANCHORS};
use ccdet::losses::{assign_targets, loss_and_grad, HeadValues, LossConfig};
use ccdet::ndtensor::{Graph, Tensor, Var};
use ccdet::{BBox, GtBox};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{conv2d_naive, fd_gradient, maxpool_naive, rel_err, upsample_naive};

pub const OPS: [&str; 12] = [
    "conv2d",
    "leaky_relu",
    "sigmoid",
    "maxpool2d",
    "upsample_nearest_2x",
    "concat_channels",
    "add",
    "mul",
    "matmul",
    "sum",
    "reshape",
    "total_loss",
];

pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` apart, in random order, so max and sign never flip
/// under a finite-difference step.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let offset = rng.random_range(-0.5..0.5);
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * gap + offset).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Worst relative error over all inputs of `Σ r ⊙ op(inputs)` for a random `r`.
fn check(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    oracle: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars);
    let shape = g.shape(y).to_vec();
    let r = uniform(rng, &shape, -1.0, 1.0);
    let r64 = to64(&r);
    let rv = g.constant(r);
    let p = g.mul(y, rv).unwrap();
    let l = g.sum(p).unwrap();
    g.backward(l).unwrap();

    let xs: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(v).expect("leaf gradient").iter().map(|&x| x as f64).collect();
        let f = |xi: &[f64]| {
            let mut all = xs.clone();
            all[i] = xi.to_vec();
            oracle(&all).iter().zip(&r64).map(|(a, b)| a * b).sum()
        };
        worst = worst.max(rel_err(&analytic, &fd_gradient(f, &xs[i], STEP)));
    }
    worst
}

pub fn trial(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    match op {
        "conv2d" => {
            let k = [1, 3][rng.random_range(0..2)];
            let pad = if k == 3 { rng.random_range(0..2) } else { 0 };
            let stride = rng.random_range(1..3);
            let xs = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..7), rng.random_range(3..7)];
            let ws = [rng.random_range(1..4), xs[1], k, k];
            let x = uniform(rng, &xs, -1.0, 1.0);
            let w = uniform(rng, &ws, -1.0, 1.0);
            let b = uniform(rng, &[ws[0]], -1.0, 1.0);
            check(
                rng,
                vec![x, w, b],
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(),
                |a| conv2d_naive(&a[0], xs, &a[1], ws, Some(&a[2]), stride, pad).0,
            )
        }
        "leaky_relu" => {
            let slope = rng.random_range(0.01..0.5);
            let x = spread(rng, &[2, 3, 4], 0.05);
            check(rng, vec![x], |g, v| g.leaky_relu(v[0], slope).unwrap(), |a| {
                a[0].iter().map(|&x| if x > 0.0 { x } else { slope as f64 * x }).collect()
            })
        }
        "sigmoid" => {
            let x = uniform(rng, &[3, 5], -6.0, 6.0);
            check(rng, vec![x], |g, v| g.sigmoid(v[0]).unwrap(), |a| a[0].iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect())
        }
        "maxpool2d" => {
            let (k, stride, pad) = [(2, 2, 0), (3, 1, 1), (5, 1, 2), (3, 2, 1)][rng.random_range(0..4)];
            let xs = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(k..k + 4), rng.random_range(k..k + 4)];
            let x = spread(rng, &xs, 0.01);
            check(rng, vec![x], |g, v| g.maxpool2d(v[0], k, stride, pad).unwrap(), |a| maxpool_naive(&a[0], xs, k, stride, pad).0)
        }
        "upsample_nearest_2x" => {
            let xs = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5)];
            let x = uniform(rng, &xs, -1.0, 1.0);
            check(rng, vec![x], |g, v| g.upsample_nearest_2x(v[0]).unwrap(), |a| upsample_naive(&a[0], xs))
        }
        "concat_channels" => {
            let (n, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let (c1, c2) = (rng.random_range(1..4), rng.random_range(1..4));
            let a = uniform(rng, &[n, c1, h, w], -1.0, 1.0);
            let b = uniform(rng, &[n, c2, h, w], -1.0, 1.0);
            check(rng, vec![a, b], |g, v| g.concat_channels(v).unwrap(), |a| {
                let mut out = Vec::new();
                for i in 0..n {
                    out.extend_from_slice(&a[0][i * c1 * h * w..(i + 1) * c1 * h * w]);
                    out.extend_from_slice(&a[1][i * c2 * h * w..(i + 1) * c2 * h * w]);
                }
                out
            })
        }
        "add" | "mul" => {
            let shape = [rng.random_range(1..4), rng.random_range(1..6)];
            let a = uniform(rng, &shape, -2.0, 2.0);
            let b = uniform(rng, &shape, -2.0, 2.0);
            let is_add = op == "add";
            check(
                rng,
                vec![a, b],
                |g, v| if is_add { g.add(v[0], v[1]).unwrap() } else { g.mul(v[0], v[1]).unwrap() },
                |a| a[0].iter().zip(&a[1]).map(|(x, y)| if is_add { x + y } else { x * y }).collect(),
            )
        }
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let a = uniform(rng, &[m, k], -1.0, 1.0);
            let b = uniform(rng, &[k, n], -1.0, 1.0);
            check(rng, vec![a, b], |g, v| g.matmul(v[0], v[1]).unwrap(), |a| {
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = (0..k).map(|p| a[0][i * k + p] * a[1][p * n + j]).sum();
                    }
                }
                out
            })
        }
        "sum" => {
            let shape = [rng.random_range(1..5), rng.random_range(1..5)];
            let x = uniform(rng, &shape, -1.0, 1.0);
            check(rng, vec![x], |g, v| g.sum(v[0]).unwrap(), |a| vec![a[0].iter().sum()])
        }
        "reshape" => {
            let (p, q) = (rng.random_range(1..5), rng.random_range(1..5));
            let x = uniform(rng, &[p, q], -1.0, 1.0);
            // a following sigmoid makes the upstream gradient depend on position
            check(
                rng,
                vec![x],
                |g, v| {
                    let r = g.reshape(v[0], &[q, p]).unwrap();
                    g.sigmoid(r).unwrap()
                },
                |a| a[0].iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
            )
        }
        "total_loss" => total_loss_trial(rng),
        other => panic!("unknown op {other}"),
    }
}

fn total_loss_trial(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = DetectorConfig { input_size: 64, ..Default::default() };
    let size = cfg.input_size as f32;
    let batch = rng.random_range(1..3);
    let gt: Vec<Vec<GtBox>> = (0..batch)
        .map(|_| {
            (0..rng.random_range(1..3))
                .map(|_| {
                    let (w, h) = (rng.random_range(16.0..60.0f32), rng.random_range(16.0..60.0f32));
                    let x1 = rng.random_range(0.0..size - w);
                    let y1 = rng.random_range(0.0..size - h);
                    GtBox { class_id: rng.random_range(0..2), bbox: BBox::new(x1, y1, x1 + w, y1 + h) }
                })
                .collect()
        })
        .collect();
    let assignment = assign_targets(&gt, &cfg);
    let lens: Vec<usize> = (0..3).map(|s| batch * NUM_ANCHORS * (5 + cfg.num_classes) * cfg.grid_size(s).pow(2)).collect();
    let flat: Vec<f64> = (0..lens.iter().sum()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lcfg = LossConfig::default();
    let heads = |v: &[f64]| {
        let mut scales = Vec::new();
        let mut at = 0;
        for &n in &lens {
            scales.push(v[at..at + n].to_vec());
            at += n;
        }
        HeadValues { batch, scales }
    };
    let (_, grads) = loss_and_grad(&heads(&flat), &assignment, &cfg, &lcfg).unwrap();
    let analytic: Vec<f64> = grads.concat();
    let numeric = fd_gradient(|v| loss_and_grad(&heads(v), &assignment, &cfg, &lcfg).unwrap().0.total, &flat, STEP);
    rel_err(&analytic, &numeric)
}

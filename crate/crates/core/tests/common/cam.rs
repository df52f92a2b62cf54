//! Eigen-CAM trials against a 64-bit SVD from nalgebra.

use ccdet::eigencam::{eigen_cam, svd};
use ccdet::ndtensor::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RECONSTRUCTION_TOL: f64 = 1e-5;
pub const RANK_ONE_CORRELATION: f64 = 0.999;
pub const SCALE_TOL: f64 = 1e-6;
pub const PROJECTION_TOL: f64 = 1e-4;

pub struct SvdCheck {
    pub reconstruction: f64,
    /// Largest relative gap to the oracle's singular values.
    pub singular_values: f64,
    pub v1_norm_gap: f64,
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn oracle_singular_values(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut s: Vec<f64> = DMatrix::from_row_slice(m, n, a).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn svd_trial(seed: u64) -> SvdCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (rng.random_range(1..80), rng.random_range(1..40));
    let a: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d = svd(&a, m, n).unwrap();
    let back = d.reconstruct();
    let diff: Vec<f64> = a.iter().zip(&back).map(|(x, y)| x - y).collect();
    let want = oracle_singular_values(&a, m, n);
    let top = want[0].max(1e-300);
    let singular_values = d.s.iter().zip(&want).map(|(x, y)| (x - y).abs() / top).fold(0.0, f64::max);
    let v1 = d.right_vector(0);
    SvdCheck {
        reconstruction: frobenius(&diff) / frobenius(&a),
        singular_values,
        v1_norm_gap: (frobenius(&v1) - 1.0).abs(),
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn activation_matrix(t: &Tensor) -> (Vec<f64>, usize, usize) {
    let s = t.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut m = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            m[p * c + ch] = t.data()[ch * hw + p] as f64;
        }
    }
    (m, hw, c)
}

/// Correlation of the heatmap with `u` for a rank-1 activation `u·σ·vᵀ`
/// with positive `u`, and of the SVD's first left vector with a signed `u`.
pub fn rank_one_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.random_range(1..16), rng.random_range(2..12), rng.random_range(2..12));
    let sigma = rng.random_range(0.1..10.0);
    let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut worst = f64::INFINITY;
    for positive in [true, false] {
        let u: Vec<f64> = (0..h * w).map(|_| if positive { rng.random_range(0.1..1.0) } else { rng.random_range(-1.0..1.0) }).collect();
        let data: Vec<f32> = (0..c).flat_map(|ch| u.iter().map(|&ui| (ui * sigma * v[ch]) as f32).collect::<Vec<_>>()).collect();
        let t = Tensor::new([c, h, w], data).unwrap();
        let r = if positive {
            let heat = eigen_cam(&t).unwrap();
            correlation(&heat.values.iter().map(|&x| x as f64).collect::<Vec<_>>(), &u)
        } else {
            let (m, rows, cols) = activation_matrix(&t);
            correlation(&svd(&m, rows, cols).unwrap().left_vector(0), &u).abs()
        };
        worst = worst.min(r);
    }
    worst
}

/// Largest pixel difference between the maps of `A` and `k·A`.
pub fn scale_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.random_range(1..12), rng.random_range(2..12), rng.random_range(2..12));
    let k: f32 = 10f32.powf(rng.random_range(-3.0..3.0));
    let data: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-0.3..1.0)).collect();
    let a = eigen_cam(&Tensor::new([c, h, w], data.clone()).unwrap()).unwrap();
    let b = eigen_cam(&Tensor::new([c, h, w], data.iter().map(|x| x * k).collect()).unwrap()).unwrap();
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// `M·v₁` against `σ₁·u₁` of the oracle for a random 8×16×16 activation, up to sign.
pub fn projection_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::new([8, 16, 16], (0..8 * 256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (m, rows, cols) = activation_matrix(&t);
    let d = svd(&m, rows, cols).unwrap();
    let v1 = d.right_vector(0);
    let proj: Vec<f64> = (0..rows).map(|p| (0..cols).map(|c| m[p * cols + c] * v1[c]).sum()).collect();

    let o = DMatrix::from_row_slice(rows, cols, &m).svd(true, false);
    let top = (0..o.singular_values.len()).max_by(|&i, &j| o.singular_values[i].total_cmp(&o.singular_values[j])).unwrap();
    let u = o.u.unwrap();
    let want: Vec<f64> = (0..rows).map(|p| o.singular_values[top] * u[(p, top)]).collect();
    let err = |sign: f64| {
        let diff: Vec<f64> = proj.iter().zip(&want).map(|(a, b)| a - sign * b).collect();
        frobenius(&diff) / frobenius(&want)
    };
    err(1.0).min(err(-1.0))
}

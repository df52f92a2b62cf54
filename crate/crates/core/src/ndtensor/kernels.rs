//! Raw compute kernels over flat row-major buffers.
//!
//! Convolution is lowered to `im2col` + SGEMM. The per-image loops take an
//! [`Exec`] policy; cross-image reductions (weight and bias gradients) are
//! summed afterwards in image order so both policies agree bit for bit.

use crate::Exec;

/// Geometry of a square-kernel 2-D convolution over one NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn in_plane(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_ch * self.out_height() * self.out_width()
    }
}

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `m × k` and `op(b)` of
/// shape `k × n`, all row-major. `a_t` / `b_t` mean the operand is stored
/// transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm: buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lowers one `C × H × W` plane into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    let npos = ho * wo;
    for ci in 0..g.in_ch {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto a plane.
pub fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    let npos = ho * wo;
    for ci in 0..g.in_ch {
        let plane = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the `N × O × Ho × Wo` output and, when
/// `keep_cols` is set, the per-image column matrices needed by the backward
/// pass (empty for pointwise convolutions, which reuse the input).
pub fn conv2d_forward(
    exec: Exec,
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<f32>, Vec<Vec<f32>>) {
    let npos = g.out_height() * g.out_width();
    let patch = g.patch_len();
    let per_image = exec.map_range(g.batch, |n| {
        let xn = &x[n * g.in_plane()..(n + 1) * g.in_plane()];
        let mut out = vec![0.0f32; g.out_plane()];
        let cols = if g.is_pointwise() {
            gemm(g.out_ch, patch, npos, weight, false, xn, false, 0.0, &mut out);
            Vec::new()
        } else {
            let mut cols = vec![0.0f32; patch * npos];
            im2col(xn, g, &mut cols);
            gemm(g.out_ch, patch, npos, weight, false, &cols, false, 0.0, &mut out);
            cols
        };
        if let Some(b) = bias {
            for (o, row) in out.chunks_mut(npos).enumerate() {
                row.iter_mut().for_each(|v| *v += b[o]);
            }
        }
        (out, if keep_cols { cols } else { Vec::new() })
    });
    let mut out = Vec::with_capacity(g.batch * g.out_plane());
    let mut cols = Vec::with_capacity(if keep_cols { g.batch } else { 0 });
    for (o, c) in per_image {
        out.extend_from_slice(&o);
        if keep_cols {
            cols.push(c);
        }
    }
    (out, cols)
}

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

/// Backward convolution given the upstream gradient `dy` (shape of the
/// forward output). `cols` are the column matrices saved by the forward pass;
/// for pointwise convolutions the input `x` is used instead.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    exec: Exec,
    x: &[f32],
    cols: &[Vec<f32>],
    weight: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let npos = g.out_height() * g.out_width();
    let patch = g.patch_len();
    let wlen = g.out_ch * patch;
    let per_image = exec.map_range(g.batch, |n| {
        let dyn_ = &dy[n * g.out_plane()..(n + 1) * g.out_plane()];
        let colmat: &[f32] = if g.is_pointwise() {
            &x[n * g.in_plane()..(n + 1) * g.in_plane()]
        } else {
            &cols[n]
        };
        let dw = need_dw.then(|| {
            let mut dw = vec![0.0f32; wlen];
            gemm(g.out_ch, npos, patch, dyn_, false, colmat, true, 0.0, &mut dw);
            dw
        });
        let db = need_db.then(|| dyn_.chunks(npos).map(|r| r.iter().sum::<f32>()).collect::<Vec<f32>>());
        let dx = need_dx.then(|| {
            let mut dcols = vec![0.0f32; patch * npos];
            gemm(patch, g.out_ch, npos, weight, true, dyn_, false, 0.0, &mut dcols);
            if g.is_pointwise() {
                dcols
            } else {
                let mut dx = vec![0.0f32; g.in_plane()];
                col2im(&dcols, g, &mut dx);
                dx
            }
        });
        (dx, dw, db)
    });

    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * g.in_plane()));
    let mut dw = need_dw.then(|| vec![0.0f32; wlen]);
    let mut db = need_db.then(|| vec![0.0f32; g.out_ch]);
    for (pdx, pdw, pdb) in per_image {
        if let (Some(acc), Some(p)) = (dx.as_mut(), pdx) {
            acc.extend_from_slice(&p);
        }
        if let (Some(acc), Some(p)) = (dw.as_mut(), pdw) {
            acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
        if let (Some(acc), Some(p)) = (db.as_mut(), pdb) {
            acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Max pooling over each `H × W` plane of `planes` planes. Padding cells never
/// win. Ties go to the first (lowest flat index) element in the window.
/// Returns the output and, per output element, the flat input index that won.
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d_forward(
    exec: Exec,
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<usize>) {
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let per_plane = exec.map_range(planes, |pl| {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let mut out = Vec::with_capacity(ho * wo);
        let mut arg = Vec::with_capacity(ho * wo);
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pad as isize;
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..kernel as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(pl * h * w + best_idx);
            }
        }
        (out, arg)
    });
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for (o, a) in per_plane {
        out.extend(o);
        arg.extend(a);
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsampling of `planes` planes of size `h × w`.
pub fn upsample2x_forward(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; planes * 4 * h * w];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    dx
}

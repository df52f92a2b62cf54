use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::{Error, Exec, Result};

/// Handle to a tensor owned by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<Vec<f32>> },
    LeakyRelu { x: Var, slope: f32 },
    Sigmoid { x: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Upsample2x { x: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Matmul { a: Var, b: Var },
    Sum { x: Var },
    Reshape { x: Var },
    /// Scalar-valued function whose partials were computed alongside the value.
    Scalar { inputs: Vec<Var>, partials: Vec<Vec<f32>> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only operation record. Nodes are pushed in execution order, so the
/// node vector is already a topological order.
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph { nodes: Vec::new(), exec }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; `tensor.requires_grad()` decides whether it collects a gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        Ok(self.push(t, op))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("expected NCHW input and OIkk weight, got {xs:?} and {ws:?}")));
        }
        if ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {}x{}", ws[2], ws[3])));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("input has {} channels, weight expects {}", xs[1], ws[1])));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        if geom.kernel > xs[2] + 2 * pad || geom.kernel > xs[3] + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} does not fit padded input {}x{} (pad {pad})", geom.kernel, xs[2], xs[3]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{}]", self.shape(b), geom.out_ch)));
            }
        }
        let requires = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let keep_cols = self.needs(w) && !geom.is_pointwise();
        let (out, cols) = kernels::conv2d_forward(
            self.exec,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            keep_cols,
        );
        let shape = vec![geom.batch, geom.out_ch, geom.out_height(), geom.out_width()];
        self.result(shape, out, Op::Conv2d { x, w, b, geom, cols }, requires)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::InvalidArgument(format!("leaky_relu slope {slope} not in (0,1)")));
        }
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let shape = t.shape().to_vec();
        let req = t.requires_grad();
        self.result(shape, data, Op::LeakyRelu { x, slope }, req)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        let req = t.requires_grad();
        self.result(shape, data, Op::Sigmoid { x }, req)
    }

    /// Max pooling with a square window on an NCHW tensor.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("expected NCHW, got {xs:?}")));
        }
        if kernel == 0 || stride == 0 || 2 * pad > kernel {
            return Err(Error::shape("maxpool2d", format!("bad window k={kernel} s={stride} p={pad}")));
        }
        if kernel > xs[2] + 2 * pad || kernel > xs[3] + 2 * pad {
            return Err(Error::shape("maxpool2d", format!("window {kernel} larger than padded input {xs:?}")));
        }
        let (out, argmax) =
            kernels::maxpool2d_forward(self.exec, self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], kernel, stride, pad);
        let ho = (xs[2] + 2 * pad - kernel) / stride + 1;
        let wo = (xs[3] + 2 * pad - kernel) / stride + 1;
        let req = self.needs(x);
        self.result(vec![xs[0], xs[1], ho, wo], out, Op::MaxPool2d { x, argmax }, req)
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample_nearest_2x", format!("expected NCHW, got {xs:?}")));
        }
        let out = kernels::upsample2x_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3]);
        let req = self.needs(x);
        self.result(vec![xs[0], xs[1], 2 * xs[2], 2 * xs[3]], out, Op::Upsample2x { x }, req)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let fs = self.shape(first).to_vec();
        if fs.len() != 4 {
            return Err(Error::shape("concat_channels", format!("expected NCHW, got {fs:?}")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != fs[0] || s[2] != fs[2] || s[3] != fs[3] {
                return Err(Error::shape("concat_channels", format!("{s:?} incompatible with {fs:?}")));
            }
            channels += s[1];
        }
        let hw = fs[2] * fs[3];
        let mut out = Vec::with_capacity(fs[0] * channels * hw);
        for n in 0..fs[0] {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[n * c * hw..(n + 1) * c * hw]);
            }
        }
        let req = parts.iter().any(|&p| self.needs(p));
        self.result(vec![fs[0], channels, fs[2], fs[3]], out, Op::Concat { parts: parts.to_vec() }, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let req = self.needs(a) || self.needs(b);
        self.result(self.shape(a).to_vec(), data, Op::Add { a, b }, req)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let req = self.needs(a) || self.needs(b);
        self.result(self.shape(a).to_vec(), data, Op::Mul { a, b }, req)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        kernels::gemm(sa[0], sa[1], sb[1], self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let req = self.needs(a) || self.needs(b);
        self.result(vec![sa[0], sb[1]], out, Op::Matmul { a, b }, req)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let req = self.needs(x);
        self.result(Vec::new(), vec![s as f32], Op::Sum { x }, req)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        let req = self.needs(x);
        self.result(shape.to_vec(), data, Op::Reshape { x }, req)
    }

    /// Records a scalar `value` whose partial derivatives with respect to each
    /// of `inputs` were already computed by the caller.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f32, partials: Vec<Vec<f32>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::shape("scalar_fn", "one partial per input required"));
        }
        for (&v, p) in inputs.iter().zip(&partials) {
            if self.value(v).numel() != p.len() {
                return Err(Error::shape("scalar_fn", format!("partial length {} for {:?}", p.len(), self.shape(v))));
            }
        }
        let req = inputs.iter().any(|&v| self.needs(v));
        self.result(Vec::new(), vec![value], Op::Scalar { inputs: inputs.to_vec(), partials }, req)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Reverse pass from a scalar `loss`. Gradients of leaves that require
    /// them are added to whatever they already hold; call
    /// [`Graph::zero_grads`] to start over.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Conv2d { x, w, b, geom, cols } => {
                    let cg = kernels::conv2d_backward(
                        self.exec,
                        self.value(*x).data(),
                        cols,
                        self.value(*w).data(),
                        &g,
                        geom,
                        self.needs(*x),
                        self.needs(*w),
                        b.is_some_and(|b| self.needs(b)),
                    );
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = cg.dw {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x).data();
                    let dx = g.iter().zip(xv).map(|(&gy, &v)| if v > 0.0 { gy } else { slope * gy }).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = node.value.data();
                    let dx = g.iter().zip(y).map(|(&gy, &s)| gy * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2d { x, argmax } => {
                    let mut dx = vec![0.0f32; self.value(*x).numel()];
                    for (&gy, &src) in g.iter().zip(argmax) {
                        dx[src] += gy;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2x { x } => {
                    let s = self.shape(*x);
                    let dx = kernels::upsample2x_backward(&g, s[0] * s[1], s[2], s[3]);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let s = node.value.shape();
                    let (batch, total_c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        if self.needs(p) {
                            let mut dp = Vec::with_capacity(batch * c * hw);
                            for n in 0..batch {
                                let start = (n * total_c + offset) * hw;
                                dp.extend_from_slice(&g[start..start + c * hw]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        offset += c;
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        let da = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        kernels::gemm(m, n, k, &g, false, self.value(*b).data(), true, 0.0, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        kernels::gemm(k, m, n, self.value(*a).data(), true, &g, false, 0.0, &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Sum { x } => {
                    let dx = vec![g[0]; self.value(*x).numel()];
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape { x } => accumulate(&mut grads, *x, g),
                Op::Scalar { inputs, partials } => {
                    for (&v, p) in inputs.iter().zip(partials) {
                        if self.needs(v) {
                            accumulate(&mut grads, v, p.iter().map(|d| d * g[0]).collect());
                        }
                    }
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

/// Logistic function evaluated without overflow for any finite input.
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

//! YOLO-style single-stage detector: CSP backbone, SPP + path-aggregation
//! neck, one linear 1x1 head per scale, and decoding of raw head outputs.

pub mod anchors;
pub mod arch;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ndtensor::{sigmoid, Graph, Tensor, Var};
use crate::postprocess::Detection;
use crate::{BBox, Error, Exec, Result};

pub use arch::{layer_table, ConvSpec, BLOCK_OUTPUTS, NECK_OUTPUTS};

pub const NUM_ANCHORS: usize = 3;
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Anchors (w, h) in pixels, one row of three per stride, frozen from a
/// seeded k-means over 10,000 boxes of the default synthetic generator
/// (see [`anchors::default_anchors_from_generator`]).
pub const DEFAULT_ANCHORS: [[[f32; 2]; 3]; 3] = [
    [[54.5, 31.3], [55.4, 37.3], [55.0, 44.4]],
    [[66.7, 37.8], [62.4, 42.4], [61.0, 50.2]],
    [[70.0, 46.5], [68.8, 55.0], [72.8, 62.0]],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub width_base: usize,
    pub num_classes: usize,
    pub anchors: [[[f32; 2]; 3]; 3],
    pub strides: [usize; 3],
    pub leaky_slope: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 128,
            in_channels: 1,
            width_base: 8,
            num_classes: 2,
            anchors: DEFAULT_ANCHORS,
            strides: STRIDES,
            leaky_slope: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config("detector.input_size", format!("{} is not a positive multiple of 32", self.input_size)));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::config("detector.in_channels", format!("{} (expected 1 or 3)", self.in_channels)));
        }
        if self.width_base < 2 || self.width_base % 2 != 0 {
            return Err(Error::config("detector.width_base", format!("{} must be even and >= 2", self.width_base)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("detector.num_classes", format!("{} < 2", self.num_classes)));
        }
        if self.strides != STRIDES {
            return Err(Error::config("detector.strides", format!("{:?} (only [8, 16, 32] is supported)", self.strides)));
        }
        if self.anchors.iter().flatten().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config("detector.anchors", "all anchor sides must be positive"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("detector.leaky_slope", format!("{} not in (0,1)", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn grid_size(&self, scale: usize) -> usize {
        self.input_size / self.strides[scale]
    }

    pub fn head_channels(&self) -> usize {
        arch::head_channels(self)
    }
}

/// Complete, shape-checked parameter set for one [`DetectorConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorWeights {
    config: DetectorConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl DetectorWeights {
    /// Checks that `tensors` holds exactly the parameters `config` declares.
    pub fn from_tensors(config: DetectorConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let table = layer_table(&config);
        let mut expected = BTreeMap::new();
        for spec in &table {
            expected.insert(spec.weight_name(), spec.weight_shape().to_vec());
            expected.insert(spec.bias_name(), vec![spec.out_ch]);
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::WeightFormat(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::WeightFormat(format!(
                        "tensor `{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::WeightFormat(format!("unexpected tensor `{extra}`")));
        }
        Ok(DetectorWeights { config, tensors })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a graph leaf.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone().with_requires_grad(trainable))))
            .collect()
    }
}

/// He-uniform convolution weights (leaky-ReLU gain), zero biases.
pub fn build(config: &DetectorConfig, seed: u64) -> Result<DetectorWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain2 = 2.0 / (1.0 + config.leaky_slope * config.leaky_slope);
    let mut tensors = BTreeMap::new();
    for spec in layer_table(config) {
        let fan_in = (spec.in_ch * spec.kernel * spec.kernel) as f32;
        let bound = (3.0 * gain2 / fan_in).sqrt();
        let shape = spec.weight_shape();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        tensors.insert(spec.weight_name(), Tensor::new(shape.to_vec(), data)?);
        tensors.insert(spec.bias_name(), Tensor::zeros([spec.out_ch]));
    }
    DetectorWeights::from_tensors(config.clone(), tensors)
}

/// Raw head outputs, one tensor per stride, each `N × A × (5+C) × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub scales: Vec<Tensor>,
}

impl RawPrediction {
    pub fn batch(&self) -> usize {
        self.scales[0].shape()[0]
    }

    /// The single-image slice `n` as its own prediction.
    pub fn image(&self, n: usize) -> Result<RawPrediction> {
        let scales = self
            .scales
            .iter()
            .map(|t| {
                let mut shape = t.shape().to_vec();
                shape[0] = 1;
                t.select0(n)?.reshape(shape)
            })
            .collect::<Result<_>>()?;
        Ok(RawPrediction { scales })
    }
}

pub type CapturedActivations = BTreeMap<String, Tensor>;

struct Builder<'a> {
    g: &'a mut Graph,
    params: &'a BTreeMap<String, Var>,
    specs: BTreeMap<String, ConvSpec>,
    slope: f32,
    outputs: BTreeMap<String, Var>,
}

impl Builder<'_> {
    fn conv(&mut self, path: &str, x: Var) -> Result<Var> {
        let spec = self.specs.get(path).ok_or_else(|| Error::UnknownLayer(path.to_string()))?.clone();
        let w = *self.params.get(&spec.weight_name()).ok_or_else(|| Error::UnknownLayer(spec.weight_name()))?;
        let b = *self.params.get(&spec.bias_name()).ok_or_else(|| Error::UnknownLayer(spec.bias_name()))?;
        let y = self.g.conv2d(x, w, Some(b), spec.stride, spec.kernel / 2)?;
        let y = if spec.activated { self.g.leaky_relu(y, self.slope)? } else { y };
        self.outputs.insert(path.to_string(), y);
        Ok(y)
    }

    fn csp(&mut self, path: &str, x: Var, shortcut: bool) -> Result<Var> {
        let a = self.conv(&format!("{path}.cv1"), x)?;
        let m = self.conv(&format!("{path}.m.cv1"), a)?;
        let m = self.conv(&format!("{path}.m.cv2"), m)?;
        let m = if shortcut { self.g.add(a, m)? } else { m };
        let b = self.conv(&format!("{path}.cv2"), x)?;
        let cat = self.g.concat_channels(&[m, b])?;
        self.conv(&format!("{path}.cv3"), cat)
    }

    fn spp(&mut self, x: Var) -> Result<Var> {
        let x = self.conv("backbone.spp.cv1", x)?;
        let mut parts = vec![x];
        for k in arch::SPP_KERNELS {
            parts.push(self.g.maxpool2d(x, k, 1, k / 2)?);
        }
        let cat = self.g.concat_channels(&parts)?;
        self.conv("backbone.spp.cv2", cat)
    }

    fn mark(&mut self, name: &str, v: Var) {
        self.outputs.insert(name.to_string(), v);
    }
}

/// Forward pass recorded on `g`. Returns the three raw head tensors
/// (`N × A·(5+C) × H × W`, strides 8/16/32) and the requested captures.
pub fn forward_graph(
    g: &mut Graph,
    config: &DetectorConfig,
    params: &BTreeMap<String, Var>,
    images: Var,
    capture: &[&str],
) -> Result<([Var; 3], BTreeMap<String, Var>)> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != config.in_channels || s[2] != config.input_size || s[3] != config.input_size {
        return Err(Error::shape(
            "detector.forward",
            format!(
                "images {:?}, expected N×{}×{}×{}",
                s, config.in_channels, config.input_size, config.input_size
            ),
        ));
    }
    let specs = layer_table(config).into_iter().map(|c| (c.path.clone(), c)).collect();
    let mut b = Builder { g, params, specs, slope: config.leaky_slope, outputs: BTreeMap::new() };

    let mut x = images;
    let mut stage_out = Vec::new();
    for i in 1..=5 {
        x = b.conv(&format!("backbone.b{i}.down"), x)?;
        x = b.csp(&format!("backbone.b{i}.csp"), x, true)?;
        stage_out.push(x);
    }
    let p3 = stage_out[2];
    let p4 = stage_out[3];
    let p5 = b.spp(stage_out[4])?;
    b.mark("backbone.p3", p3);
    b.mark("backbone.p4", p4);
    b.mark("backbone.p5", p5);

    // top-down
    let h5 = b.conv("neck.lat5", p5)?;
    let up = b.g.upsample_nearest_2x(h5)?;
    let cat = b.g.concat_channels(&[up, p4])?;
    let t4 = b.csp("neck.td4", cat, false)?;
    let h4 = b.conv("neck.lat4", t4)?;
    let up = b.g.upsample_nearest_2x(h4)?;
    let cat = b.g.concat_channels(&[up, p3])?;
    let out3 = b.csp("neck.td3", cat, false)?;
    // bottom-up
    let d3 = b.conv("neck.down3", out3)?;
    let cat = b.g.concat_channels(&[d3, h4])?;
    let out4 = b.csp("neck.bu4", cat, false)?;
    let d4 = b.conv("neck.down4", out4)?;
    let cat = b.g.concat_channels(&[d4, h5])?;
    let out5 = b.csp("neck.bu5", cat, false)?;
    b.mark("neck.out_p3", out3);
    b.mark("neck.out_p4", out4);
    b.mark("neck.out_p5", out5);

    let heads = [b.conv("head.p3", out3)?, b.conv("head.p4", out4)?, b.conv("head.p5", out5)?];

    let mut captured = BTreeMap::new();
    for &path in capture {
        let v = *b.outputs.get(path).ok_or_else(|| Error::UnknownLayer(path.to_string()))?;
        captured.insert(path.to_string(), v);
    }
    Ok((heads, captured))
}

/// Inference forward pass (no gradients recorded).
pub fn forward(weights: &DetectorWeights, images: &Tensor, capture: &[&str]) -> Result<(RawPrediction, CapturedActivations)> {
    forward_with(Exec::default(), weights, images, capture)
}

pub fn forward_with(
    exec: Exec,
    weights: &DetectorWeights,
    images: &Tensor,
    capture: &[&str],
) -> Result<(RawPrediction, CapturedActivations)> {
    let cfg = weights.config();
    let mut g = Graph::with_exec(exec);
    let params = weights.register(&mut g, false);
    let input = g.constant(images.clone());
    let (heads, captured) = forward_graph(&mut g, cfg, &params, input, capture)?;
    let raw = heads_to_raw(&g, cfg, &heads)?;
    let captured = captured.into_iter().map(|(k, v)| (k, g.value(v).clone())).collect();
    Ok((raw, captured))
}

pub fn heads_to_raw(g: &Graph, cfg: &DetectorConfig, heads: &[Var; 3]) -> Result<RawPrediction> {
    let scales = heads
        .iter()
        .map(|&h| {
            let s = g.shape(h);
            let shape = vec![s[0], NUM_ANCHORS, 5 + cfg.num_classes, s[2], s[3]];
            g.value(h).clone().with_requires_grad(false).reshape(shape)
        })
        .collect::<Result<_>>()?;
    Ok(RawPrediction { scales })
}

/// Box predicted by one cell/anchor in pixels, before clipping.
///
/// `bx = (2σ(tx) − 0.5 + cx)·s`, `bw = aw·(2σ(tw))²`, likewise for y/h.
pub fn decode_box(t: [f32; 4], cell: (usize, usize), anchor: [f32; 2], stride: f32) -> (f32, f32, f32, f32) {
    let (cx, cy) = (cell.0 as f32, cell.1 as f32);
    let bx = (2.0 * sigmoid(t[0]) - 0.5 + cx) * stride;
    let by = (2.0 * sigmoid(t[1]) - 0.5 + cy) * stride;
    let bw = anchor[0] * (2.0 * sigmoid(t[2])).powi(2);
    let bh = anchor[1] * (2.0 * sigmoid(t[3])).powi(2);
    (bx, by, bw, bh)
}

/// Smallest decoded side length; guards against `σ` underflow.
pub const MIN_DECODED_SIDE: f32 = 1e-3;

/// Turns raw predictions into per-image detections with
/// `score = σ(obj)·max_c σ(cls_c) ≥ conf_threshold`. Centres are clamped into
/// the image and boxes clipped to its bounds.
pub fn decode(raw: &RawPrediction, config: &DetectorConfig, conf_threshold: f32) -> Vec<Vec<Detection>> {
    let n_img = raw.batch();
    let nc = config.num_classes;
    let size = config.input_size as f32;
    let mut out = vec![Vec::new(); n_img];
    for (si, t) in raw.scales.iter().enumerate() {
        let sh = t.shape();
        let (gh, gw) = (sh[3], sh[4]);
        let plane = gh * gw;
        let stride = config.strides[si] as f32;
        let data = t.data();
        for (n, dets) in out.iter_mut().enumerate() {
            for a in 0..NUM_ANCHORS {
                let base = (n * NUM_ANCHORS + a) * (5 + nc) * plane;
                let at = |k: usize, cell: usize| data[base + k * plane + cell];
                for cy in 0..gh {
                    for cx in 0..gw {
                        let cell = cy * gw + cx;
                        let obj = sigmoid(at(4, cell));
                        let class_scores: Vec<f32> = (0..nc).map(|c| obj * sigmoid(at(5 + c, cell))).collect();
                        let (class_id, score) = class_scores
                            .iter()
                            .copied()
                            .enumerate()
                            .fold((0, f32::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best });
                        if score < conf_threshold {
                            continue;
                        }
                        let tt = [at(0, cell), at(1, cell), at(2, cell), at(3, cell)];
                        let (bx, by, bw, bh) = decode_box(tt, (cx, cy), config.anchors[si][a], stride);
                        let bx = bx.clamp(0.0, size);
                        let by = by.clamp(0.0, size);
                        let bbox = BBox::from_center(bx, by, bw.max(MIN_DECODED_SIDE), bh.max(MIN_DECODED_SIDE)).clip(size, size);
                        dets.push(Detection { bbox, class_id, score, class_scores });
                    }
                }
            }
        }
    }
    out
}

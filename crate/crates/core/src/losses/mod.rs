//! Training objective: CIoU box regression, BCE objectness and BCE
//! one-vs-rest classification, plus anchor/cell target assignment.
//!
//! The loss is evaluated in `f64` together with its exact gradient with
//! respect to every raw head output; box gradients come from forward-mode
//! dual numbers through the decode and CIoU formulas.

pub mod dual;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, RawPrediction, NUM_ANCHORS};
use crate::ndtensor::{Graph, Tensor, Var};
use crate::{BBox, Error, GtBox, Result};
use dual::{Dual4, Real};

pub const ANCHOR_RATIO_THRESHOLD: f32 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    /// Per-stride multipliers of the objectness term (strides 8, 16, 32).
    pub obj_balance: [f64; 3],
    pub anchor_ratio: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { box_weight: 0.05, obj_weight: 1.0, cls_weight: 0.5, obj_balance: [4.0, 1.0, 0.4], anchor_ratio: ANCHOR_RATIO_THRESHOLD }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("loss.box_weight", self.box_weight), ("loss.obj_weight", self.obj_weight), ("loss.cls_weight", self.cls_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("{v} must be a non-negative number")));
            }
        }
        if self.obj_balance.iter().any(|&b| !(b >= 0.0 && b.is_finite())) {
            return Err(Error::config("loss.obj_balance", "entries must be non-negative"));
        }
        if !(self.anchor_ratio > 1.0) {
            return Err(Error::config("loss.anchor_ratio", format!("{} must exceed 1", self.anchor_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
    /// `(λ_box, λ_obj, λ_cls)`
    pub weights: (f64, f64, f64),
}

impl LossBreakdown {
    fn new(box_loss: f64, obj_loss: f64, cls_loss: f64, cfg: &LossConfig) -> Self {
        let total = cfg.box_weight * box_loss + cfg.obj_weight * obj_loss + cfg.cls_weight * cls_loss;
        LossBreakdown { box_loss, obj_loss, cls_loss, total, weights: (cfg.box_weight, cfg.obj_weight, cfg.cls_weight) }
    }
}

/// Complete IoU, generic so the same code yields values (`f64`) and
/// gradients ([`Dual4`]). Boxes are `[x1, y1, x2, y2]`.
pub fn ciou_generic<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    let zero = T::cst(0.0);
    let (wa, ha) = (a[2] - a[0], a[3] - a[1]);
    let (wb, hb) = (b[2] - b[0], b[3] - b[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(zero);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(zero);
    let inter = iw * ih;
    let union = wa * ha + wb * hb - inter;
    let iou = inter / union;
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let c2 = cw.sq() + ch.sq();
    let rho2 = ((a[0] + a[2] - b[0] - b[2]).sq() + (a[1] + a[3] - b[1] - b[3]).sq()) / T::cst(4.0);
    let v = T::cst(4.0 / (std::f64::consts::PI * std::f64::consts::PI)) * ((wb / hb).atan() - (wa / ha).atan()).sq();
    let penalty = if v.val() == 0.0 { zero } else { v.sq() / (T::cst(1.0) - iou + v) };
    iou - rho2 / c2 - penalty
}

fn check_box(name: &str, b: &BBox) -> Result<()> {
    if !(b.width() > 0.0 && b.height() > 0.0) || !b.is_valid() {
        return Err(Error::InvalidArgument(format!("degenerate box {name}: {b:?}")));
    }
    Ok(())
}

fn box_f64(b: &BBox) -> [f64; 4] {
    [b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64]
}

/// CIoU of two boxes with positive width and height; value in (−1, 1].
pub fn ciou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box("a", a)?;
    check_box("b", b)?;
    Ok(ciou_generic(box_f64(a), box_f64(b)))
}

/// Numerically stable `−[t·log σ(x) + (1−t)·log(1−σ(x))]`.
pub fn bce_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn sigmoid64(x: f64) -> f64 {
    Real::sigmoid(x)
}

/// Mean binary cross-entropy between logits and targets in `[0, 1]`.
pub fn bce(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    Ok(bce_with_grad(logits, targets)?.0)
}

/// Mean BCE and its gradient with respect to the logits.
pub fn bce_with_grad(logits: &Tensor, targets: &Tensor) -> Result<(f64, Vec<f32>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape("bce", format!("{:?} vs {:?}", logits.shape(), targets.shape())));
    }
    if let Some(t) = targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("bce target {t} outside [0, 1]")));
    }
    let n = logits.numel() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(logits.numel());
    for (&x, &t) in logits.data().iter().zip(targets.data()) {
        let (x, t) = (x as f64, t as f64);
        sum += bce_logit(x, t);
        grad.push(((sigmoid64(x) - t) / n) as f32);
    }
    Ok((sum / n, grad))
}

/// One (image, anchor, cell) slot responsible for a ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignedTarget {
    pub image: usize,
    pub anchor: usize,
    pub cell_y: usize,
    pub cell_x: usize,
    pub gt: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetAssignment {
    pub scales: [Vec<AssignedTarget>; 3],
    /// `(image, box index)` of ground truths no anchor at any scale accepted.
    pub unassigned: Vec<(usize, usize)>,
}

impl TargetAssignment {
    pub fn len(&self) -> usize {
        self.scales.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anchor/cell matching. A box goes to anchor `a` at a scale when
/// `max(w/aw, aw/w, h/ah, ah/h) < ratio`, and to the cell containing its
/// centre plus the nearer horizontal and the nearer vertical neighbour
/// (`≤ 0.5` from the left/top edge picks left/top), when inside the grid.
pub fn assign_targets(gt: &[Vec<GtBox>], config: &DetectorConfig) -> TargetAssignment {
    assign_targets_with_ratio(gt, config, ANCHOR_RATIO_THRESHOLD)
}

pub fn assign_targets_with_ratio(gt: &[Vec<GtBox>], config: &DetectorConfig, ratio: f32) -> TargetAssignment {
    let mut out = TargetAssignment::default();
    for (image, boxes) in gt.iter().enumerate() {
        for (bi, g) in boxes.iter().enumerate() {
            let (w, h) = (g.bbox.width(), g.bbox.height());
            let (cx, cy) = g.bbox.center();
            let mut any = false;
            for (s, entries) in out.scales.iter_mut().enumerate() {
                let stride = config.strides[s] as f32;
                let grid = config.grid_size(s);
                let gx = cx / stride;
                let gy = cy / stride;
                let gi = (gx.floor().max(0.0) as usize).min(grid - 1);
                let gj = (gy.floor().max(0.0) as usize).min(grid - 1);
                let nx = if gx - gi as f32 <= 0.5 { gi.checked_sub(1) } else { Some(gi + 1).filter(|&v| v < grid) };
                let ny = if gy - gj as f32 <= 0.5 { gj.checked_sub(1) } else { Some(gj + 1).filter(|&v| v < grid) };
                let mut cells = vec![(gj, gi)];
                if let Some(x) = nx {
                    cells.push((gj, x));
                }
                if let Some(y) = ny {
                    cells.push((y, gi));
                }
                for (a, anchor) in config.anchors[s].iter().enumerate() {
                    let r = (w / anchor[0]).max(anchor[0] / w).max(h / anchor[1]).max(anchor[1] / h);
                    if r >= ratio {
                        continue;
                    }
                    any = true;
                    for &(cell_y, cell_x) in &cells {
                        entries.push(AssignedTarget { image, anchor: a, cell_y, cell_x, gt: g.bbox, class_id: g.class_id });
                    }
                }
            }
            if !any {
                out.unassigned.push((image, bi));
            }
        }
    }
    out
}

/// Head outputs in `f64`, one flat `N × A × (5+C) × H × W` buffer per scale.
#[derive(Clone, Debug)]
pub struct HeadValues {
    pub batch: usize,
    pub scales: Vec<Vec<f64>>,
}

impl HeadValues {
    pub fn from_raw(raw: &RawPrediction) -> Self {
        HeadValues {
            batch: raw.batch(),
            scales: raw.scales.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect(),
        }
    }
}

struct Layout {
    nc: usize,
    grid: usize,
}

impl Layout {
    fn idx(&self, n: usize, a: usize, k: usize, y: usize, x: usize) -> usize {
        (((n * NUM_ANCHORS + a) * (5 + self.nc) + k) * self.grid + y) * self.grid + x
    }
}

/// Loss and its gradient with respect to every head value.
pub fn loss_and_grad(
    heads: &HeadValues,
    assignment: &TargetAssignment,
    dcfg: &DetectorConfig,
    lcfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let nc = dcfg.num_classes;
    let n = heads.batch;
    if heads.scales.len() != 3 {
        return Err(Error::shape("total_loss", format!("{} scales, expected 3", heads.scales.len())));
    }
    let layouts: Vec<Layout> = (0..3).map(|s| Layout { nc, grid: dcfg.grid_size(s) }).collect();
    for (s, (vals, l)) in heads.scales.iter().zip(&layouts).enumerate() {
        let expect = n * NUM_ANCHORS * (5 + nc) * l.grid * l.grid;
        if vals.len() != expect {
            return Err(Error::shape("total_loss", format!("scale {s} has {} values, expected {expect}", vals.len())));
        }
    }
    for (s, entries) in assignment.scales.iter().enumerate() {
        let g = layouts[s].grid;
        if let Some(e) = entries.iter().find(|e| e.image >= n || e.anchor >= NUM_ANCHORS || e.cell_x >= g || e.cell_y >= g || e.class_id >= nc) {
            return Err(Error::shape("total_loss", format!("assignment {e:?} outside scale {s}")));
        }
    }

    let mut grads: Vec<Vec<f64>> = heads.scales.iter().map(|v| vec![0.0; v.len()]).collect();

    // objectness
    let mut obj_loss = 0.0;
    for s in 0..3 {
        let l = &layouts[s];
        let cells = n * NUM_ANCHORS * l.grid * l.grid;
        let mut target = vec![false; cells];
        for e in &assignment.scales[s] {
            target[((e.image * NUM_ANCHORS + e.anchor) * l.grid + e.cell_y) * l.grid + e.cell_x] = true;
        }
        let w = lcfg.obj_balance[s] / cells as f64;
        let mut sum = 0.0;
        for img in 0..n {
            for a in 0..NUM_ANCHORS {
                for y in 0..l.grid {
                    for x in 0..l.grid {
                        let t = if target[((img * NUM_ANCHORS + a) * l.grid + y) * l.grid + x] { 1.0 } else { 0.0 };
                        let i = l.idx(img, a, 4, y, x);
                        let logit = heads.scales[s][i];
                        sum += bce_logit(logit, t);
                        grads[s][i] += lcfg.obj_weight * w * (sigmoid64(logit) - t);
                    }
                }
            }
        }
        obj_loss += lcfg.obj_balance[s] * sum / cells as f64;
    }

    // box regression and classification over assigned slots
    let m = assignment.len();
    let (mut box_loss, mut cls_loss) = (0.0, 0.0);
    if m > 0 {
        let box_scale = lcfg.box_weight / m as f64;
        let cls_scale = lcfg.cls_weight / (m * nc) as f64;
        for s in 0..3 {
            let l = &layouts[s];
            let stride = dcfg.strides[s] as f64;
            for e in &assignment.scales[s] {
                let anchor = dcfg.anchors[s][e.anchor];
                let t: [usize; 4] = std::array::from_fn(|k| l.idx(e.image, e.anchor, k, e.cell_y, e.cell_x));
                let pred = decode_dual(
                    std::array::from_fn(|k| Dual4::var(heads.scales[s][t[k]], k)),
                    (e.cell_x as f64, e.cell_y as f64),
                    [anchor[0] as f64, anchor[1] as f64],
                    stride,
                );
                let gt = box_f64(&e.gt).map(Dual4::cst);
                let c = ciou_generic(pred, gt);
                box_loss += 1.0 - c.v;
                for k in 0..4 {
                    grads[s][t[k]] -= box_scale * c.d[k];
                }
                for cls in 0..nc {
                    let i = l.idx(e.image, e.anchor, 5 + cls, e.cell_y, e.cell_x);
                    let target = if cls == e.class_id { 1.0 } else { 0.0 };
                    let logit = heads.scales[s][i];
                    cls_loss += bce_logit(logit, target);
                    grads[s][i] += cls_scale * (sigmoid64(logit) - target);
                }
            }
        }
        box_loss /= m as f64;
        cls_loss /= (m * nc) as f64;
    }
    Ok((LossBreakdown::new(box_loss, obj_loss, cls_loss, lcfg), grads))
}

/// Decoded `[x1, y1, x2, y2]` for raw `(tx, ty, tw, th)`; sides floored at a
/// tiny positive value so CIoU stays defined.
fn decode_dual<T: Real>(t: [T; 4], cell: (f64, f64), anchor: [f64; 2], stride: f64) -> [T; 4] {
    let two = T::cst(2.0);
    let bx = (two * t[0].sigmoid() - T::cst(0.5) + T::cst(cell.0)) * T::cst(stride);
    let by = (two * t[1].sigmoid() - T::cst(0.5) + T::cst(cell.1)) * T::cst(stride);
    let floor = T::cst(1e-9);
    let bw = (T::cst(anchor[0]) * (two * t[2].sigmoid()).sq()).max(floor);
    let bh = (T::cst(anchor[1]) * (two * t[3].sigmoid()).sq()).max(floor);
    let half = T::cst(0.5);
    [bx - half * bw, by - half * bh, bx + half * bw, by + half * bh]
}

/// Loss value only.
pub fn total_loss(
    raw: &RawPrediction,
    assignment: &TargetAssignment,
    dcfg: &DetectorConfig,
    lcfg: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(loss_and_grad(&HeadValues::from_raw(raw), assignment, dcfg, lcfg)?.0)
}

/// Records the loss on `g` as a scalar node over the three raw head outputs
/// (`N × A·(5+C) × H × W` each) so `g.backward` reaches the network.
pub fn total_loss_graph(
    g: &mut Graph,
    heads: &[Var; 3],
    assignment: &TargetAssignment,
    dcfg: &DetectorConfig,
    lcfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let batch = g.shape(heads[0])[0];
    let values = HeadValues {
        batch,
        scales: heads.iter().map(|&h| g.value(h).data().iter().map(|&v| v as f64).collect()).collect(),
    };
    let (breakdown, grads) = loss_and_grad(&values, assignment, dcfg, lcfg)?;
    let partials = grads.into_iter().map(|v| v.into_iter().map(|x| x as f32).collect()).collect();
    let var = g.scalar_fn(heads, breakdown.total as f32, partials)?;
    Ok((var, breakdown))
}

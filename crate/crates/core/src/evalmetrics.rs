//! Image-level evaluation: confusion matrix, per-class precision / recall /
//! F1, ROC and PR curves with AUC, and localisation quality of the winning
//! detection.
//!
//! Abstentions (no detection survived) count as errors. They are tallied in
//! a separate column: a false negative for the true class, a false positive
//! for neither.

use serde::{Deserialize, Serialize};

use crate::dataset::{images_to_tensor, AnnotatedImage, CLASS_APD};
use crate::detector::{decode, forward_with, DetectorWeights};
use crate::postprocess::{classify_image, nms, ImageVerdict, DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD};
use crate::{BBox, Error, Exec, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub conf_threshold: f32,
    pub iou_threshold: f32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { conf_threshold: DEFAULT_CONF_THRESHOLD, iou_threshold: DEFAULT_IOU_THRESHOLD }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::config("eval.conf_threshold", format!("{} is not in [0, 1]", self.conf_threshold)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::config("eval.iou_threshold", format!("{} is not in (0, 1)", self.iou_threshold)));
        }
        Ok(())
    }
}

/// Rows are true classes (HC, APD), columns predicted classes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: [[usize; 2]; 2],
    /// Abstentions per true class.
    pub abstained: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// `None` where the denominator is zero.
    pub precision: [Option<f64>; 2],
    pub recall: [Option<f64>; 2],
    pub f1: [Option<f64>; 2],
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    pub fn from_matrix(matrix: [[usize; 2]; 2]) -> Self {
        Confusion { matrix, abstained: [0, 0] }
    }

    pub fn add(&mut self, true_class: usize, predicted: Option<usize>) {
        match predicted {
            Some(p) => self.matrix[true_class][p] += 1,
            None => self.abstained[true_class] += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum::<usize>() + self.abstained.iter().sum::<usize>()
    }

    pub fn scores(&self) -> Result<ClassScores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArgument("no verdicts to score".into()));
        }
        let m = &self.matrix;
        let mut precision = [None; 2];
        let mut recall = [None; 2];
        let mut f1 = [None; 2];
        for c in 0..2 {
            let tp = m[c][c];
            precision[c] = ratio(tp, m[0][c] + m[1][c]);
            recall[c] = ratio(tp, m[c][0] + m[c][1] + self.abstained[c]);
            f1[c] = match (precision[c], recall[c]) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                _ => None,
            };
        }
        Ok(ClassScores { precision, recall, f1, accuracy: (m[0][0] + m[1][1]) as f64 / total as f64 })
    }
}

/// Groups `(score, is_positive)` by descending distinct score and returns the
/// cumulative `(tp, fp)` after each group, starting from `(0, 0)`.
fn sweep(scores: &[(f64, bool)]) -> Vec<(usize, usize)> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = vec![(0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

fn class_counts(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    let p = scores.iter().filter(|s| s.1).count();
    let n = scores.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("ROC needs both classes, got {p} positive and {n} negative")));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(&s.0)) {
        return Err(Error::InvalidArgument("scores must lie in [0, 1]".into()));
    }
    Ok((p, n))
}

/// ROC points `(fpr, tpr)` and the trapezoidal area under them. Equal scores
/// form one threshold step.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<(Vec<(f64, f64)>, f64)> {
    let (p, n) = class_counts(scores)?;
    let pts: Vec<(f64, f64)> = sweep(scores).into_iter().map(|(tp, fp)| (fp as f64 / n as f64, tp as f64 / p as f64)).collect();
    let auc = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok((pts, auc))
}

/// PR points `(recall, precision)`; thresholds with no predicted positive are skipped.
pub fn pr_curve(scores: &[(f64, bool)]) -> Result<Vec<(f64, f64)>> {
    let (p, _) = class_counts(scores)?;
    Ok(sweep(scores)
        .into_iter()
        .filter(|&(tp, fp)| tp + fp > 0)
        .map(|(tp, fp)| (tp as f64 / p as f64, tp as f64 / (tp + fp) as f64))
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouStats {
    pub mean: f64,
    pub median: f64,
    pub fraction_at_least_half: f64,
}

/// Winning-detection IoU per image (abstain = 0).
pub fn detection_iou_stats(pairs: &[(Option<BBox>, BBox)]) -> IouStats {
    if pairs.is_empty() {
        return IouStats::default();
    }
    let mut ious: Vec<f64> = pairs.iter().map(|(d, g)| d.map_or(0.0, |d| d.iou(g) as f64)).collect();
    let n = ious.len() as f64;
    let mean = ious.iter().sum::<f64>() / n;
    let hits = ious.iter().filter(|&&v| v >= 0.5).count() as f64;
    ious.sort_by(f64::total_cmp);
    let k = ious.len();
    let median = if k % 2 == 1 { ious[k / 2] } else { (ious[k / 2 - 1] + ious[k / 2]) / 2.0 };
    IouStats { mean, median, fraction_at_least_half: hits / n }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub index: usize,
    pub subject_id: String,
    pub slice_index: usize,
    pub true_class: usize,
    pub verdict: ImageVerdict,
    pub apd_score: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub confusion: Confusion,
    pub scores: ClassScores,
    pub roc: Vec<(f64, f64)>,
    pub pr: Vec<(f64, f64)>,
    /// `None` when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub roc_error: Option<String>,
    pub iou: IouStats,
    pub images: Vec<ImageResult>,
}

impl EvalReport {
    pub fn from_results(images: Vec<ImageResult>) -> Result<Self> {
        let mut confusion = Confusion::default();
        for r in &images {
            confusion.add(r.true_class, r.verdict.predicted_class);
        }
        let scores = confusion.scores()?;
        let pairs: Vec<(f64, bool)> = images.iter().map(|r| (r.apd_score, r.true_class == CLASS_APD)).collect();
        let (roc, pr, auc, roc_error) = match (roc_auc(&pairs), pr_curve(&pairs)) {
            (Ok((roc, auc)), Ok(pr)) => (roc, pr, Some(auc), None),
            (Err(e), _) | (_, Err(e)) => (Vec::new(), Vec::new(), None, Some(e.to_string())),
        };
        let n = images.len() as f64;
        let mut ious: Vec<f64> = images.iter().map(|r| r.iou).collect();
        ious.sort_by(f64::total_cmp);
        let k = ious.len();
        let iou = IouStats {
            mean: ious.iter().sum::<f64>() / n,
            median: if k % 2 == 1 { ious[k / 2] } else { (ious[k / 2 - 1] + ious[k / 2]) / 2.0 },
            fraction_at_least_half: ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n,
        };
        Ok(EvalReport { n_images: images.len(), confusion, scores, roc, pr, auc, roc_error, iou, images })
    }

    pub fn accuracy(&self) -> f64 {
        self.scores.accuracy
    }
}

/// Verdict for every image, in input order.
pub fn predict(weights: &DetectorWeights, images: &[&AnnotatedImage], opts: &EvalOptions, exec: Exec) -> Result<Vec<ImageVerdict>> {
    let per_image = exec.map_slice(images, |s| -> Result<ImageVerdict> {
        let x = images_to_tensor(&[&s.image])?;
        let (raw, _) = forward_with(Exec::Sequential, weights, &x, &[])?;
        let dets = decode(&raw, weights.config(), opts.conf_threshold).pop().unwrap_or_default();
        Ok(classify_image(&nms(&dets, opts.iou_threshold)))
    });
    per_image.into_iter().collect()
}

/// Evaluates `weights` on `corpus[indices]`.
pub fn evaluate(weights: &DetectorWeights, corpus: &[AnnotatedImage], indices: &[usize], opts: &EvalOptions, exec: Exec) -> Result<EvalReport> {
    opts.validate()?;
    if indices.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let samples: Vec<&AnnotatedImage> = indices.iter().map(|&i| &corpus[i]).collect();
    let verdicts = predict(weights, &samples, opts, exec)?;
    let images = indices
        .iter()
        .zip(&samples)
        .zip(verdicts)
        .map(|((&index, s), verdict)| {
            let gt = s.primary_box();
            let iou = match (&verdict.detection, gt) {
                (Some(d), Some(g)) => d.bbox.iou(&g) as f64,
                _ => 0.0,
            };
            ImageResult {
                index,
                subject_id: s.subject_id.clone(),
                slice_index: s.slice_index,
                true_class: s.class_id(),
                apd_score: verdict.class_confidence(CLASS_APD) as f64,
                verdict,
                iou,
            }
        })
        .collect();
    EvalReport::from_results(images)
}

/// Element-wise mean of several reports' headline numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub rounds: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub iou_fraction_at_least_half: f64,
}

pub fn mean_metrics(reports: &[&EvalReport]) -> MeanMetrics {
    let n = reports.len().max(1) as f64;
    let aucs: Option<Vec<f64>> = reports.iter().map(|r| r.auc).collect();
    MeanMetrics {
        rounds: reports.len(),
        accuracy: reports.iter().map(|r| r.accuracy()).sum::<f64>() / n,
        auc: aucs.map(|a| a.iter().sum::<f64>() / n),
        iou_fraction_at_least_half: reports.iter().map(|r| r.iou.fraction_at_least_half).sum::<f64>() / n,
    }
}

//! Non-maximum suppression and the per-image class decision.
//!
//! Both class labels describe the same physical structure, so suppression is
//! class-agnostic: overlapping boxes compete regardless of label.

use serde::{Deserialize, Serialize};

use crate::BBox;

pub const DEFAULT_IOU_THRESHOLD: f32 = 0.45;
pub const DEFAULT_CONF_THRESHOLD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// `σ(obj)·σ(cls)` of the winning class.
    pub score: f32,
    /// `σ(obj)·σ(cls_c)` for every class `c`.
    pub class_scores: Vec<f32>,
}

impl Detection {
    pub fn class_score(&self, class_id: usize) -> f32 {
        self.class_scores.get(class_id).copied().unwrap_or(0.0)
    }
}

/// Greedy suppression by descending score; equal scores keep input order.
/// A candidate is dropped when its IoU with an already kept box exceeds
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable sort: ties broken by smaller index
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| dets[k].bbox.iou(&dets[i].bbox) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageVerdict {
    /// `None` means abstain: no detection survived the thresholds.
    pub predicted_class: Option<usize>,
    pub confidence: f32,
    pub detection: Option<Detection>,
}

impl ImageVerdict {
    pub fn abstain() -> Self {
        ImageVerdict { predicted_class: None, confidence: 0.0, detection: None }
    }

    pub fn is_abstain(&self) -> bool {
        self.predicted_class.is_none()
    }

    /// Confidence assigned to `class_id` by the winning detection, 0 on abstain.
    pub fn class_confidence(&self, class_id: usize) -> f32 {
        self.detection.as_ref().map_or(0.0, |d| d.class_score(class_id))
    }
}

/// Class of the highest-scoring detection (first one on ties).
pub fn classify_image(dets: &[Detection]) -> ImageVerdict {
    let best = dets.iter().fold(None::<&Detection>, |best, d| match best {
        Some(b) if b.score >= d.score => Some(b),
        _ => Some(d),
    });
    match best {
        None => ImageVerdict::abstain(),
        Some(d) => ImageVerdict { predicted_class: Some(d.class_id), confidence: d.score, detection: Some(d.clone()) },
    }
}

/// Subject-level majority vote over slice verdicts; abstains do not vote and
/// ties resolve to the lower class id. Not part of the image-level metrics.
pub fn majority_vote(verdicts: &[ImageVerdict], num_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; num_classes];
    for c in verdicts.iter().filter_map(|v| v.predicted_class) {
        if c < num_classes {
            counts[c] += 1;
        }
    }
    let max = *counts.iter().max()?;
    (max > 0).then(|| counts.iter().position(|&c| c == max).unwrap())
}

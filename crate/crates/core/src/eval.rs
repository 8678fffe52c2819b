//! Mean average precision and recall at a single IoU threshold.
//!
//! Predictions are ranked by confidence across all images of a class; each
//! claims the best-overlapping still-unmatched ground truth of its class
//! in its own image. AP integrates the all-point interpolated
//! precision/recall curve.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundTruthImage;
use crate::model::{box_iou, BBox, Detection, RefinedAnnotation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("IoU threshold {0} must lie strictly between 0 and 1")]
    IouThreshold(f64),
    #[error("{predictions} prediction lists for {images} ground-truth images")]
    LengthMismatch { predictions: usize, images: usize },
}

/// Anything that can be scored as a detection.
pub trait Scored {
    /// `None` for entries with no box, which are skipped.
    fn scored(&self) -> Option<(u32, BBox, f64)>;
}

impl Scored for RefinedAnnotation {
    fn scored(&self) -> Option<(u32, BBox, f64)> {
        self.bbox.map(|b| (self.class_id, b, self.effective_prob))
    }
}

impl Scored for Detection {
    fn scored(&self) -> Option<(u32, BBox, f64)> {
        Some((self.class_id(), *self.bbox(), self.prob()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<u32, f64>,
    pub map: f64,
    pub recall: f64,
    pub counts: BTreeMap<u32, ClassCounts>,
}

struct Ranked {
    image: usize,
    class_id: u32,
    bbox: BBox,
    score: f64,
}

fn rank_order(a: &Ranked, b: &Ranked) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.class_id.cmp(&b.class_id))
        .then_with(|| a.bbox.cx().total_cmp(&b.bbox.cx()))
        .then_with(|| a.bbox.cy().total_cmp(&b.bbox.cy()))
        .then_with(|| a.bbox.w().total_cmp(&b.bbox.w()))
        .then_with(|| a.bbox.h().total_cmp(&b.bbox.h()))
        .then_with(|| a.image.cmp(&b.image))
}

/// All-point interpolated area under a precision/recall sequence.
pub fn average_precision(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mpre.push(0.0);
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

/// Evaluates per-image predictions against ground truth, image by image in
/// the same order.
pub fn evaluate<P: Scored>(
    preds: &[Vec<P>],
    truth: &[GroundTruthImage],
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(EvalError::IouThreshold(iou_threshold));
    }
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predictions: preds.len(),
            images: truth.len(),
        });
    }

    let mut gt_per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for gt in truth {
        for obj in &gt.objects {
            *gt_per_class.entry(obj.class_id).or_default() += 1;
        }
    }

    let mut by_class: BTreeMap<u32, Vec<Ranked>> = BTreeMap::new();
    for (image, list) in preds.iter().enumerate() {
        for (class_id, bbox, score) in list.iter().filter_map(Scored::scored) {
            by_class.entry(class_id).or_default().push(Ranked {
                image,
                class_id,
                bbox,
                score,
            });
        }
    }

    let mut counts: BTreeMap<u32, ClassCounts> = gt_per_class
        .iter()
        .map(|(&c, &n)| (c, ClassCounts { tp: 0, fp: 0, fn_: n }))
        .collect();
    let mut per_class_ap = BTreeMap::new();

    for (class_id, mut ranked) in by_class {
        ranked.sort_by(rank_order);
        let n_gt = gt_per_class.get(&class_id).copied().unwrap_or(0);
        let mut used: Vec<Vec<bool>> = truth.iter().map(|gt| vec![false; gt.objects.len()]).collect();
        let (mut tp, mut fp) = (0usize, 0usize);
        let (mut recall, mut precision) = (Vec::new(), Vec::new());
        for r in &ranked {
            let best = truth[r.image]
                .objects
                .iter()
                .enumerate()
                .filter(|(i, o)| o.class_id == class_id && !used[r.image][*i])
                .map(|(i, o)| (i, box_iou(&r.bbox, &o.bbox)))
                .filter(|&(_, iou)| iou >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            match best {
                Some((i, _)) => {
                    used[r.image][i] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            if n_gt > 0 {
                recall.push(tp as f64 / n_gt as f64);
                precision.push(tp as f64 / (tp + fp) as f64);
            }
        }
        let entry = counts.entry(class_id).or_default();
        entry.tp = tp;
        entry.fp = fp;
        entry.fn_ = n_gt - tp;
        if n_gt > 0 {
            per_class_ap.insert(class_id, average_precision(&recall, &precision));
        }
    }
    for &class_id in gt_per_class.keys() {
        per_class_ap.entry(class_id).or_insert(0.0);
    }

    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    let (tp, fn_) = counts.values().fold((0, 0), |(t, f), c| (t + c.tp, f + c.fn_));
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Ok(EvalReport {
        per_class_ap,
        map,
        recall,
        counts,
    })
}

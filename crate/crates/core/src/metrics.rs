//! IoU, greedy matching, all-point interpolated AP and the aggregate
//! mAP / precision / recall report.

use crate::detector::DetectionBox;
use crate::signal::GroundTruthLabel;

/// IoU threshold for a detection to count as a true positive.
pub const MATCH_IOU: f64 = 0.5;

/// Anything with a normalized center-size box.
pub trait BoundingBox {
    /// `[cx, cy, w, h]`.
    fn xywh(&self) -> [f64; 4];
}

impl BoundingBox for GroundTruthLabel {
    fn xywh(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl BoundingBox for [f64; 4] {
    fn xywh(&self) -> [f64; 4] {
        *self
    }
}

/// Intersection over union; 0 when either box has no area.
pub fn iou(a: &impl BoundingBox, b: &impl BoundingBox) -> f64 {
    let [ax, ay, aw, ah] = a.xywh();
    let [bx, by, bw, bh] = b.xywh();
    if aw <= 0.0 || ah <= 0.0 || bw <= 0.0 || bh <= 0.0 {
        return 0.0;
    }
    let ix = ((ax + aw / 2.0).min(bx + bw / 2.0) - (ax - aw / 2.0).max(bx - bw / 2.0)).max(0.0);
    let iy = ((ay + ah / 2.0).min(by + bh / 2.0) - (ay - ah / 2.0).max(by - bh / 2.0)).max(0.0);
    let inter = ix * iy;
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One flag per detection, in input order.
    pub is_tp: Vec<bool>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Greedy matching in the given (confidence-descending) order: each
/// detection takes the best unmatched same-class ground truth with
/// IoU >= `iou_thresh`.
pub fn match_detections(dets: &[DetectionBox], gts: &[GroundTruthLabel], iou_thresh: f64) -> MatchResult {
    let mut used = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(d, gt);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        is_tp.push(best.is_some());
    }
    let tp = is_tp.iter().filter(|&&t| t).count();
    MatchResult {
        true_positives: tp,
        false_positives: dets.len() - tp,
        false_negatives: gts.len() - tp,
        is_tp,
    }
}

/// All-point interpolated area under the precision-recall curve. `scored`
/// holds (confidence, is true positive) over every detection of one class;
/// `n_gt` is that class's ground-truth count. `None` when `n_gt` is 0.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::with_capacity(sorted.len());
    let mut precision = Vec::with_capacity(sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &sorted {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Mean of the per-class APs over classes that have ground truth.
    pub map: f64,
    pub recall: f64,
    pub precision: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Aggregates per-image (detections, ground truth) pairs. AP uses every
/// detection; precision and recall only those at or above `conf_thresh`.
pub fn evaluate_predictions(pairs: &[(Vec<DetectionBox>, Vec<GroundTruthLabel>)], n_classes: usize, conf_thresh: f64) -> MetricsReport {
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n_classes];
    let mut n_gt = vec![0usize; n_classes];
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (dets, gts) in pairs {
        let mut dets = dets.clone();
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let m = match_detections(&dets, gts, MATCH_IOU);
        for (d, &hit) in dets.iter().zip(&m.is_tp) {
            if d.class_id < n_classes {
                scored[d.class_id].push((d.confidence, hit));
            }
        }
        for g in gts {
            if g.class_id < n_classes {
                n_gt[g.class_id] += 1;
            }
        }
        let kept: Vec<DetectionBox> = dets.into_iter().filter(|d| d.confidence >= conf_thresh).collect();
        let m = match_detections(&kept, gts, MATCH_IOU);
        tp += m.true_positives;
        fp += m.false_positives;
        fn_ += m.false_negatives;
    }
    let per_class_ap: Vec<Option<f64>> = (0..n_classes)
        .map(|c| average_precision(&scored[c], n_gt[c]))
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else if fn_ == 0 {
        1.0
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        1.0
    };
    MetricsReport {
        map,
        recall,
        precision,
        per_class_ap,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, cx: f64, cy: f64, w: f64, h: f64, confidence: f64) -> DetectionBox {
        DetectionBox { class_id, cx, cy, w, h, confidence }
    }

    fn gt(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> GroundTruthLabel {
        GroundTruthLabel { class_id, cx, cy, w, h }
    }

    #[test]
    fn iou_cases() {
        let a = [0.5, 0.5, 0.2, 0.2];
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(iou(&a, &[0.9, 0.9, 0.1, 0.1]), 0.0);
        // 2x2 boxes shifted by one unit: overlap 2, union 6
        let b = [0.5, 0.5, 2.0, 2.0];
        let c = [1.5, 0.5, 2.0, 2.0];
        assert!((iou(&b, &c) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &[0.5, 0.5, 0.0, 0.3]), 0.0);
    }

    #[test]
    fn matching_cases() {
        let gts = vec![gt(0, 0.3, 0.3, 0.2, 0.2), gt(1, 0.7, 0.7, 0.2, 0.2)];
        let exact: Vec<_> = gts.iter().map(|g| det(g.class_id, g.cx, g.cy, g.w, g.h, 0.9)).collect();
        let m = match_detections(&exact, &gts, 0.5);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (2, 0, 0));

        let m = match_detections(&[], &gts, 0.5);
        assert_eq!(m.false_negatives, 2);

        let two_on_one = vec![det(0, 0.3, 0.3, 0.2, 0.2, 0.9), det(0, 0.31, 0.3, 0.2, 0.2, 0.8)];
        let m = match_detections(&two_on_one, &gts[..1], 0.5);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 1, 0));
        assert_eq!(m.is_tp, vec![true, false]);

        // class must agree
        let wrong = vec![det(1, 0.3, 0.3, 0.2, 0.2, 0.9)];
        assert_eq!(match_detections(&wrong, &gts[..1], 0.5).true_positives, 0);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), Some(1.0));
        assert_eq!(average_precision(&[(0.9, false), (0.8, false)], 2), Some(0.0));
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[(0.9, false)], 0), None);
    }

    #[test]
    fn ap_depends_only_on_ranking() {
        let s = [(0.9, true), (0.6, false), (0.4, true), (0.2, false), (0.1, true)];
        let rescaled: Vec<_> = s.iter().map(|&(c, t)| (c * c * 3.0 + 1.0, t)).collect();
        assert_eq!(average_precision(&s, 4), average_precision(&rescaled, 4));
    }

    #[test]
    fn report_recomputes_precision_recall() {
        let pairs = vec![
            (vec![det(0, 0.3, 0.3, 0.2, 0.2, 0.9), det(0, 0.8, 0.8, 0.1, 0.1, 0.5)], vec![gt(0, 0.3, 0.3, 0.2, 0.2)]),
            (vec![], vec![gt(1, 0.5, 0.5, 0.2, 0.2)]),
        ];
        let r = evaluate_predictions(&pairs, 3, 0.25);
        assert_eq!((r.true_positives, r.false_positives, r.false_negatives), (1, 1, 1));
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.per_class_ap, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(r.map, 0.5);
    }
}

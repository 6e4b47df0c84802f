use super::{sigmoid, RawGrid};
use crate::metrics::{iou, BoundingBox};

/// Decoded detection; coordinates share the label convention (cx in time,
/// cy in frequency, both normalized).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl BoundingBox for DetectionBox {
    fn xywh(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Thresholds objectness, decodes box offsets relative to their cell and
/// applies per-class greedy NMS. Output is sorted by confidence, descending.
pub fn decode(raw: &RawGrid, conf_thresh: f64, nms_iou: f64) -> Vec<DetectionBox> {
    let s = raw.grid_s;
    let sf = s as f64;
    let mut boxes = Vec::new();
    for i in 0..s {
        for j in 0..s {
            let c = raw.cell(i, j);
            let conf = sigmoid(c[0]);
            if conf < conf_thresh {
                continue;
            }
            let class_id = c[5..]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0;
            boxes.push(DetectionBox {
                class_id,
                cx: (j as f64 + sigmoid(c[1])) / sf,
                cy: (i as f64 + sigmoid(c[2])) / sf,
                w: sigmoid(c[3]),
                h: sigmoid(c[4]),
                confidence: conf,
            });
        }
    }
    nms(boxes, nms_iou)
}

/// Greedy per-class non-maximum suppression.
pub fn nms(mut boxes: Vec<DetectionBox>, iou_thresh: f64) -> Vec<DetectionBox> {
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<DetectionBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        if kept
            .iter()
            .all(|k| k.class_id != b.class_id || iou(k, &b) <= iou_thresh)
        {
            kept.push(b);
        }
    }
    kept
}

use std::cmp::Ordering;

use super::Detection;
use crate::boxes::iou;

/// Greedy suppression in descending score order; a box is dropped when its
/// IoU with an already kept box exceeds `iou_thresh`. Ties in score keep
/// input order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh as f64) {
            kept.push(d);
        }
    }
    kept
}

use serde::{Deserialize, Serialize};

use crate::matching::{iou, Box};
use crate::model::DetectionSet;

/// One detection in episode-class space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub class: usize,
    pub bbox: Box,
    pub score: f64,
}

/// DETR readout: each query proposes its best non-∅ class with that probability
/// as score. Queries whose overall argmax is ∅, or whose score is below
/// `threshold`, are dropped.
pub fn score_detections(dets: &DetectionSet, threshold: f64) -> Vec<Scored> {
    dets.probs
        .iter()
        .zip(&dets.boxes)
        .filter_map(|(p, &bbox)| {
            let m = p.len().checked_sub(1)?;
            let (class, &score) = p[..m].iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
            (score >= p[m] && score >= threshold).then_some(Scored { class, bbox, score })
        })
        .collect()
}

/// Evaluation readout: every query proposes its best non-∅ class with that
/// probability as score, whatever ∅ gets. AP does the ranking.
pub fn rank_detections(dets: &DetectionSet) -> Vec<Scored> {
    dets.probs
        .iter()
        .zip(&dets.boxes)
        .filter_map(|(p, &bbox)| {
            let m = p.len().checked_sub(1)?;
            let (class, &score) = p[..m].iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
            Some(Scored { class, bbox, score })
        })
        .collect()
}

/// Greedy per-image matching in descending score order (ties keep input
/// order). Returns `(score, true_positive)` per detection.
pub fn match_image(dets: &[(f64, Box)], gts: &[Box], iou_threshold: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.total_cmp(&dets[a].0));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let (score, b) = dets[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, iou(b.to_xyxy(), g.to_xyxy())))
                .filter(|&(_, v)| v >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    (score, true)
                }
                None => (score, false),
            }
        })
        .collect()
}

/// All-point interpolated AP from pooled `(score, tp)` pairs and the
/// ground-truth count. Zero when there is no ground truth.
pub fn ap_from_matches(matches: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..matches.len()).collect();
    order.sort_by(|&a, &b| matches[b].0.total_cmp(&matches[a].0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if matches[i].1 {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Single-image AP of `dets` against `gts`.
pub fn average_precision(dets: &[(f64, Box)], gts: &[Box], iou_threshold: f64) -> f64 {
    ap_from_matches(&match_image(dets, gts, iou_threshold), gts.len())
}

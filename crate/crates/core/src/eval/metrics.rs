use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::{iou, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub score: f64,
    pub is_positive: bool,
}

impl RankedPrediction {
    pub fn new(score: f64, is_positive: bool) -> Self {
        RankedPrediction { score, is_positive }
    }
}

/// Continuous average precision: the mean, over positives, of the
/// precision at each positive's rank. Sorting is by descending score and
/// stable, so tied items keep their input order.
pub fn average_precision(preds: &[RankedPrediction]) -> Result<f64> {
    ap_with_total(preds, preds.iter().filter(|p| p.is_positive).count())
}

/// AP where `total_positives` may exceed the positives present in `preds`
/// (missed ground truth counts as recall never reached).
fn ap_with_total(preds: &[RankedPrediction], total_positives: usize) -> Result<f64> {
    if total_positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive".into()));
    }
    if preds.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::invalid("prediction scores must be finite"));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if preds[i].is_positive {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total_positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Ground truth per image, per class.
pub type GroundTruth = BTreeMap<String, BTreeMap<usize, Vec<BBox>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// AP of every class that has ground truth.
    pub per_class: BTreeMap<usize, f64>,
    pub map: f64,
}

/// Detections of one class become ranked predictions: in descending score
/// order each is a true positive iff its best-overlapping still-unmatched
/// ground-truth box in the same image reaches `iou_thresh`.
fn match_class(dets: &[&Detection], gt: &GroundTruth, class: usize, iou_thresh: f64) -> Vec<RankedPrediction> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used: BTreeSet<(String, usize)> = BTreeSet::new();
    let mut out = vec![RankedPrediction::new(0.0, false); dets.len()];
    for &i in &order {
        let d = dets[i];
        let boxes = gt.get(&d.image_id).and_then(|m| m.get(&class)).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in boxes.iter().enumerate() {
            if used.contains(&(d.image_id.clone(), j)) {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        let hit = match best {
            Some((j, _)) => used.insert((d.image_id.clone(), j)),
            None => false,
        };
        out[i] = RankedPrediction::new(d.score, hit);
    }
    out
}

/// Per-class AP with greedy matching and their unweighted mean over the
/// classes that have at least one ground-truth box.
pub fn detection_map(dets: &[Detection], gt: &GroundTruth, iou_thresh: f64) -> Result<MapResult> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::invalid(format!("iou threshold must be in (0, 1], got {iou_thresh}")));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for per_image in gt.values() {
        for (&c, boxes) in per_image {
            *counts.entry(c).or_default() += boxes.len();
        }
    }
    let mut per_class = BTreeMap::new();
    for (&class, &n) in &counts {
        if n == 0 {
            continue;
        }
        let of_class: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
        let ranked = match_class(&of_class, gt, class, iou_thresh);
        per_class.insert(class, ap_with_total(&ranked, n)?);
    }
    if per_class.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth boxes for any class".into()));
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MapResult { per_class, map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(scores: &[f64], pos: &[u8]) -> Vec<RankedPrediction> {
        scores.iter().zip(pos).map(|(&s, &p)| RankedPrediction::new(s, p == 1)).collect()
    }

    #[test]
    fn hand_case() {
        let ap = average_precision(&preds(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 1])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0 + 0.75) / 3.0).abs() < 1e-12);
        assert!((ap - 0.80556).abs() < 1e-5);
    }

    #[test]
    fn perfect_and_undefined() {
        assert_eq!(average_precision(&preds(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        assert!(matches!(average_precision(&preds(&[0.5], &[0])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(average_precision(&preds(&[0.5, 0.5], &[1, 0])).unwrap(), 1.0);
        assert_eq!(average_precision(&preds(&[0.5, 0.5], &[0, 1])).unwrap(), 0.5);
    }

    fn gt_one(image: &str, class: usize, b: BBox) -> GroundTruth {
        BTreeMap::from([(image.to_string(), BTreeMap::from([(class, vec![b])]))])
    }

    fn det(image: &str, b: BBox, class: usize, score: f64) -> Detection {
        Detection {
            image_id: image.into(),
            bbox: b,
            class_id: class,
            score,
        }
    }

    #[test]
    fn exact_detection_scores_one() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = detection_map(&[det("a", b, 1, 0.9)], &gt_one("a", 1, b), 0.5).unwrap();
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gt = gt_one("a", 1, b);
        let r = detection_map(&[det("a", b, 1, 0.9), det("a", b, 1, 0.8)], &gt, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        let r = detection_map(&[det("a", b, 1, 0.7), det("b", b, 1, 0.8)], &gt, 0.5).unwrap();
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = detection_map(&[det("a", b, 1, 0.9), det("a", b, 2, 0.9)], &gt_one("a", 1, b), 0.5).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn missed_ground_truth_lowers_recall() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let mut gt = gt_one("a", 1, b);
        gt.insert("b".into(), BTreeMap::from([(1, vec![b])]));
        let r = detection_map(&[det("a", b, 1, 0.9)], &gt, 0.5).unwrap();
        assert_eq!(r.map, 0.5);
    }
}

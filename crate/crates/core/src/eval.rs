//! Detection evaluation: per-class average precision at tIoU thresholds and
//! the mAP report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{tiou, EvalConfig, Segment};
use crate::scalar::Scalar;

/// Evaluation report serialized as JSON. All maps are ordered so the output
/// is byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// class -> threshold key -> AP
    pub per_class_ap: BTreeMap<String, BTreeMap<String, f64>>,
    /// threshold key -> mAP (unweighted class mean)
    pub per_threshold_map: BTreeMap<String, f64>,
    /// mean of per-threshold mAPs
    pub average_map: f64,
    pub num_classes: usize,
    pub num_ground_truths: usize,
    pub num_predictions: usize,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

/// Single-class average precision at one tIoU threshold.
///
/// Predictions are ranked by score (ties broken by video id, start, end);
/// each is greedily matched to the unmatched same-video ground truth with the
/// highest tIoU at or above the threshold. AP accumulates precision-at-rank
/// over the matched predictions, normalized by the ground-truth count.
pub fn average_precision<S: Scalar>(
    preds: &[Segment<S>],
    gts: &[Segment<S>],
    thresh: f64,
) -> f64 {
    if gts.is_empty() {
        log::warn!("average_precision: no ground truths; AP defined as 0");
        return 0.0;
    }
    let mut order: Vec<&Segment<S>> = preds.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then(a.start.partial_cmp(&b.start).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.end.partial_cmp(&b.end).unwrap_or(std::cmp::Ordering::Equal))
    });

    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, gt) in gts.iter().enumerate() {
        by_video.entry(gt.video_id.as_str()).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    let thresh = S::cast(thresh);

    let mut true_positives = 0usize;
    let mut ap = 0.0f64;
    for (rank0, pred) in order.iter().enumerate() {
        let mut best: Option<(S, usize)> = None;
        if let Some(candidates) = by_video.get(pred.video_id.as_str()) {
            for &gi in candidates {
                if matched[gi] {
                    continue;
                }
                let overlap = tiou(pred, &gts[gi]);
                if overlap < thresh {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bo, _)) => overlap > bo,
                };
                if better {
                    best = Some((overlap, gi));
                }
            }
        }
        if let Some((_, gi)) = best {
            matched[gi] = true;
            true_positives += 1;
            let precision = true_positives as f64 / (rank0 + 1) as f64;
            ap += precision / gts.len() as f64;
        }
    }
    ap
}

/// Per-class AP at every configured threshold; classes with zero ground
/// truths are excluded from the means.
pub fn mean_ap<S: Scalar>(
    preds: &[Segment<S>],
    gts: &[Segment<S>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut classes: Vec<String> = Vec::new();
    for gt in gts {
        let label = gt
            .label
            .as_ref()
            .ok_or_else(|| Error::validation("ground-truth segment without a label"))?;
        if !classes.contains(label) {
            classes.push(label.clone());
        }
    }
    classes.sort();

    let mut per_class_ap: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut per_threshold: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for class in &classes {
        let class_gts: Vec<Segment<S>> =
            gts.iter().filter(|g| g.label.as_deref() == Some(class)).cloned().collect();
        let class_preds: Vec<Segment<S>> =
            preds.iter().filter(|p| p.label.as_deref() == Some(class)).cloned().collect();
        let mut row = BTreeMap::new();
        for &t in &cfg.tiou_thresholds {
            let ap = average_precision(&class_preds, &class_gts, t);
            row.insert(threshold_key(t), ap);
            per_threshold.entry(threshold_key(t)).or_default().push(ap);
        }
        per_class_ap.insert(class.clone(), row);
    }

    let per_threshold_map: BTreeMap<String, f64> = cfg
        .tiou_thresholds
        .iter()
        .map(|&t| {
            let key = threshold_key(t);
            let aps = per_threshold.get(&key).map(Vec::as_slice).unwrap_or(&[]);
            let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
            (key, map)
        })
        .collect();
    let average_map = if per_threshold_map.is_empty() {
        0.0
    } else {
        per_threshold_map.values().sum::<f64>() / per_threshold_map.len() as f64
    };

    Ok(EvalReport {
        per_class_ap,
        per_threshold_map,
        average_map,
        num_classes: classes.len(),
        num_ground_truths: gts.len(),
        num_predictions: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(video: &str, start: f64, end: f64, label: &str, score: f64) -> Segment<f64> {
        Segment::new(video, start, end, Some(label.into()), score).unwrap()
    }

    #[test]
    fn one_matching_pred_is_perfect() {
        let gts = vec![seg("v", 0.0, 10.0, "a", 1.0)];
        let preds = vec![seg("v", 1.0, 9.0, "a", 0.9)];
        assert_eq!(average_precision(&preds, &gts, 0.5), 1.0);
    }

    #[test]
    fn high_scoring_false_positive_halves_ap() {
        let gts = vec![seg("v", 0.0, 10.0, "a", 1.0)];
        let preds = vec![
            seg("v", 50.0, 60.0, "a", 0.9), // no overlap
            seg("v", 0.0, 10.0, "a", 0.8),
        ];
        assert_eq!(average_precision(&preds, &gts, 0.5), 0.5);
    }

    #[test]
    fn no_ground_truth_is_zero() {
        let preds = vec![seg("v", 0.0, 1.0, "a", 0.9)];
        assert_eq!(average_precision(&preds, &[], 0.5), 0.0);
    }

    #[test]
    fn matching_is_per_video() {
        let gts = vec![seg("v1", 0.0, 10.0, "a", 1.0)];
        let preds = vec![seg("v2", 0.0, 10.0, "a", 0.9)];
        assert_eq!(average_precision(&preds, &gts, 0.5), 0.0);
    }

    #[test]
    fn adding_top_scored_match_never_decreases_ap() {
        let gts = vec![seg("v", 0.0, 10.0, "a", 1.0), seg("v", 20.0, 30.0, "a", 1.0)];
        let preds = vec![seg("v", 40.0, 50.0, "a", 0.6), seg("v", 0.5, 9.5, "a", 0.5)];
        let before = average_precision(&preds, &gts, 0.5);
        let mut more = preds.clone();
        more.push(seg("v", 20.0, 30.0, "a", 0.99));
        let after = average_precision(&more, &gts, 0.5);
        assert!(after >= before);
    }

    #[test]
    fn perfect_detections_give_map_one() {
        let gts = vec![
            seg("v1", 0.0, 10.0, "a", 1.0),
            seg("v1", 20.0, 26.0, "b", 1.0),
            seg("v2", 5.0, 9.0, "a", 1.0),
        ];
        let preds: Vec<_> = gts
            .iter()
            .map(|g| {
                Segment::new(g.video_id.clone(), g.start, g.end, g.label.clone(), 0.9).unwrap()
            })
            .collect();
        let report = mean_ap(&preds, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(report.average_map, 1.0);
        for v in report.per_threshold_map.values() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn empty_predictions_give_zero() {
        let gts = vec![seg("v", 0.0, 10.0, "a", 1.0)];
        let report = mean_ap::<f64>(&[], &gts, &EvalConfig::default()).unwrap();
        assert_eq!(report.average_map, 0.0);
    }

    #[test]
    fn zero_gt_classes_are_excluded_from_the_mean() {
        let gts = vec![seg("v", 0.0, 10.0, "a", 1.0)];
        // predictions of class "b" have no ground truth and must not drag the
        // mean down
        let preds = vec![seg("v", 0.0, 10.0, "a", 0.9), seg("v", 3.0, 4.0, "b", 0.99)];
        let report = mean_ap(&preds, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(report.average_map, 1.0);
        assert_eq!(report.num_classes, 1);
    }
}

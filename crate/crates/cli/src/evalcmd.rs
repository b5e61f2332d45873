//! Evaluation command logic: reconcile detection and annotation units and
//! produce the mAP report.

use anyhow::Result;

use ovtad_core::eval::{mean_ap, EvalReport};
use ovtad_core::postprocess::EvalConfig;
use ovtad_core::Segment64;

use crate::formats::{detections_to_segments, Annotations, DetectionRecord};

/// Compute the evaluation report. Detections are in seconds and are mapped
/// back to the annotation frame timeline with `fps` (frame rows per second).
/// When `restrict_classes` is given, both sides are filtered to those classes
/// first (open-vocabulary test protocol).
pub fn evaluate(
    detections: &[DetectionRecord],
    annotations: &Annotations,
    fps: f64,
    eval_cfg: &EvalConfig,
    restrict_classes: Option<&[String]>,
) -> Result<EvalReport> {
    let mut preds = detections_to_segments(detections, fps)?;
    let mut gts: Vec<Segment64> =
        annotations.values().flat_map(|(_, segs)| segs.iter().cloned()).collect();
    if let Some(classes) = restrict_classes {
        let keep = |s: &Segment64| {
            s.label.as_deref().map(|l| classes.iter().any(|c| c == l)).unwrap_or(false)
        };
        preds.retain(keep);
        gts.retain(keep);
    }
    Ok(mean_ap(&preds, &gts, eval_cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seconds_to_frames_round_trip_through_fps() {
        let mut annotations = Annotations::new();
        annotations.insert(
            "v".into(),
            (
                64.0,
                vec![Segment64::new("v", 8.0, 24.0, Some("a".into()), 1.0).unwrap()],
            ),
        );
        // detections recorded at 4 fps: frames 8..24 are seconds 2..6
        let detections = vec![DetectionRecord {
            video_id: "v".into(),
            start_sec: 2.0,
            end_sec: 6.0,
            label: "a".into(),
            score: 0.9,
        }];
        let report =
            evaluate(&detections, &annotations, 4.0, &EvalConfig::default(), None).unwrap();
        assert_eq!(report.average_map, 1.0);
    }

    #[test]
    fn class_restriction_drops_other_labels() {
        let mut annotations = Annotations::new();
        annotations.insert(
            "v".into(),
            (
                64.0,
                vec![
                    Segment64::new("v", 0.0, 10.0, Some("seen".into()), 1.0).unwrap(),
                    Segment64::new("v", 20.0, 30.0, Some("unseen".into()), 1.0).unwrap(),
                ],
            ),
        );
        let detections = vec![DetectionRecord {
            video_id: "v".into(),
            start_sec: 20.0,
            end_sec: 30.0,
            label: "unseen".into(),
            score: 0.9,
        }];
        let classes = vec!["unseen".to_string()];
        let report = evaluate(
            &detections,
            &annotations,
            1.0,
            &EvalConfig::default(),
            Some(&classes),
        )
        .unwrap();
        assert_eq!(report.num_classes, 1);
        assert_eq!(report.average_map, 1.0);
    }
}

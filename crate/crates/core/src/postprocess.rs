//! Inference postprocessing: candidate decoding, Gaussian Soft-NMS, and
//! open-vocabulary labeling against frozen text embeddings.

use serde::{Deserialize, Serialize};

use crate::align::{pool_rows, AlignmentConfig, TextEmbeddingSet};
use crate::encoder::{FeatureSequence, Pyramid};
use crate::error::{Error, Result};
use crate::heads::to_segment;
use crate::model::{Inference, Model};
use crate::scalar::Scalar;

/// A detected or ground-truth temporal action in base-frame units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment<S: Scalar> {
    pub video_id: String,
    pub start: S,
    pub end: S,
    /// `None` until open-vocabulary classification assigns a class.
    pub label: Option<String>,
    pub score: S,
}

impl<S: Scalar> Segment<S> {
    pub fn new(video_id: impl Into<String>, start: S, end: S, label: Option<String>, score: S) -> Result<Self> {
        if !(end > start) {
            return Err(Error::validation(format!(
                "segment must have end > start, got ({start:?}, {end:?})"
            )));
        }
        if !(score >= S::zero() && score <= S::one()) {
            return Err(Error::validation(format!("segment score {score:?} outside [0, 1]")));
        }
        Ok(Segment { video_id: video_id.into(), start, end, label, score })
    }

    pub fn length(&self) -> S {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    pub softnms_sigma: f64,
    pub softnms_score_floor: f64,
    /// Per-level candidate cap before Soft-NMS.
    pub pre_nms_topk: usize,
    pub actionness_floor: f64,
    pub max_detections_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tiou_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            softnms_sigma: 0.5,
            softnms_score_floor: 0.001,
            pre_nms_topk: 200,
            actionness_floor: 0.1,
            max_detections_per_video: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiou_thresholds.is_empty()
            || self.tiou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(Error::config("tiou thresholds must lie in (0, 1]"));
        }
        if self.softnms_sigma <= 0.0 {
            return Err(Error::config("softnms sigma must be positive"));
        }
        if self.pre_nms_topk == 0 || self.max_detections_per_video == 0 {
            return Err(Error::config("candidate caps must be positive"));
        }
        Ok(())
    }
}

/// Temporal IoU of two segments: overlap length over union length.
pub fn tiou<S: Scalar>(a: &Segment<S>, b: &Segment<S>) -> S {
    interval_tiou((a.start, a.end), (b.start, b.end))
}

pub fn interval_tiou<S: Scalar>(a: (S, S), b: (S, S)) -> S {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(S::zero());
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= S::zero() {
        S::zero()
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeDiagnostics {
    /// Candidates dropped because clamping collapsed their interval.
    pub degenerate_discarded: usize,
}

/// Deterministic candidate ordering: score descending, then start/end
/// ascending.
fn candidate_order<S: Scalar>(a: &Segment<S>, b: &Segment<S>) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.start.partial_cmp(&b.start).unwrap_or(std::cmp::Ordering::Equal))
        .then(a.end.partial_cmp(&b.end).unwrap_or(std::cmp::Ordering::Equal))
}

/// Decode unlabeled candidates from a forward pass: every pyramid frame with
/// actionness above the floor becomes a segment scored by its actionness,
/// capped at `pre_nms_topk` per level.
pub fn decode_candidates_from<S: Scalar>(
    inference: &Inference<S>,
    video: &FeatureSequence<S>,
    cfg: &EvalConfig,
) -> (Vec<Segment<S>>, DecodeDiagnostics) {
    let mut diagnostics = DecodeDiagnostics::default();
    let floor = S::cast(cfg.actionness_floor);
    let t = video.num_frames();
    let mut all = Vec::new();
    for level_preds in &inference.predictions {
        let mut level_cands = Vec::new();
        for p in level_preds {
            if p.actionness <= floor {
                continue;
            }
            match to_segment(p, t) {
                Some((start, end)) => level_cands.push(Segment {
                    video_id: video.video_id.clone(),
                    start,
                    end,
                    label: None,
                    score: p.actionness,
                }),
                None => diagnostics.degenerate_discarded += 1,
            }
        }
        level_cands.sort_by(candidate_order);
        level_cands.truncate(cfg.pre_nms_topk);
        all.extend(level_cands);
    }
    (all, diagnostics)
}

/// Forward a video through the model and decode candidates.
pub fn decode_candidates<S: Scalar>(
    model: &Model<S>,
    video: &FeatureSequence<S>,
    cfg: &EvalConfig,
) -> Result<(Vec<Segment<S>>, DecodeDiagnostics)> {
    cfg.validate()?;
    let inference = model.infer(video)?;
    Ok(decode_candidates_from(&inference, video, cfg))
}

/// Gaussian Soft-NMS: repeatedly take the highest-scoring candidate and decay
/// every remaining score by `exp(-tIoU^2 / sigma)` against it; candidates
/// falling below `floor` are dropped. Scores never increase.
pub fn soft_nms<S: Scalar>(candidates: &[Segment<S>], sigma: S, floor: S) -> Vec<Segment<S>> {
    let mut pool: Vec<Segment<S>> = candidates.to_vec();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best_idx = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| candidate_order(a, b))
            .map(|(i, _)| i)
            .expect("pool not empty");
        let best = pool.swap_remove(best_idx);
        pool.retain_mut(|other| {
            let overlap = tiou(&best, other);
            let decay = (-(overlap * overlap) / sigma).exp();
            other.score = other.score * decay;
            other.score >= floor
        });
        kept.push(best);
    }
    kept
}

/// Assign an open-vocabulary label to each candidate by pooling its interval
/// on `Z0` and every pyramid level, averaging per-source text logits, and
/// taking the softmax argmax. Final score is actionness times class
/// probability.
pub fn classify_open_vocab<S: Scalar>(
    candidates: &[Segment<S>],
    pyramid: &Pyramid<S>,
    text: &TextEmbeddingSet<S>,
    align: &AlignmentConfig,
) -> Result<Vec<Segment<S>>> {
    align.validate()?;
    let m = text.num_classes();
    let d = text.dim();
    if pyramid.z0.cols() != d {
        return Err(Error::config(format!(
            "pyramid width {} does not match text embedding dim {d}",
            pyramid.z0.cols()
        )));
    }
    let text_rows: Vec<Vec<S>> = (0..m)
        .map(|i| maybe_normalize(text.embeddings.row(i), align.normalize_before_dot))
        .collect();
    let tau = S::cast(align.temperature);

    let mut labeled = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let seg = (cand.start.as_f64(), cand.end.as_f64());
        let mut mean_logits = vec![S::zero(); m];
        let mut sources = 0usize;
        let mut add_source = |pooled: Vec<S>| {
            let pooled = maybe_normalize(&pooled, align.normalize_before_dot);
            for (acc, row) in mean_logits.iter_mut().zip(&text_rows) {
                *acc += dot(&pooled, row);
            }
            sources += 1;
        };
        add_source(pool_rows(&pyramid.z0, seg, 0)?);
        for (li, z) in pyramid.levels.iter().enumerate() {
            add_source(pool_rows(z, seg, li + 1)?);
        }
        let inv = S::one() / S::cast_usize(sources);
        mean_logits.iter_mut().for_each(|v| *v = *v * inv / tau);

        let probs = stable_softmax(&mean_logits);
        let (arg, &prob) = probs
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal).then(ib.cmp(ia))
            })
            .expect("at least one class");
        labeled.push(Segment {
            video_id: cand.video_id.clone(),
            start: cand.start,
            end: cand.end,
            label: Some(text.class_names[arg].clone()),
            score: cand.score * prob,
        });
    }
    Ok(labeled)
}

fn maybe_normalize<S: Scalar>(row: &[S], normalize: bool) -> Vec<S> {
    if !normalize {
        return row.to_vec();
    }
    let norm = row
        .iter()
        .map(|&v| v * v)
        .fold(S::zero(), |acc, v| acc + v)
        .sqrt()
        .max(S::cast(1e-12));
    row.iter().map(|&v| v / norm).collect()
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).fold(S::zero(), |acc, v| acc + v)
}

fn stable_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(S::zero(), |acc, &v| acc + v);
    exps.iter().map(|&v| v / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn seg(start: f64, end: f64, score: f64) -> Segment<f64> {
        Segment::new("v", start, end, None, score).unwrap()
    }

    #[test]
    fn tiou_spec_values() {
        assert_eq!(tiou(&seg(3.0, 7.0, 1.0), &seg(3.0, 7.0, 0.5)), 1.0);
        assert!((tiou(&seg(0.0, 2.0, 1.0), &seg(1.0, 3.0, 1.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(tiou(&seg(0.0, 2.0, 1.0), &seg(5.0, 6.0, 1.0)), 0.0);
    }

    #[test]
    fn tiou_symmetric_and_bounded() {
        let a = seg(1.0, 4.0, 0.2);
        let b = seg(2.0, 9.0, 0.4);
        assert_eq!(tiou(&a, &b), tiou(&b, &a));
        let v = tiou(&a, &b);
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn soft_nms_single_candidate_unchanged() {
        let out = soft_nms(&[seg(0.0, 4.0, 0.9)], 0.5, 0.001);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn soft_nms_identical_intervals_decay_spec_value() {
        let out = soft_nms(&[seg(0.0, 4.0, 0.9), seg(0.0, 4.0, 0.8)], 0.5, 0.001);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn soft_nms_disjoint_unchanged() {
        let out = soft_nms(&[seg(0.0, 2.0, 0.9), seg(10.0, 12.0, 0.7)], 0.5, 0.001);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.7);
    }

    #[test]
    fn soft_nms_never_increases_scores() {
        let cands: Vec<Segment<f64>> = (0..20)
            .map(|i| seg(i as f64 * 0.7, i as f64 * 0.7 + 3.0, 0.9 - 0.03 * i as f64))
            .collect();
        let out = soft_nms(&cands, 0.4, 0.0);
        assert_eq!(out.len(), cands.len());
        // compare against the input candidate with the same interval
        for o in &out {
            let original = cands
                .iter()
                .find(|c| c.start == o.start && c.end == o.end)
                .unwrap();
            assert!(o.score <= original.score + 1e-15);
        }
    }

    #[test]
    fn soft_nms_small_sigma_approaches_hard_nms() {
        let cands = vec![seg(0.0, 4.0, 0.9), seg(0.1, 4.1, 0.85), seg(10.0, 14.0, 0.8)];
        let out = soft_nms(&cands, 1e-9, 0.01);
        // the near-duplicate is suppressed entirely, the disjoint one survives
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.8);
    }

    fn toy_pyramid() -> Pyramid<f64> {
        // z0: 8 frames x 2 dims, constant direction e0
        let z0 = Tensor::from_vec(vec![8, 2], [1.0, 0.0].repeat(8)).unwrap();
        let l1 = Tensor::from_vec(vec![4, 2], [1.0, 0.0].repeat(4)).unwrap();
        Pyramid { z0, levels: vec![l1] }
    }

    fn toy_text(rows: &[&[f64]]) -> TextEmbeddingSet<f64> {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        TextEmbeddingSet::new(
            (0..rows.len()).map(|i| format!("c{i}")).collect(),
            Tensor::from_vec(vec![rows.len(), d], data).unwrap(),
            "test".into(),
        )
        .unwrap()
    }

    #[test]
    fn single_class_classification_has_probability_one() {
        let text = toy_text(&[&[1.0, 0.0]]);
        let cands = vec![seg(0.0, 4.0, 0.8)];
        let out =
            classify_open_vocab(&cands, &toy_pyramid(), &text, &AlignmentConfig::default())
                .unwrap();
        assert_eq!(out[0].label.as_deref(), Some("c0"));
        assert!((out[0].score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn matching_embedding_wins_argmax() {
        let text = toy_text(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let cands = vec![seg(0.0, 4.0, 1.0)];
        let out =
            classify_open_vocab(&cands, &toy_pyramid(), &text, &AlignmentConfig::default())
                .unwrap();
        assert_eq!(out[0].label.as_deref(), Some("c1"));
    }

    #[test]
    fn argmax_invariant_under_constant_logit_shift() {
        // shifting every text embedding by a constant along the pooled
        // direction shifts all logits equally
        let base = toy_text(&[&[0.4, 1.0], &[0.9, 0.0]]);
        let shifted = toy_text(&[&[0.4 + 2.0, 1.0], &[0.9 + 2.0, 0.0]]);
        let cands = vec![seg(0.0, 8.0, 1.0)];
        let cfg = AlignmentConfig::default();
        let a = classify_open_vocab(&cands, &toy_pyramid(), &base, &cfg).unwrap();
        let b = classify_open_vocab(&cands, &toy_pyramid(), &shifted, &cfg).unwrap();
        assert_eq!(a[0].label, b[0].label);
    }

    #[test]
    fn eval_config_validation() {
        let mut cfg = EvalConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.softnms_sigma = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = EvalConfig { tiou_thresholds: vec![1.5], ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}

//! Ground-truth assignment across pyramid levels and the detection losses:
//! interval DIoU for boundary regression, focal BCE for actionness, and the
//! combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::LevelOutputs;
use crate::scalar::Scalar;
use crate::tape::{self, NodeId, Tape};

/// Supervision for one pyramid frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTarget<S: Scalar> {
    /// Pyramid level, 1-based.
    pub level: usize,
    pub index: usize,
    /// Present iff the frame is positive.
    pub positive: Option<PositiveTarget<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveTarget<S: Scalar> {
    pub gt_index: usize,
    /// Offsets to the matched action's boundaries, in level-stride units.
    pub d_start: S,
    pub d_end: S,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the actionness (focal) term inside the detection loss.
    pub lambda1: f64,
    /// Weight of the alignment loss in the total objective.
    pub lambda3: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda3: 1.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda3 < 0.0 || self.focal_alpha < 0.0 || self.focal_gamma < 0.0
        {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Upper bound of the regression range owned by level `l` (1-based) out of
/// `num_levels`, in base-frame units. The last level is unbounded.
fn regression_range_hi(level: usize, num_levels: usize) -> f64 {
    if level == num_levels {
        f64::INFINITY
    } else {
        4.0 * (1u64 << (level - 1)) as f64
    }
}

fn regression_range_lo(level: usize) -> f64 {
    if level == 1 {
        0.0
    } else {
        4.0 * (1u64 << (level - 2)) as f64
    }
}

/// Assign ground-truth actions to pyramid frames.
///
/// A frame at level `l`, index `t` (base-frame center `c = t * 2^l`) is
/// positive for an action `(s, e)` iff `c` lies inside it and the larger of
/// the two boundary offsets falls in the level's regression range
/// `(r_{l-1}, r_l]`, with ranges `[0, 4, 8, 16, 32, 64, inf]` for six levels.
/// Frames matching several actions take the shortest one.
pub fn assign_targets<S: Scalar>(
    video_id: &str,
    video_len: usize,
    pyramid_lengths: &[usize],
    gt: &[(f64, f64)],
) -> Result<Vec<FrameTarget<S>>> {
    for &(s, e) in gt {
        if !(s >= 0.0 && s < e && e <= video_len as f64) {
            return Err(Error::validation(format!(
                "video {video_id}: malformed ground-truth segment ({s}, {e}) for length {video_len}"
            )));
        }
    }
    let num_levels = pyramid_lengths.len();
    let mut out = Vec::new();
    for (li, &t_l) in pyramid_lengths.iter().enumerate() {
        let level = li + 1;
        let stride = (1u64 << level) as f64;
        let (lo, hi) = (regression_range_lo(level), regression_range_hi(level, num_levels));
        for t in 0..t_l {
            let c = t as f64 * stride;
            let mut best: Option<(f64, usize)> = None; // (length, gt index)
            for (gi, &(s, e)) in gt.iter().enumerate() {
                if c < s || c > e {
                    continue;
                }
                let reach = (c - s).max(e - c);
                if reach <= lo || reach > hi {
                    continue;
                }
                let len = e - s;
                if best.map_or(true, |(bl, _)| len < bl) {
                    best = Some((len, gi));
                }
            }
            let positive = best.map(|(_, gi)| {
                let (s, e) = gt[gi];
                PositiveTarget {
                    gt_index: gi,
                    d_start: S::cast((c - s) / stride),
                    d_end: S::cast((e - c) / stride),
                }
            });
            out.push(FrameTarget { level, index: t, positive });
        }
    }
    Ok(out)
}

/// Interval DIoU loss: `1 - IoU + center_distance^2 / enclosure^2`.
pub fn diou_loss<S: Scalar>(pred: (S, S), gt: (S, S)) -> Result<S> {
    let (loss, _, _) = tape::diou_interval_grad(pred.0, pred.1, gt.0, gt.1)?;
    Ok(loss)
}

/// Focal binary cross-entropy on a single probability.
pub fn focal_loss<S: Scalar>(p: S, is_positive: bool, alpha: S, gamma: S) -> S {
    tape::focal_value_grad(p, is_positive, alpha, gamma).0
}

/// Detection loss over all pyramid frames of one video:
/// mean DIoU over positive frames (0 if none) plus `lambda1` times the focal
/// sum over all frames normalized by `max(1, positives)`.
pub fn mva_loss<S: Scalar>(
    tape: &mut Tape<S>,
    predictions: &[(usize, LevelOutputs)],
    targets: &[FrameTarget<S>],
    weights: &LossWeights,
) -> Result<NodeId> {
    weights.validate()?;
    let mut per_level: std::collections::BTreeMap<usize, Vec<&FrameTarget<S>>> =
        std::collections::BTreeMap::new();
    for t in targets {
        per_level.entry(t.level).or_default().push(t);
    }

    let mut total_positives = 0usize;
    let mut br_sums: Vec<NodeId> = Vec::new();
    let mut focal_sums: Vec<NodeId> = Vec::new();

    for &(level, outputs) in predictions {
        let t_l = tape.shape(outputs.actionness)[0];
        let level_targets = per_level.get(&level).map(Vec::as_slice).unwrap_or(&[]);
        if level_targets.len() != t_l {
            return Err(Error::ShapeMismatch {
                context: "mva_loss: targets vs level frames",
                left: vec![level_targets.len()],
                right: vec![t_l],
            });
        }

        let mut mask = vec![false; t_l];
        let mut rows = Vec::new();
        let mut centers = Vec::new();
        let mut offset_targets = Vec::new();
        for target in level_targets {
            if let Some(pos) = &target.positive {
                mask[target.index] = true;
                rows.push(target.index);
                centers.push(S::cast_usize(target.index));
                offset_targets.push((pos.d_start, pos.d_end));
            }
        }
        total_positives += rows.len();

        if !rows.is_empty() {
            let selected = tape.select_rows(outputs.offsets, &rows)?;
            let losses = tape.diou_batch(selected, &centers, &offset_targets)?;
            br_sums.push(tape.sum_all(losses));
        }

        let alpha = S::cast(weights.focal_alpha);
        let gamma = S::cast(weights.focal_gamma);
        let focal = tape.focal_bce(outputs.actionness, &mask, alpha, gamma)?;
        focal_sums.push(tape.sum_all(focal));
    }

    let norm = S::one() / S::cast_usize(total_positives.max(1));

    let br_term = match sum_nodes(tape, &br_sums)? {
        Some(total) => tape.scale(total, norm),
        None => tape.constant(vec![1], vec![S::zero()])?,
    };
    let focal_total = sum_nodes(tape, &focal_sums)?
        .ok_or_else(|| Error::contract("mva_loss: no predictions supplied"))?;
    let focal_term = tape.scale(focal_total, S::cast(weights.lambda1) * norm);
    tape.add(br_term, focal_term)
}

fn sum_nodes<S: Scalar>(tape: &mut Tape<S>, nodes: &[NodeId]) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    for &n in nodes {
        acc = Some(match acc {
            Some(a) => tape.add(a, n)?,
            None => n,
        });
    }
    Ok(acc)
}

/// Total objective: detection loss plus `lambda3` times the alignment loss.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    mva: NodeId,
    vta: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    let weighted = tape.scale(vta, S::cast(weights.lambda3));
    tape.add(mva, weighted)
}

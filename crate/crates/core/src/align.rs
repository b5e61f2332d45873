//! Video-text alignment: length-aware pooling of features over action
//! intervals and contrastive alignment against frozen text embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// One frozen embedding vector per class name.
#[derive(Debug, Clone)]
pub struct TextEmbeddingSet<S: Scalar> {
    pub class_names: Vec<String>,
    /// `M x D'`, row per class.
    pub embeddings: Tensor<S>,
    /// Provenance of the embeddings (encoder/prompt identifier).
    pub source_tag: String,
}

impl<S: Scalar> TextEmbeddingSet<S> {
    pub fn new(class_names: Vec<String>, embeddings: Tensor<S>, source_tag: String) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::validation("text embedding set must contain at least one class"));
        }
        if embeddings.shape().len() != 2 || embeddings.shape()[0] != class_names.len() {
            return Err(Error::ShapeMismatch {
                context: "text embeddings vs class names",
                left: embeddings.shape().to_vec(),
                right: vec![class_names.len()],
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!("duplicate class name: {name}")));
            }
        }
        Ok(TextEmbeddingSet { class_names, embeddings, source_tag })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Restrict to the named classes, preserving the given order.
    pub fn subset(&self, names: &[String]) -> Result<TextEmbeddingSet<S>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(names.len() * d);
        for name in names {
            let idx = self.index_of(name).ok_or_else(|| {
                Error::validation(format!("class {name} not present in text embedding set"))
            })?;
            data.extend_from_slice(self.embeddings.row(idx));
        }
        TextEmbeddingSet::new(
            names.to_vec(),
            Tensor::from_vec(vec![names.len(), d], data)?,
            self.source_tag.clone(),
        )
    }
}

/// Pooled features for one ground-truth action: its `Z0` vector, one vector
/// per pyramid level, and the class it belongs to.
#[derive(Debug, Clone)]
pub struct PooledActionFeatures<S: Scalar> {
    pub z0: Vec<S>,
    pub levels: Vec<Vec<S>>,
    pub class_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Softmax temperature for the contrastive terms.
    pub temperature: f64,
    /// Weight of the multi-scale contrastive term.
    pub lambda2: f64,
    /// Use cosine similarity (L2-normalize both sides before the dot product).
    pub normalize_before_dot: bool,
    /// Exclude the positive pair from the contrastive denominator.
    pub strict_negative_denominator: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            temperature: 0.07,
            lambda2: 1.0,
            normalize_before_dot: false,
            strict_negative_denominator: false,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::config("alignment temperature must be positive"));
        }
        if self.lambda2 < 0.0 {
            return Err(Error::config("lambda2 must be nonnegative"));
        }
        Ok(())
    }
}

/// Feature rows `[lo, hi)` covered by a base-frame interval at level `l`
/// (stride `2^l`). Always at least one row, clamped to the level bounds.
pub fn pool_row_range(start: f64, end: f64, level: usize, level_len: usize) -> (usize, usize) {
    let stride = (1usize << level) as f64;
    let lo = ((start / stride).floor() as usize).min(level_len - 1);
    let hi = ((end / stride).ceil() as usize).max(lo + 1).min(level_len);
    (lo, hi)
}

/// Average the feature rows covered by `segment` (base-frame units) at the
/// given level, on the tape.
pub fn length_aware_pool<S: Scalar>(
    tape: &mut Tape<S>,
    z: NodeId,
    segment: (f64, f64),
    level: usize,
) -> Result<NodeId> {
    let level_len = tape.shape(z)[0];
    let (lo, hi) = checked_range(segment, level, level_len)?;
    tape.mean_rows(z, lo, hi)
}

/// Non-tape variant used on the inference path.
pub fn pool_rows<S: Scalar>(z: &Tensor<S>, segment: (f64, f64), level: usize) -> Result<Vec<S>> {
    let level_len = z.shape()[0];
    let (lo, hi) = checked_range(segment, level, level_len)?;
    let d = z.cols();
    let mut acc = vec![S::zero(); d];
    for r in lo..hi {
        for (a, &v) in acc.iter_mut().zip(z.row(r)) {
            *a += v;
        }
    }
    let inv = S::one() / S::cast_usize(hi - lo);
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

fn checked_range(segment: (f64, f64), level: usize, level_len: usize) -> Result<(usize, usize)> {
    let (start, end) = segment;
    if level_len == 0 {
        return Err(Error::contract("length_aware_pool: empty level"));
    }
    if !(start >= 0.0 && end > start) {
        return Err(Error::contract(format!(
            "length_aware_pool: invalid segment ({start}, {end})"
        )));
    }
    Ok(pool_row_range(start, end, level, level_len))
}

/// Dot-product logits between pooled features (`N x D'`) and the text matrix
/// (`M x D'`); optionally on unit-normalized rows.
pub fn similarity<S: Scalar>(
    tape: &mut Tape<S>,
    pooled: NodeId,
    text: NodeId,
    normalize: bool,
) -> Result<NodeId> {
    let dp = *tape.shape(pooled).last().unwrap_or(&0);
    let dt = *tape.shape(text).last().unwrap_or(&0);
    if dp != dt {
        return Err(Error::config(format!(
            "similarity: pooled dim {dp} does not match text embedding dim {dt}"
        )));
    }
    let eps = S::cast(1e-12);
    let (lhs, rhs) = if normalize {
        (tape.row_normalize(pooled, eps)?, tape.row_normalize(text, eps)?)
    } else {
        (pooled, text)
    };
    let text_t = tape.transpose(rhs)?;
    tape.matmul(lhs, text_t)
}

/// InfoNCE over similarity logits: mean over rows of
/// `-log softmax(logits_i / tau)[target_i]`.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: NodeId,
    targets: &[usize],
    cfg: &AlignmentConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let inv_tau = S::cast(1.0 / cfg.temperature);
    let scaled = tape.scale(logits, inv_tau);
    tape.cross_entropy_rows(scaled, targets, cfg.strict_negative_denominator)
}

/// Full alignment loss: contrastive term on the pooled `Z0` features plus
/// `lambda2` times the sum of per-level contrastive terms.
///
/// Returns a constant zero (with a warning) when there are no actions.
pub fn vta_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pooled0: Option<NodeId>,
    pooled_levels: &[NodeId],
    text: NodeId,
    targets: &[usize],
    cfg: &AlignmentConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if targets.is_empty() || pooled0.is_none() {
        log::warn!("vta_loss: no actions in batch; alignment loss defined as 0");
        return tape.constant(vec![1], vec![S::zero()]);
    }
    let pooled0 = pooled0.expect("checked above");
    let check_rows = |tape: &Tape<S>, id: NodeId| -> Result<()> {
        if tape.shape(id)[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                context: "vta_loss: pooled rows vs targets",
                left: tape.shape(id).to_vec(),
                right: vec![targets.len()],
            });
        }
        Ok(())
    };
    check_rows(tape, pooled0)?;
    let logits0 = similarity(tape, pooled0, text, cfg.normalize_before_dot)?;
    let mut total = contrastive_loss(tape, logits0, targets, cfg)?;
    if cfg.lambda2 > 0.0 && !pooled_levels.is_empty() {
        let mut multi: Option<NodeId> = None;
        for &pooled in pooled_levels {
            check_rows(tape, pooled)?;
            let logits = similarity(tape, pooled, text, cfg.normalize_before_dot)?;
            let term = contrastive_loss(tape, logits, targets, cfg)?;
            multi = Some(match multi {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let weighted = tape.scale(multi.expect("at least one level"), S::cast(cfg.lambda2));
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn text_set(rows: &[&[f64]]) -> TextEmbeddingSet<f64> {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        TextEmbeddingSet::new(
            (0..rows.len()).map(|i| format!("class_{i}")).collect(),
            t(&[rows.len(), d], &data),
            "test".into(),
        )
        .unwrap()
    }

    #[test]
    fn duplicate_class_names_rejected() {
        let err = TextEmbeddingSet::new(
            vec!["a".into(), "a".into()],
            t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            "test".into(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn pooling_whole_level_of_constant_rows_returns_the_row() {
        let z = t(&[4, 3], &[2.0, -1.0, 0.5].repeat(4));
        let pooled = pool_rows(&z, (0.0, 8.0), 1).unwrap();
        assert_eq!(pooled, vec![2.0, -1.0, 0.5]);
    }

    #[test]
    fn pooling_level0_is_plain_row_mean() {
        let z = t(&[5, 2], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
        // segment (2,4) at level 0 covers rows 2 and 3
        let pooled = pool_rows(&z, (2.0, 4.0), 0).unwrap();
        assert_eq!(pooled, vec![4.0, 5.0]);
    }

    #[test]
    fn sub_stride_segment_pools_exactly_one_row() {
        // level 3 (stride 8), segment (0,4): floor(0/8)=0, ceil(4/8)=1 -> row 0
        assert_eq!(pool_row_range(0.0, 4.0, 3, 16), (0, 1));
        let z = t(&[2, 2], &[7.0, 8.0, 100.0, 100.0]);
        assert_eq!(pool_rows(&z, (0.0, 4.0), 3).unwrap(), vec![7.0, 8.0]);
    }

    #[test]
    fn pool_range_clamps_to_level_bounds() {
        // segment past the level end still yields a valid single row
        assert_eq!(pool_row_range(30.0, 32.0, 2, 4), (3, 4));
        assert_eq!(pool_row_range(15.9, 16.0, 1, 8), (7, 8));
    }

    #[test]
    fn invalid_segment_is_contract_error() {
        let z = t(&[4, 2], &[0.0; 8]);
        assert!(pool_rows(&z, (3.0, 3.0), 0).is_err());
        assert!(pool_rows(&z, (-1.0, 2.0), 0).is_err());
    }

    #[test]
    fn similarity_spec_points() {
        let mut tape = Tape::new();
        let pooled = tape.leaf(&t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 2.0]));
        let text = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 3.0, 4.0]));
        let logits = similarity(&mut tape, pooled, text, false).unwrap();
        let v = tape.value(logits);
        assert_eq!(v[0], 1.0); // e1 . e1
        assert_eq!(v[2], 0.0); // e2 . e1 orthogonal
        assert_eq!(v[5], 11.0); // [1,2] . [3,4]
    }

    #[test]
    fn similarity_dim_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let pooled = tape.leaf(&t(&[1, 3], &[1.0, 0.0, 0.0]));
        let text = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert!(matches!(
            similarity(&mut tape, pooled, text, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn contrastive_single_class_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[2, 1], &[4.0, -3.0]));
        let cfg = AlignmentConfig { temperature: 1.0, ..Default::default() };
        let loss = contrastive_loss(&mut tape, logits, &[0, 0], &cfg).unwrap();
        assert!(tape.scalar_value(loss).abs() < 1e-12);
    }

    #[test]
    fn contrastive_spec_value() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 2], &[2.0, 0.0]));
        let cfg = AlignmentConfig { temperature: 1.0, ..Default::default() };
        let loss = contrastive_loss(&mut tape, logits, &[0], &cfg).unwrap();
        assert!((tape.scalar_value(loss) - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn large_temperature_approaches_uniform_log_m() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 4], &[3.0, -1.0, 0.5, 2.0]));
        let cfg = AlignmentConfig { temperature: 1e9, ..Default::default() };
        let loss = contrastive_loss(&mut tape, logits, &[1], &cfg).unwrap();
        assert!((tape.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn logit_shift_invariance_and_monotonicity() {
        let cfg = AlignmentConfig { temperature: 0.5, ..Default::default() };
        let eval = |row: &[f64]| {
            let mut tape = Tape::new();
            let logits = tape.leaf(&t(&[1, 3], row));
            let loss = contrastive_loss(&mut tape, logits, &[1], &cfg).unwrap();
            tape.scalar_value(loss)
        };
        let base = eval(&[0.3, 1.1, -0.4]);
        let shifted = eval(&[0.3 + 7.0, 1.1 + 7.0, -0.4 + 7.0]);
        assert!((base - shifted).abs() < 1e-9);
        // decreasing the target logit strictly increases the loss
        assert!(eval(&[0.3, 0.9, -0.4]) > base);
        assert!(base >= 0.0);
    }

    #[test]
    fn vta_matches_independent_scalar_oracle_on_aligned_case() {
        // all pooled vectors equal their target embeddings; orthonormal text
        let text = text_set(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
        ]);
        let targets = [0usize, 2, 3];
        let pooled_data: Vec<f64> =
            targets.iter().flat_map(|&c| text.embeddings.row(c).to_vec()).collect();
        let cfg = AlignmentConfig { temperature: 0.07, lambda2: 1.0, ..Default::default() };

        let mut tape = Tape::new();
        let pooled0 = tape.leaf(&t(&[3, 4], &pooled_data));
        let pooled_l1 = tape.leaf(&t(&[3, 4], &pooled_data));
        let text_id = tape.leaf(&text.embeddings);
        let loss =
            vta_loss(&mut tape, Some(pooled0), &[pooled_l1], text_id, &targets, &cfg).unwrap();

        // independent scalar route: -log(e^{1/tau} / (e^{1/tau} + 3 e^0)),
        // identical for both terms, so total = (1 + lambda2) * per_term
        let tau = 0.07f64;
        let per_row = -( (1.0 / tau).exp() / ((1.0 / tau).exp() + 3.0) ).ln();
        let expected = 2.0 * per_row;
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-9);
    }

    #[test]
    fn lambda2_zero_reduces_to_projection_term() {
        let text = text_set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let pooled = t(&[2, 2], &[0.9, 0.1, 0.2, 0.8]);
        let cfg0 = AlignmentConfig { temperature: 1.0, lambda2: 0.0, ..Default::default() };
        let mut tape = Tape::new();
        let p0 = tape.leaf(&pooled);
        let lvl = tape.leaf(&pooled);
        let text_id = tape.leaf(&text.embeddings);
        let with_levels = vta_loss(&mut tape, Some(p0), &[lvl], text_id, &[0, 1], &cfg0).unwrap();

        let p0b = tape.leaf(&pooled);
        let logits = similarity(&mut tape, p0b, text_id, false).unwrap();
        let solo = contrastive_loss(&mut tape, logits, &[0, 1], &cfg0).unwrap();
        assert_eq!(tape.scalar_value(with_levels), tape.scalar_value(solo));
    }

    #[test]
    fn empty_batch_gives_zero_loss() {
        let text = text_set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut tape = Tape::new();
        let text_id = tape.leaf(&text.embeddings);
        let loss =
            vta_loss(&mut tape, None, &[], text_id, &[], &AlignmentConfig::default()).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }
}

//! Finite-difference verification of tape gradients.
//!
//! Central differences at `h = 1e-5` in 64-bit arithmetic, compared against
//! the analytic gradients from [`Tape::backward`]. Used by the test suite and
//! exposed through the `gradcheck` CLI subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// When set, check only this many randomly chosen coordinates per input.
    pub samples_per_input: Option<usize>,
    /// Seed for coordinate subsampling.
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { step: 1e-5, tolerance: 1e-4, samples_per_input: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    pub checks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Check the analytic gradient of `build` w.r.t. every `requires_grad` input.
///
/// `build` must be a pure function of the inputs: it is re-invoked on
/// perturbed copies for every probed coordinate.
pub fn check_fn<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    build: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let (mut tape, ids, loss) = eval(inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> =
        ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect();

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut max_err = 0.0f64;
    let mut checks = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let coords: Vec<usize> = match cfg.samples_per_input {
            Some(k) if k < input.numel() => {
                (0..k).map(|_| rng.gen_range(0..input.numel())).collect()
            }
            _ => (0..input.numel()).collect(),
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += cfg.step;
            let (tp, _, lp) = eval(&plus)?;
            let f_plus = tp.scalar_value(lp);

            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= cfg.step;
            let (tm, _, lm) = eval(&minus)?;
            let f_minus = tm.scalar_value(lm);

            let numeric = (f_plus - f_minus) / (2.0 * cfg.step);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[c]);
            max_err = max_err.max(rel_err(a, numeric));
            checks += 1;
        }
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        checks,
        max_rel_err: max_err,
        tolerance: cfg.tolerance,
    })
}

fn uniform(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap().with_requires_grad()
}

fn weighted_sum(tape: &mut Tape<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shape = tape.shape(out).to_vec();
    let wn = tape.constant(shape, w)?;
    let prod = tape.mul(out, wn)?;
    Ok(tape.sum_all(prod))
}

/// Gradcheck every tape primitive on random inputs for one seed.
pub fn primitive_suite(seed: u64, cfg: &GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let a = uniform(&[3, 4], &mut rng);
    let b = uniform(&[3, 4], &mut rng);
    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
    ] {
        let report = check_fn(
            name,
            &[a.clone(), b.clone()],
            |tape, ids| {
                let out = match op {
                    0 => tape.add(ids[0], ids[1])?,
                    1 => tape.sub(ids[0], ids[1])?,
                    _ => tape.mul(ids[0], ids[1])?,
                };
                weighted_sum(tape, out, seed)
            },
            cfg,
        )?;
        reports.push(report);
    }

    let m = uniform(&[3, 4], &mut rng);
    let n = uniform(&[4, 2], &mut rng);
    reports.push(check_fn(
        "matmul",
        &[m, n],
        |tape, ids| {
            let out = tape.matmul(ids[0], ids[1])?;
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    let x = uniform(&[3, 4], &mut rng);
    reports.push(check_fn(
        "transpose",
        &[x],
        |tape, ids| {
            let out = tape.transpose(ids[0])?;
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    let x = uniform(&[3, 4], &mut rng);
    let bias = uniform(&[4], &mut rng);
    reports.push(check_fn(
        "add_bias",
        &[x, bias],
        |tape, ids| {
            let out = tape.add_bias(ids[0], ids[1])?;
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    let x = uniform(&[2, 5], &mut rng);
    reports.push(check_fn(
        "scale",
        &[x],
        |tape, ids| {
            let out = tape.scale(ids[0], 1.7);
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    for (name, which) in [("gelu", 0usize), ("sigmoid", 1), ("softplus", 2)] {
        let x = uniform(&[3, 4], &mut rng);
        reports.push(check_fn(
            name,
            &[x],
            |tape, ids| {
                let out = match which {
                    0 => tape.gelu(ids[0]),
                    1 => tape.sigmoid(ids[0]),
                    _ => tape.softplus(ids[0]),
                };
                weighted_sum(tape, out, seed)
            },
            cfg,
        )?);
    }

    for axis in [0usize, 1] {
        let x = uniform(&[3, 4], &mut rng);
        reports.push(check_fn(
            &format!("softmax_axis{axis}"),
            &[x],
            |tape, ids| {
                let out = tape.softmax(ids[0], axis)?;
                weighted_sum(tape, out, seed)
            },
            cfg,
        )?);
    }

    let x = uniform(&[4, 5], &mut rng);
    let mut gamma = uniform(&[5], &mut rng);
    gamma.data_mut().iter_mut().for_each(|v| *v = 0.5 + v.abs());
    let beta = uniform(&[5], &mut rng);
    reports.push(check_fn(
        "layer_norm",
        &[x, gamma, beta],
        |tape, ids| {
            let out = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    for (stride, padding) in [(1usize, 1usize), (2, 1)] {
        let x = uniform(&[7, 3], &mut rng);
        let k = uniform(&[3, 3], &mut rng);
        reports.push(check_fn(
            &format!("depthwise_conv1d_s{stride}"),
            &[x, k],
            |tape, ids| {
                let out = tape.depthwise_conv1d(ids[0], ids[1], stride, padding)?;
                weighted_sum(tape, out, seed)
            },
            cfg,
        )?);
    }

    let x = uniform(&[3, 6], &mut rng);
    reports.push(check_fn(
        "slice_concat_cols",
        &[x],
        |tape, ids| {
            let left = tape.slice_cols(ids[0], 0, 2)?;
            let right = tape.slice_cols(ids[0], 2, 6)?;
            let out = tape.concat_cols(&[right, left])?;
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    let x = uniform(&[5, 3], &mut rng);
    reports.push(check_fn(
        "select_rows",
        &[x],
        |tape, ids| {
            let out = tape.select_rows(ids[0], &[4, 1, 1, 0])?;
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    let v1 = uniform(&[4], &mut rng);
    let v2 = uniform(&[4], &mut rng);
    reports.push(check_fn(
        "stack_rows",
        &[v1, v2],
        |tape, ids| {
            let out = tape.stack_rows(&[ids[0], ids[1]])?;
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    let x = uniform(&[6, 3], &mut rng);
    reports.push(check_fn(
        "mean_rows",
        &[x],
        |tape, ids| {
            let pooled = tape.mean_rows(ids[0], 1, 5)?;
            let stacked = tape.stack_rows(&[pooled])?;
            weighted_sum(tape, stacked, seed)
        },
        cfg,
    )?);

    let x = uniform(&[3, 4], &mut rng);
    reports.push(check_fn(
        "sum_mean_all",
        &[x],
        |tape, ids| {
            let s = tape.sum_all(ids[0]);
            let m = tape.mean_all(ids[0]);
            tape.add(s, m)
        },
        cfg,
    )?);

    let mut x = uniform(&[3, 4], &mut rng);
    // keep rows away from the zero-norm clamp
    x.data_mut().iter_mut().for_each(|v| *v += 0.5 * v.signum() + 0.1);
    reports.push(check_fn(
        "row_normalize",
        &[x],
        |tape, ids| {
            let out = tape.row_normalize(ids[0], 1e-12)?;
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    let x = uniform(&[4, 5], &mut rng);
    reports.push(check_fn(
        "dropout",
        &[x],
        |tape, ids| {
            // fresh rng per rebuild keeps the mask identical across probes
            let mut mask_rng = ChaCha12Rng::seed_from_u64(seed ^ 0xd20);
            let out = tape.dropout(ids[0], 0.3, &mut mask_rng);
            weighted_sum(tape, out, seed)
        },
        cfg,
    )?);

    for strict in [false, true] {
        let logits = uniform(&[4, 5], &mut rng);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        reports.push(check_fn(
            if strict { "cross_entropy_strict" } else { "cross_entropy" },
            &[logits],
            move |tape, ids| tape.cross_entropy_rows(ids[0], &targets, strict),
            cfg,
        )?);
    }

    let mut p = uniform(&[2, 6], &mut rng);
    p.data_mut().iter_mut().for_each(|v| *v = 0.1 + 0.8 * (*v + 1.0) / 2.0);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    reports.push(check_fn(
        "focal_bce",
        &[p],
        move |tape, ids| {
            let losses = tape.focal_bce(ids[0], &mask, 0.25, 2.0)?;
            weighted_sum(tape, losses, seed)
        },
        cfg,
    )?);

    let (offsets, centers, targets) = diou_case(&mut rng);
    reports.push(check_fn(
        "diou_batch",
        &[offsets],
        move |tape, ids| {
            let losses = tape.diou_batch(ids[0], &centers, &targets)?;
            weighted_sum(tape, losses, seed)
        },
        cfg,
    )?);

    Ok(reports)
}

/// Gradcheck the full detection path (projection -> pyramid -> heads ->
/// detection loss) w.r.t. every model parameter and the input features.
///
/// Parameter coordinates are subsampled per seed; the loss also includes the
/// alignment term so text-side pooling is covered end to end.
pub fn composite_detection_suite(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    use crate::align::{length_aware_pool, vta_loss, AlignmentConfig};
    use crate::encoder::PyramidConfig;
    use crate::losses::{assign_targets, mva_loss, total_loss, LossWeights};
    use crate::model::Model;

    let pyramid_cfg = PyramidConfig {
        num_levels: 2,
        model_dim: 8,
        num_heads: 2,
        mlp_ratio: 2,
        projection_depth: 2,
        ..Default::default()
    };
    let model = Model::<f64>::new(pyramid_cfg.clone(), 4, seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xfeed);
    let mut features = Tensor::randn(vec![8, 4], 1.0, &mut rng);
    features.set_requires_grad(true);

    // ground truth: one short and one medium action
    let gt = vec![(1.0f64, 4.0), (4.5, 8.0)];
    let level_lengths = pyramid_cfg.level_lengths(8);
    let targets = assign_targets::<f64>("gc", 8, &level_lengths, &gt)?;
    let text = Tensor::from_vec(
        vec![3, 8],
        (0..24).map(|i| ((i * 7 + seed as usize) % 5) as f64 * 0.3 - 0.6).collect(),
    )?;
    let class_targets = vec![0usize, 2];
    let weights = LossWeights::default();
    let align_cfg = AlignmentConfig { temperature: 0.3, ..Default::default() };

    // inputs = every parameter (in traversal order) + the feature leaf + text
    let mut inputs: Vec<Tensor<f64>> = Vec::new();
    model.visit_params(|_, t| inputs.push(t.clone()));
    let n_params = inputs.len();
    inputs.push(features);
    inputs.push(text);

    let gt_for_build = gt.clone();
    let report = check_fn(
        "composite_detection_path",
        &inputs,
        move |tape, ids| {
            // rebind leaves in the same traversal order the model uses
            let rebound = rebind_model(&model, &ids[..n_params]);
            let out = model_forward_with(&model, tape, &rebound, ids[n_params])?;
            let mva = mva_loss(tape, &out.levels, &targets, &weights)?;

            // alignment branch over ground-truth segments
            let mut pooled0 = Vec::new();
            let mut pooled_levels: Vec<Vec<crate::tape::NodeId>> =
                vec![Vec::new(); out.pyramid.levels.len()];
            for &(s, e) in &gt_for_build {
                pooled0.push(length_aware_pool(tape, out.pyramid.z0, (s, e), 0)?);
                for (li, &z) in out.pyramid.levels.iter().enumerate() {
                    pooled_levels[li].push(length_aware_pool(tape, z, (s, e), li + 1)?);
                }
            }
            let pooled0 = tape.stack_rows(&pooled0)?;
            let mut level_nodes = Vec::new();
            for group in &pooled_levels {
                level_nodes.push(tape.stack_rows(group)?);
            }
            let vta = vta_loss(
                tape,
                Some(pooled0),
                &level_nodes,
                ids[n_params + 1],
                &class_targets,
                &align_cfg,
            )?;
            total_loss(tape, mva, vta, &weights)
        },
        cfg,
    )?;
    Ok(report)
}

/// Gradcheck the alignment path alone (pool -> similarity -> contrastive)
/// w.r.t. the raw level features.
pub fn composite_alignment_suite(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    use crate::align::{contrastive_loss, length_aware_pool, similarity, AlignmentConfig};

    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xa11);
    let mut z0 = Tensor::randn(vec![10, 6], 1.0, &mut rng);
    z0.set_requires_grad(true);
    let mut z1 = Tensor::randn(vec![5, 6], 1.0, &mut rng);
    z1.set_requires_grad(true);
    let mut text = Tensor::randn(vec![4, 6], 1.0, &mut rng);
    text.set_requires_grad(true);
    let segments = vec![(0.5f64, 3.0), (4.0, 9.5)];
    let targets = vec![1usize, 3];

    check_fn(
        "composite_alignment_path",
        &[z0, z1, text],
        move |tape, ids| {
            let mut pooled0 = Vec::new();
            let mut pooled1 = Vec::new();
            for &seg in &segments {
                pooled0.push(length_aware_pool(tape, ids[0], seg, 0)?);
                pooled1.push(length_aware_pool(tape, ids[1], seg, 1)?);
            }
            let p0 = tape.stack_rows(&pooled0)?;
            let p1 = tape.stack_rows(&pooled1)?;
            let align = AlignmentConfig { temperature: 0.25, ..Default::default() };
            let l0 = similarity(tape, p0, ids[2], false)?;
            let l1 = similarity(tape, p1, ids[2], true)?;
            let c0 = contrastive_loss(tape, l0, &targets, &align)?;
            let c1 = contrastive_loss(tape, l1, &targets, &align)?;
            tape.add(c0, c1)
        },
        cfg,
    )
}

/// Reconstruct a `BoundModel` from leaf handles that were pushed in the
/// traversal order of [`crate::model::Model::visit_params`].
fn rebind_model(
    model: &crate::model::Model<f64>,
    param_ids: &[NodeId],
) -> crate::model::BoundModel {
    use crate::encoder::MixerParams;
    use crate::encoder::{BoundEncoder, BoundEncoderLayer, BoundLayerNorm, BoundLinear, BoundMixer};
    use crate::heads::BoundHeads;

    struct Cursor<'a> {
        ids: &'a [NodeId],
        pos: usize,
    }
    impl Cursor<'_> {
        fn next(&mut self) -> NodeId {
            let id = self.ids[self.pos];
            self.pos += 1;
            id
        }
        fn linear(&mut self) -> BoundLinear {
            BoundLinear { weight: self.next(), bias: self.next() }
        }
        fn norm(&mut self) -> BoundLayerNorm {
            BoundLayerNorm { gamma: self.next(), beta: self.next() }
        }
    }

    let mut c = Cursor { ids: param_ids, pos: 0 };
    let mut projection = Vec::new();
    for _ in 0..model.encoder.projection.len() {
        projection.push(c.linear());
    }
    let positional = model.encoder.positional.as_ref().map(|_| c.next());
    let mut layers = Vec::new();
    for layer in &model.encoder.layers {
        let norm1 = c.norm();
        let mixer = match &layer.mixer {
            MixerParams::Attention { .. } => BoundMixer::Attention {
                query: c.linear(),
                key: c.linear(),
                value: c.linear(),
                output: c.linear(),
            },
            MixerParams::Conv { .. } => {
                BoundMixer::Conv { depthwise: c.next(), pointwise: c.linear() }
            }
        };
        layers.push(BoundEncoderLayer {
            norm1,
            mixer,
            norm2: c.norm(),
            mlp_in: c.linear(),
            mlp_out: c.linear(),
        });
    }
    let mut downsamplers = Vec::new();
    for _ in 0..model.encoder.downsamplers.len() {
        downsamplers.push(c.next());
    }
    let heads = BoundHeads {
        depthwise1: c.next(),
        pointwise1: c.linear(),
        depthwise2: c.next(),
        pointwise2: c.linear(),
        regression: c.linear(),
        classification: c.linear(),
    };
    assert_eq!(c.pos, param_ids.len(), "parameter traversal order drifted");
    crate::model::BoundModel {
        encoder: BoundEncoder { projection, positional, layers, downsamplers },
        heads,
    }
}

fn model_forward_with(
    model: &crate::model::Model<f64>,
    tape: &mut Tape<f64>,
    bound: &crate::model::BoundModel,
    features: NodeId,
) -> Result<crate::model::ForwardOutputs> {
    use crate::encoder::build_pyramid;
    use crate::heads::head_forward;

    let pyramid = build_pyramid(tape, features, &bound.encoder, &model.config, None)?;
    let mut levels = Vec::with_capacity(pyramid.levels.len());
    for (i, &z) in pyramid.levels.iter().enumerate() {
        let outputs = head_forward(tape, z, &bound.heads)?;
        levels.push((i + 1, outputs));
    }
    Ok(crate::model::ForwardOutputs { pyramid, levels })
}

/// Random DIoU inputs kept away from the loss's non-differentiable ties so
/// central differences stay valid.
fn diou_case(rng: &mut ChaCha12Rng) -> (Tensor<f64>, Vec<f64>, Vec<(f64, f64)>) {
    let rows = 4;
    let mut offsets = Vec::with_capacity(rows * 2);
    let mut centers = Vec::with_capacity(rows);
    let mut targets = Vec::with_capacity(rows);
    for _ in 0..rows {
        loop {
            let c: f64 = rng.gen_range(3.0..6.0);
            let ds = rng.gen_range(0.3..2.0);
            let de = rng.gen_range(0.3..2.0);
            let tds = rng.gen_range(0.3..2.0);
            let tde = rng.gen_range(0.3..2.0);
            let (ps, pe) = (c - ds, c + de);
            let (gs, ge) = (c - tds, c + tde);
            let inter = (pe.min(ge) - ps.max(gs)).max(0.0);
            let margin = 0.05;
            if (ps - gs).abs() > margin && (pe - ge).abs() > margin && inter > margin {
                offsets.extend_from_slice(&[ds, de]);
                centers.push(c);
                targets.push((tds, tde));
                break;
            }
        }
    }
    (
        Tensor::from_vec(vec![rows, 2], offsets).unwrap().with_requires_grad(),
        centers,
        targets,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_on_three_seeds() {
        let cfg = GradcheckConfig::default();
        for seed in [1u64, 2, 3] {
            for report in primitive_suite(seed, &cfg).unwrap() {
                assert!(
                    report.pass(),
                    "{} seed {} failed: max rel err {:.3e}",
                    report.name,
                    seed,
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn composite_paths_pass_with_subsampling() {
        let cfg = GradcheckConfig {
            samples_per_input: Some(3),
            ..Default::default()
        };
        let det = composite_detection_suite(5, &cfg).unwrap();
        assert!(det.pass(), "detection path: max rel err {:.3e}", det.max_rel_err);
        let align = composite_alignment_suite(5, &GradcheckConfig::default()).unwrap();
        assert!(align.pass(), "alignment path: max rel err {:.3e}", align.max_rel_err);
    }

    #[test]
    fn harness_flags_a_wrong_gradient() {
        // Forward value is sum(2x) but the differentiable path only sees
        // sum(x): finite differences must disagree with the analytic grad.
        let x = Tensor::from_vec(vec![2], vec![0.3, -0.4]).unwrap().with_requires_grad();
        let report = check_fn(
            "broken",
            &[x],
            |tape, ids| {
                // forward value depends on 2x via a constant sneak path the
                // gradient does not see
                let doubled = tape.constant(
                    tape.shape(ids[0]).to_vec(),
                    tape.value(ids[0]).iter().map(|v| 2.0 * v).collect(),
                )?;
                let zero = tape.sub(ids[0], ids[0])?;
                let sneak = tape.add(doubled, zero)?;
                Ok(tape.sum_all(sneak))
            },
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(!report.pass());
    }
}

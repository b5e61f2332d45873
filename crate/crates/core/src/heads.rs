//! Decoder heads: a lightweight convolutional trunk shared across pyramid
//! levels, with a boundary-regression head (softplus, nonnegative offsets in
//! level-stride units) and an actionness head (sigmoid).

use rand_chacha::ChaCha12Rng;

use crate::encoder::{BoundLinear, LinearParams, WEIGHT_INIT_STD};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Decoded state of one pyramid frame. Offsets are in level-stride units;
/// [`to_segment`] rescales to base frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerFramePrediction<S: Scalar> {
    /// Pyramid level, 1-based (stride `2^level` base frames per row).
    pub level: usize,
    pub index: usize,
    pub d_start: S,
    pub d_end: S,
    pub actionness: S,
}

/// One parameter set shared across all pyramid levels: two depthwise-
/// separable conv layers (k=3) with GELU, then 2-channel regression and
/// 1-channel classification projections.
#[derive(Debug, Clone)]
pub struct HeadParams<S: Scalar> {
    pub depthwise1: Tensor<S>,
    pub pointwise1: LinearParams<S>,
    pub depthwise2: Tensor<S>,
    pub pointwise2: LinearParams<S>,
    pub regression: LinearParams<S>,
    pub classification: LinearParams<S>,
}

fn delta_kernels<S: Scalar>(dim: usize) -> Tensor<S> {
    let mut k = Tensor::zeros(vec![3, dim]);
    for c in 0..dim {
        k.data_mut()[dim + c] = S::one();
    }
    k.with_requires_grad()
}

fn normal_linear<S: Scalar>(inp: usize, out: usize, rng: &mut ChaCha12Rng) -> LinearParams<S> {
    let mut weight = Tensor::randn(vec![inp, out], S::cast(WEIGHT_INIT_STD), rng);
    weight.set_requires_grad(true);
    LinearParams { weight, bias: Tensor::zeros(vec![out]).with_requires_grad() }
}

impl<S: Scalar> HeadParams<S> {
    pub fn init(model_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        HeadParams {
            depthwise1: delta_kernels(model_dim),
            pointwise1: normal_linear(model_dim, model_dim, rng),
            depthwise2: delta_kernels(model_dim),
            pointwise2: normal_linear(model_dim, model_dim, rng),
            regression: normal_linear(model_dim, 2, rng),
            classification: normal_linear(model_dim, 1, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundHeads {
    pub depthwise1: NodeId,
    pub pointwise1: BoundLinear,
    pub depthwise2: NodeId,
    pub pointwise2: BoundLinear,
    pub regression: BoundLinear,
    pub classification: BoundLinear,
}

impl<S: Scalar> HeadParams<S> {
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundHeads {
        BoundHeads {
            depthwise1: tape.leaf(&self.depthwise1),
            pointwise1: BoundLinear {
                weight: tape.leaf(&self.pointwise1.weight),
                bias: tape.leaf(&self.pointwise1.bias),
            },
            depthwise2: tape.leaf(&self.depthwise2),
            pointwise2: BoundLinear {
                weight: tape.leaf(&self.pointwise2.weight),
                bias: tape.leaf(&self.pointwise2.bias),
            },
            regression: BoundLinear {
                weight: tape.leaf(&self.regression.weight),
                bias: tape.leaf(&self.regression.bias),
            },
            classification: BoundLinear {
                weight: tape.leaf(&self.classification.weight),
                bias: tape.leaf(&self.classification.bias),
            },
        }
    }
}

/// Head outputs for one pyramid level, still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LevelOutputs {
    /// `T_l x 2` nonnegative boundary offsets (softplus-activated).
    pub offsets: NodeId,
    /// `T_l x 1` actionness probabilities (sigmoid-activated).
    pub actionness: NodeId,
}

/// Run the shared heads over one level's features.
pub fn head_forward<S: Scalar>(
    tape: &mut Tape<S>,
    z: NodeId,
    heads: &BoundHeads,
) -> Result<LevelOutputs> {
    let mut h = tape.depthwise_conv1d(z, heads.depthwise1, 1, 1)?;
    h = tape.matmul(h, heads.pointwise1.weight)?;
    h = tape.add_bias(h, heads.pointwise1.bias)?;
    h = tape.gelu(h);
    h = tape.depthwise_conv1d(h, heads.depthwise2, 1, 1)?;
    h = tape.matmul(h, heads.pointwise2.weight)?;
    h = tape.add_bias(h, heads.pointwise2.bias)?;
    h = tape.gelu(h);

    let reg = tape.matmul(h, heads.regression.weight)?;
    let reg = tape.add_bias(reg, heads.regression.bias)?;
    let offsets = tape.softplus(reg);

    let cls = tape.matmul(h, heads.classification.weight)?;
    let cls = tape.add_bias(cls, heads.classification.bias)?;
    let actionness = tape.sigmoid(cls);

    Ok(LevelOutputs { offsets, actionness })
}

/// Decode one pyramid level into per-frame predictions (inference path).
pub fn decode_level<S: Scalar>(
    z: &Tensor<S>,
    params: &HeadParams<S>,
    level: usize,
) -> Result<Vec<PerFramePrediction<S>>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let zid = tape.leaf(z);
    let out = head_forward(&mut tape, zid, &bound)?;
    Ok(extract_predictions(&tape, &out, level))
}

/// Pull decoded predictions off a tape (shared by training diagnostics and
/// inference).
pub fn extract_predictions<S: Scalar>(
    tape: &Tape<S>,
    out: &LevelOutputs,
    level: usize,
) -> Vec<PerFramePrediction<S>> {
    let offsets = tape.value(out.offsets);
    let actionness = tape.value(out.actionness);
    let t = tape.shape(out.actionness)[0];
    (0..t)
        .map(|i| PerFramePrediction {
            level,
            index: i,
            d_start: offsets[i * 2],
            d_end: offsets[i * 2 + 1],
            actionness: actionness[i],
        })
        .collect()
}

/// Map a per-frame prediction to a base-frame interval.
///
/// A frame at level `l`, index `t` is centered at `t * 2^l` base frames;
/// offsets scale by the level stride. Endpoints clamp to `[0, video_len]`;
/// intervals that collapse under clamping are discarded (`None`).
pub fn to_segment<S: Scalar>(p: &PerFramePrediction<S>, video_len: usize) -> Option<(S, S)> {
    let stride = S::cast_usize(1usize << p.level);
    let center = S::cast_usize(p.index) * stride;
    let t_max = S::cast_usize(video_len);
    let start = (center - p.d_start * stride).max(S::zero()).min(t_max);
    let end = (center + p.d_end * stride).max(S::zero()).min(t_max);
    let eps = S::cast(1e-9);
    (end > start + eps).then_some((start, end))
}

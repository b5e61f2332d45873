//! Multi-scale video encoder: per-frame projection followed by a pyramid of
//! transformer layers, each ending in a strided depthwise convolution that
//! halves the temporal length.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// One untrimmed video as pre-extracted per-frame features.
#[derive(Debug, Clone)]
pub struct FeatureSequence<S: Scalar> {
    pub video_id: String,
    /// `T x D`, row per frame.
    pub features: Tensor<S>,
    /// Feature rows per second; metadata only.
    pub frame_rate_hint: f64,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(video_id: impl Into<String>, features: Tensor<S>, frame_rate_hint: f64) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] < 1 {
            return Err(Error::validation(format!(
                "feature sequence must be a non-empty T x D matrix, got {:?}",
                features.shape()
            )));
        }
        Ok(FeatureSequence { video_id: video_id.into(), features, frame_rate_hint })
    }

    pub fn num_frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    /// Number of pyramid levels (each halves the temporal length).
    pub num_levels: usize,
    /// Model width after projection.
    pub model_dim: usize,
    pub num_heads: usize,
    /// MLP hidden width as a multiple of `model_dim`.
    pub mlp_ratio: usize,
    /// Layers in the per-frame projection MLP.
    pub projection_depth: usize,
    pub dropout_rate: f64,
    /// Add a learned absolute positional embedding to the projected frames.
    pub positional_encoding: bool,
    /// Capacity of the positional table when enabled.
    pub max_positions: usize,
    /// Replace the attention sublayer with a depthwise+pointwise conv block.
    pub conv_encoder: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            num_levels: 6,
            model_dim: 32,
            num_heads: 4,
            mlp_ratio: 4,
            projection_depth: 2,
            dropout_rate: 0.0,
            positional_encoding: false,
            max_positions: 2048,
            conv_encoder: false,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 1 {
            return Err(Error::config("num_levels must be >= 1"));
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.mlp_ratio < 1 || self.projection_depth < 1 {
            return Err(Error::config("mlp_ratio and projection_depth must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must be in [0, 1)"));
        }
        Ok(())
    }

    /// Temporal lengths of levels `1..=L` for a video of `t` frames:
    /// iterated ceil-halving, clamped at 1.
    pub fn level_lengths(&self, t: usize) -> Vec<usize> {
        let mut lengths = Vec::with_capacity(self.num_levels);
        let mut cur = t;
        for _ in 0..self.num_levels {
            cur = cur.div_ceil(2).max(1);
            lengths.push(cur);
        }
        lengths
    }
}

/// Multi-resolution feature maps on a tape: `z0` plus levels `1..=L`.
#[derive(Debug, Clone)]
pub struct PyramidNodes {
    pub z0: NodeId,
    pub levels: Vec<NodeId>,
}

/// Detached pyramid values, used on the inference path.
#[derive(Debug, Clone)]
pub struct Pyramid<S: Scalar> {
    pub z0: Tensor<S>,
    pub levels: Vec<Tensor<S>>,
}

// ── Parameters ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearParams<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LinearParams<S> {
    /// Identity-preserving init: ones on the diagonal plus small noise, zero
    /// bias. Non-square layers get the canonical injection/truncation.
    fn identity_init(inp: usize, out: usize, std: f64, rng: &mut ChaCha12Rng) -> Self {
        let mut weight = Tensor::randn(vec![inp, out], S::cast(std), rng);
        for i in 0..inp.min(out) {
            weight.data_mut()[i * out + i] += S::one();
        }
        weight.set_requires_grad(true);
        LinearParams { weight, bias: Tensor::zeros(vec![out]).with_requires_grad() }
    }

    fn normal_init(inp: usize, out: usize, std: f64, rng: &mut ChaCha12Rng) -> Self {
        let mut weight = Tensor::randn(vec![inp, out], S::cast(std), rng);
        weight.set_requires_grad(true);
        LinearParams { weight, bias: Tensor::zeros(vec![out]).with_requires_grad() }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    fn new(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(vec![dim], S::one()).with_requires_grad(),
            beta: Tensor::zeros(vec![dim]).with_requires_grad(),
        }
    }
}

/// Token mixer inside an encoder layer: full self-attention by default, or a
/// depthwise+pointwise conv block for the conv ablation.
#[derive(Debug, Clone)]
pub enum MixerParams<S: Scalar> {
    Attention {
        query: LinearParams<S>,
        key: LinearParams<S>,
        value: LinearParams<S>,
        output: LinearParams<S>,
    },
    Conv {
        /// `3 x model_dim` depthwise kernels.
        depthwise: Tensor<S>,
        pointwise: LinearParams<S>,
    },
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams<S: Scalar> {
    pub norm1: LayerNormParams<S>,
    pub mixer: MixerParams<S>,
    pub norm2: LayerNormParams<S>,
    pub mlp_in: LinearParams<S>,
    pub mlp_out: LinearParams<S>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams<S: Scalar> {
    pub projection: Vec<LinearParams<S>>,
    pub positional: Option<Tensor<S>>,
    pub layers: Vec<EncoderLayerParams<S>>,
    /// One `3 x model_dim` strided depthwise kernel per level transition.
    pub downsamplers: Vec<Tensor<S>>,
}

/// Center-tap delta kernels: the strided conv starts out as plain
/// subsampling, which keeps signal flowing before training shapes it.
fn delta_kernels<S: Scalar>(dim: usize) -> Tensor<S> {
    let mut k = Tensor::zeros(vec![3, dim]);
    for c in 0..dim {
        k.data_mut()[dim + c] = S::one();
    }
    k.with_requires_grad()
}

pub const WEIGHT_INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<S: Scalar> EncoderParams<S> {
    pub fn init(cfg: &PyramidConfig, input_dim: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::config("input feature dim must be positive"));
        }
        let d = cfg.model_dim;
        let mut projection = Vec::with_capacity(cfg.projection_depth);
        for i in 0..cfg.projection_depth {
            let inp = if i == 0 { input_dim } else { d };
            projection.push(LinearParams::identity_init(inp, d, WEIGHT_INIT_STD, rng));
        }
        let positional = cfg.positional_encoding.then(|| {
            Tensor::zeros(vec![cfg.max_positions, d]).with_requires_grad()
        });
        let hidden = cfg.mlp_ratio * d;
        let mut layers = Vec::with_capacity(cfg.num_levels);
        for _ in 0..cfg.num_levels {
            let mixer = if cfg.conv_encoder {
                MixerParams::Conv {
                    depthwise: delta_kernels(d),
                    pointwise: LinearParams::normal_init(d, d, WEIGHT_INIT_STD, rng),
                }
            } else {
                MixerParams::Attention {
                    query: LinearParams::normal_init(d, d, WEIGHT_INIT_STD, rng),
                    key: LinearParams::normal_init(d, d, WEIGHT_INIT_STD, rng),
                    value: LinearParams::normal_init(d, d, WEIGHT_INIT_STD, rng),
                    output: LinearParams::normal_init(d, d, WEIGHT_INIT_STD, rng),
                }
            };
            layers.push(EncoderLayerParams {
                norm1: LayerNormParams::new(d),
                mixer,
                norm2: LayerNormParams::new(d),
                mlp_in: LinearParams::normal_init(d, hidden, WEIGHT_INIT_STD, rng),
                mlp_out: LinearParams::normal_init(hidden, d, WEIGHT_INIT_STD, rng),
            });
        }
        let downsamplers = (0..cfg.num_levels).map(|_| delta_kernels(d)).collect();
        Ok(EncoderParams { projection, positional, layers, downsamplers })
    }
}

// ── Tape bindings ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

#[derive(Debug, Clone)]
pub struct BoundLayerNorm {
    pub gamma: NodeId,
    pub beta: NodeId,
}

#[derive(Debug, Clone)]
pub enum BoundMixer {
    Attention { query: BoundLinear, key: BoundLinear, value: BoundLinear, output: BoundLinear },
    Conv { depthwise: NodeId, pointwise: BoundLinear },
}

#[derive(Debug, Clone)]
pub struct BoundEncoderLayer {
    pub norm1: BoundLayerNorm,
    pub mixer: BoundMixer,
    pub norm2: BoundLayerNorm,
    pub mlp_in: BoundLinear,
    pub mlp_out: BoundLinear,
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub projection: Vec<BoundLinear>,
    pub positional: Option<NodeId>,
    pub layers: Vec<BoundEncoderLayer>,
    pub downsamplers: Vec<NodeId>,
}

fn bind_linear<S: Scalar>(tape: &mut Tape<S>, p: &LinearParams<S>) -> BoundLinear {
    BoundLinear { weight: tape.leaf(&p.weight), bias: tape.leaf(&p.bias) }
}

fn bind_norm<S: Scalar>(tape: &mut Tape<S>, p: &LayerNormParams<S>) -> BoundLayerNorm {
    BoundLayerNorm { gamma: tape.leaf(&p.gamma), beta: tape.leaf(&p.beta) }
}

impl<S: Scalar> EncoderParams<S> {
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundEncoder {
        BoundEncoder {
            projection: self.projection.iter().map(|p| bind_linear(tape, p)).collect(),
            positional: self.positional.as_ref().map(|p| tape.leaf(p)),
            layers: self
                .layers
                .iter()
                .map(|l| BoundEncoderLayer {
                    norm1: bind_norm(tape, &l.norm1),
                    mixer: match &l.mixer {
                        MixerParams::Attention { query, key, value, output } => {
                            BoundMixer::Attention {
                                query: bind_linear(tape, query),
                                key: bind_linear(tape, key),
                                value: bind_linear(tape, value),
                                output: bind_linear(tape, output),
                            }
                        }
                        MixerParams::Conv { depthwise, pointwise } => BoundMixer::Conv {
                            depthwise: tape.leaf(depthwise),
                            pointwise: bind_linear(tape, pointwise),
                        },
                    },
                    norm2: bind_norm(tape, &l.norm2),
                    mlp_in: bind_linear(tape, &l.mlp_in),
                    mlp_out: bind_linear(tape, &l.mlp_out),
                })
                .collect(),
            downsamplers: self.downsamplers.iter().map(|k| tape.leaf(k)).collect(),
        }
    }
}

// ── Forward ─────────────────────────────────────────────────────────

fn linear<S: Scalar>(tape: &mut Tape<S>, x: NodeId, p: &BoundLinear) -> Result<NodeId> {
    let h = tape.matmul(x, p.weight)?;
    tape.add_bias(h, p.bias)
}

/// Per-frame projection MLP producing `Z0`; GELU between layers, none after
/// the last.
pub fn project<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    bound: &BoundEncoder,
    cfg: &PyramidConfig,
) -> Result<NodeId> {
    let in_dim = tape.shape(x)[1];
    let expected = tape.shape(bound.projection[0].weight)[0];
    if in_dim != expected {
        return Err(Error::config(format!(
            "projection expects {expected}-dim features, got {in_dim}"
        )));
    }
    let mut h = x;
    let last = bound.projection.len() - 1;
    for (i, layer) in bound.projection.iter().enumerate() {
        h = linear(tape, h, layer)?;
        if i < last {
            h = tape.gelu(h);
        }
    }
    if let Some(pos) = bound.positional {
        let t = tape.shape(h)[0];
        if t > cfg.max_positions {
            return Err(Error::config(format!(
                "video length {t} exceeds positional table capacity {}",
                cfg.max_positions
            )));
        }
        let rows: Vec<usize> = (0..t).collect();
        let table = tape.select_rows(pos, &rows)?;
        h = tape.add(h, table)?;
    }
    Ok(h)
}

/// Full (non-windowed) multi-head self-attention over one level's frames.
/// Returns the attended output and the per-head attention matrices.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    query: &BoundLinear,
    key: &BoundLinear,
    value: &BoundLinear,
    output: &BoundLinear,
    num_heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d = tape.shape(x)[1];
    let head_dim = d / num_heads;
    let q = linear(tape, x, query)?;
    let k = linear(tape, x, key)?;
    let v = linear(tape, x, value)?;
    let scale = S::one() / S::cast_usize(head_dim).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut probs_per_head = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let probs = tape.softmax(scaled, 1)?;
        let ctx = tape.matmul(probs, vh)?;
        heads.push(ctx);
        probs_per_head.push(probs);
    }
    let concat = tape.concat_cols(&heads)?;
    let out = linear(tape, concat, output)?;
    Ok((out, probs_per_head))
}

/// Pre-norm encoder block: `z + Mixer(LN(z))` then `+ MLP(LN(.))`.
pub fn encoder_layer<S: Scalar>(
    tape: &mut Tape<S>,
    z: NodeId,
    layer: &BoundEncoderLayer,
    cfg: &PyramidConfig,
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<NodeId> {
    let eps = S::cast(LAYER_NORM_EPS);
    let normed = tape.layer_norm(z, layer.norm1.gamma, layer.norm1.beta, eps)?;
    let mixed = match &layer.mixer {
        BoundMixer::Attention { query, key, value, output } => {
            multi_head_attention(tape, normed, query, key, value, output, cfg.num_heads)?.0
        }
        BoundMixer::Conv { depthwise, pointwise } => {
            let dw = tape.depthwise_conv1d(normed, *depthwise, 1, 1)?;
            let pw = linear(tape, dw, pointwise)?;
            tape.gelu(pw)
        }
    };
    let mixed = maybe_dropout(tape, mixed, cfg, rng.as_deref_mut());
    let z1 = tape.add(z, mixed)?;
    let normed2 = tape.layer_norm(z1, layer.norm2.gamma, layer.norm2.beta, eps)?;
    let hidden = linear(tape, normed2, &layer.mlp_in)?;
    let hidden = tape.gelu(hidden);
    let ff = linear(tape, hidden, &layer.mlp_out)?;
    let ff = maybe_dropout(tape, ff, cfg, rng);
    tape.add(z1, ff)
}

fn maybe_dropout<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    cfg: &PyramidConfig,
    rng: Option<&mut ChaCha12Rng>,
) -> NodeId {
    match rng {
        Some(r) if cfg.dropout_rate > 0.0 => tape.dropout(x, S::cast(cfg.dropout_rate), r),
        _ => x,
    }
}

/// Strided depthwise conv halving the temporal length (ceil).
pub fn downsample<S: Scalar>(tape: &mut Tape<S>, z: NodeId, kernels: NodeId) -> Result<NodeId> {
    tape.depthwise_conv1d(z, kernels, 2, 1)
}

/// Project the input and iterate `encoder_layer` + `downsample` for every
/// level. Lengths follow iterated ceil-halving and clamp at 1.
pub fn build_pyramid<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    bound: &BoundEncoder,
    cfg: &PyramidConfig,
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<PyramidNodes> {
    let t = tape.shape(x)[0];
    if t < (1usize << cfg.num_levels) {
        log::warn!(
            "video of {t} frames is shorter than 2^{} = {}; deep pyramid levels clamp at one frame",
            cfg.num_levels,
            1usize << cfg.num_levels
        );
    }
    let z0 = project(tape, x, bound, cfg)?;
    let mut levels = Vec::with_capacity(cfg.num_levels);
    let mut cur = z0;
    for (layer, &kernels) in bound.layers.iter().zip(&bound.downsamplers) {
        let encoded = encoder_layer(tape, cur, layer, cfg, rng.as_deref_mut())?;
        cur = downsample(tape, encoded, kernels)?;
        levels.push(cur);
    }
    Ok(PyramidNodes { z0, levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn zero_mixer_and_mlp(params: &mut EncoderParams<f64>) {
        for layer in &mut params.layers {
            match &mut layer.mixer {
                MixerParams::Attention { query, key, value, output } => {
                    for lin in [query, key, value, output] {
                        lin.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
                        lin.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                MixerParams::Conv { depthwise, pointwise } => {
                    depthwise.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    pointwise.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    pointwise.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
            layer.mlp_in.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            layer.mlp_in.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
            layer.mlp_out.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            layer.mlp_out.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn identity_projection(params: &mut EncoderParams<f64>, dim: usize) {
        for lin in &mut params.projection {
            let mut eye = Tensor::eye(dim, dim);
            eye.set_requires_grad(true);
            lin.weight = eye;
            lin.bias = Tensor::zeros(vec![dim]).with_requires_grad();
        }
    }

    #[test]
    fn identity_projection_passes_input_through() {
        let cfg = PyramidConfig {
            num_levels: 1,
            model_dim: 4,
            num_heads: 2,
            projection_depth: 1,
            ..Default::default()
        };
        let mut r = rng(0);
        let mut params = EncoderParams::<f64>::init(&cfg, 4, &mut r).unwrap();
        identity_projection(&mut params, 4);
        let x = Tensor::from_vec(vec![3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xid = tape.leaf(&x);
        let z0 = project(&mut tape, xid, &bound, &cfg).unwrap();
        assert_eq!(tape.value(z0), x.data());
    }

    #[test]
    fn projection_shape_contract() {
        let cfg = PyramidConfig { model_dim: 32, ..Default::default() };
        let mut r = rng(1);
        let params = EncoderParams::<f64>::init(&cfg, 16, &mut r).unwrap();
        let x = Tensor::randn(vec![128, 16], 1.0, &mut r);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xid = tape.leaf(&x);
        let z0 = project(&mut tape, xid, &bound, &cfg).unwrap();
        assert_eq!(tape.shape(z0), &[128, 32]);
    }

    #[test]
    fn projection_dim_mismatch_is_config_error() {
        let cfg = PyramidConfig { model_dim: 8, ..Default::default() };
        let mut r = rng(2);
        let params = EncoderParams::<f64>::init(&cfg, 16, &mut r).unwrap();
        let x = Tensor::<f64>::zeros(vec![4, 7]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xid = tape.leaf(&x);
        assert!(matches!(
            project(&mut tape, xid, &bound, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zeroed_weights_make_encoder_layer_identity() {
        let cfg = PyramidConfig { num_levels: 1, model_dim: 4, num_heads: 2, ..Default::default() };
        let mut r = rng(3);
        let mut params = EncoderParams::<f64>::init(&cfg, 4, &mut r).unwrap();
        zero_mixer_and_mlp(&mut params);
        let x = Tensor::randn(vec![5, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xid = tape.leaf(&x);
        let out = encoder_layer(&mut tape, xid, &bound.layers[0], &cfg, None).unwrap();
        assert_eq!(tape.value(out), x.data());
    }

    #[test]
    fn single_frame_attention_weight_is_one() {
        let cfg = PyramidConfig { num_levels: 1, model_dim: 4, num_heads: 2, ..Default::default() };
        let mut r = rng(4);
        let params = EncoderParams::<f64>::init(&cfg, 4, &mut r).unwrap();
        let x = Tensor::randn(vec![1, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xid = tape.leaf(&x);
        let BoundMixer::Attention { query, key, value, output } = &bound.layers[0].mixer else {
            panic!("default mixer is attention")
        };
        let (_, probs) =
            multi_head_attention(&mut tape, xid, query, key, value, output, 2).unwrap();
        for p in probs {
            assert_eq!(tape.shape(p), &[1, 1]);
            assert_eq!(tape.value(p), &[1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_random_draws() {
        let cfg = PyramidConfig { num_levels: 1, model_dim: 8, num_heads: 4, ..Default::default() };
        for seed in 0..100u64 {
            let mut r = rng(seed);
            let params = EncoderParams::<f64>::init(&cfg, 8, &mut r).unwrap();
            let x = Tensor::randn(vec![6, 8], 1.0, &mut r);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xid = tape.leaf(&x);
            let BoundMixer::Attention { query, key, value, output } = &bound.layers[0].mixer
            else {
                unreachable!()
            };
            let (_, probs) =
                multi_head_attention(&mut tape, xid, query, key, value, output, 4).unwrap();
            for p in probs {
                for row in tape.value(p).chunks(6) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "seed {seed}: row sum {sum}");
                }
            }
        }
    }

    #[test]
    fn pyramid_lengths_are_iterated_ceil_halving() {
        let cfg = PyramidConfig { model_dim: 8, num_heads: 2, ..Default::default() };
        assert_eq!(cfg.level_lengths(128), vec![64, 32, 16, 8, 4, 2]);
        assert_eq!(cfg.level_lengths(7), vec![4, 2, 1, 1, 1, 1]);

        let mut r = rng(5);
        let params = EncoderParams::<f64>::init(&cfg, 4, &mut r).unwrap();
        let x = Tensor::randn(vec![37, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xid = tape.leaf(&x);
        let pyr = build_pyramid(&mut tape, xid, &bound, &cfg, None).unwrap();
        let got: Vec<usize> = pyr.levels.iter().map(|&l| tape.shape(l)[0]).collect();
        assert_eq!(got, cfg.level_lengths(37));
    }

    #[test]
    fn zeroed_pyramid_is_strided_subsampling_of_z0() {
        let cfg = PyramidConfig {
            num_levels: 2,
            model_dim: 4,
            num_heads: 2,
            projection_depth: 1,
            ..Default::default()
        };
        let mut r = rng(6);
        let mut params = EncoderParams::<f64>::init(&cfg, 4, &mut r).unwrap();
        zero_mixer_and_mlp(&mut params);
        identity_projection(&mut params, 4);
        for k in &mut params.downsamplers {
            *k = super::delta_kernels(4);
        }
        let x = Tensor::from_vec(vec![8, 4], (0..32).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xid = tape.leaf(&x);
        let pyr = build_pyramid(&mut tape, xid, &bound, &cfg, None).unwrap();
        // level 1 = rows 0,2,4,6 of z0; level 2 = rows 0,4
        let z0 = tape.value(pyr.z0).to_vec();
        let lvl1 = tape.value(pyr.levels[0]);
        for (i, &src) in [0usize, 2, 4, 6].iter().enumerate() {
            assert_eq!(&lvl1[i * 4..(i + 1) * 4], &z0[src * 4..(src + 1) * 4]);
        }
        let lvl2 = tape.value(pyr.levels[1]);
        for (i, &src) in [0usize, 4].iter().enumerate() {
            assert_eq!(&lvl2[i * 4..(i + 1) * 4], &z0[src * 4..(src + 1) * 4]);
        }
    }

    #[test]
    fn frame_permutation_only_permutes_z0() {
        let cfg = PyramidConfig { model_dim: 8, num_heads: 2, ..Default::default() };
        let mut r = rng(7);
        let params = EncoderParams::<f64>::init(&cfg, 4, &mut r).unwrap();
        let x = Tensor::randn(vec![6, 4], 1.0, &mut r);
        let mut permuted = x.clone();
        for c in 0..4 {
            let tmp = permuted.at(1, c);
            let v3 = permuted.at(3, c);
            permuted.data_mut()[1 * 4 + c] = v3;
            permuted.data_mut()[3 * 4 + c] = tmp;
        }
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xid = tape.leaf(input);
            let z0 = project(&mut tape, xid, &bound, &cfg).unwrap();
            tape.value(z0).to_vec()
        };
        let a = run(&x);
        let b = run(&permuted);
        // rows 1 and 3 swap, everything else identical
        for row in 0..6 {
            let src = match row {
                1 => 3,
                3 => 1,
                r => r,
            };
            assert_eq!(&a[src * 8..(src + 1) * 8], &b[row * 8..(row + 1) * 8]);
        }
    }

    #[test]
    fn fixed_seed_pyramid_is_bitwise_deterministic() {
        let cfg = PyramidConfig { model_dim: 8, num_heads: 2, dropout_rate: 0.1, ..Default::default() };
        let build = || {
            let mut r = rng(11);
            let params = EncoderParams::<f64>::init(&cfg, 4, &mut r).unwrap();
            let x = Tensor::randn(vec![16, 4], 1.0, &mut r);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xid = tape.leaf(&x);
            let mut drop_rng = rng(99);
            let pyr = build_pyramid(&mut tape, xid, &bound, &cfg, Some(&mut drop_rng)).unwrap();
            pyr.levels
                .iter()
                .flat_map(|&l| tape.value(l).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        assert_eq!(build(), build());
    }
}

//! Full detector: encoder pyramid plus shared decoder heads, with a stable
//! named-parameter traversal used by the optimizer and checkpointing.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::encoder::{
    build_pyramid, BoundEncoder, BoundMixer, EncoderParams, FeatureSequence, MixerParams,
    Pyramid, PyramidConfig, PyramidNodes,
};
use crate::error::{Error, Result};
use crate::heads::{
    extract_predictions, head_forward, BoundHeads, HeadParams, LevelOutputs, PerFramePrediction,
};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: PyramidConfig,
    pub input_dim: usize,
    pub encoder: EncoderParams<S>,
    pub heads: HeadParams<S>,
}

/// Tape-side handles for every parameter, in the same traversal order as
/// [`Model::visit_params`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub heads: BoundHeads,
}

/// Everything one forward pass produces for a video, still on the tape.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub pyramid: PyramidNodes,
    /// `(level, head outputs)` for levels `1..=L`.
    pub levels: Vec<(usize, LevelOutputs)>,
}

/// Detached forward results for the inference path.
#[derive(Debug, Clone)]
pub struct Inference<S: Scalar> {
    pub pyramid: Pyramid<S>,
    pub predictions: Vec<Vec<PerFramePrediction<S>>>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: PyramidConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&config, input_dim, &mut rng)?;
        let heads = HeadParams::init(config.model_dim, &mut rng);
        Ok(Model { config, input_dim, encoder, heads })
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundModel {
        BoundModel { encoder: self.encoder.bind(tape), heads: self.heads.bind(tape) }
    }

    /// Forward one video on an existing tape/binding (training path).
    pub fn forward_on(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundModel,
        video: &FeatureSequence<S>,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<ForwardOutputs> {
        let x = tape.leaf(&video.features);
        let pyramid = build_pyramid(tape, x, &bound.encoder, &self.config, rng)?;
        let mut levels = Vec::with_capacity(pyramid.levels.len());
        for (i, &z) in pyramid.levels.iter().enumerate() {
            let outputs = head_forward(tape, z, &bound.heads)?;
            levels.push((i + 1, outputs));
        }
        Ok(ForwardOutputs { pyramid, levels })
    }

    /// Forward one video with frozen parameters, returning detached values.
    pub fn infer(&self, video: &FeatureSequence<S>) -> Result<Inference<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward_on(&mut tape, &bound, video, None)?;
        let pyramid = Pyramid {
            z0: tape.to_tensor(out.pyramid.z0),
            levels: out.pyramid.levels.iter().map(|&l| tape.to_tensor(l)).collect(),
        };
        let predictions = out
            .levels
            .iter()
            .map(|&(level, ref outputs)| extract_predictions(&tape, outputs, level))
            .collect();
        Ok(Inference { pyramid, predictions })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    /// Visit `(name, tensor)` for every parameter in a fixed order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<S>)) {
        for (i, lin) in self.encoder.projection.iter().enumerate() {
            f(&format!("encoder.projection.{i}.weight"), &lin.weight);
            f(&format!("encoder.projection.{i}.bias"), &lin.bias);
        }
        if let Some(pos) = &self.encoder.positional {
            f("encoder.positional", pos);
        }
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            let p = format!("encoder.layers.{i}");
            f(&format!("{p}.norm1.gamma"), &layer.norm1.gamma);
            f(&format!("{p}.norm1.beta"), &layer.norm1.beta);
            match &layer.mixer {
                MixerParams::Attention { query, key, value, output } => {
                    f(&format!("{p}.attn.query.weight"), &query.weight);
                    f(&format!("{p}.attn.query.bias"), &query.bias);
                    f(&format!("{p}.attn.key.weight"), &key.weight);
                    f(&format!("{p}.attn.key.bias"), &key.bias);
                    f(&format!("{p}.attn.value.weight"), &value.weight);
                    f(&format!("{p}.attn.value.bias"), &value.bias);
                    f(&format!("{p}.attn.output.weight"), &output.weight);
                    f(&format!("{p}.attn.output.bias"), &output.bias);
                }
                MixerParams::Conv { depthwise, pointwise } => {
                    f(&format!("{p}.conv.depthwise"), depthwise);
                    f(&format!("{p}.conv.pointwise.weight"), &pointwise.weight);
                    f(&format!("{p}.conv.pointwise.bias"), &pointwise.bias);
                }
            }
            f(&format!("{p}.norm2.gamma"), &layer.norm2.gamma);
            f(&format!("{p}.norm2.beta"), &layer.norm2.beta);
            f(&format!("{p}.mlp_in.weight"), &layer.mlp_in.weight);
            f(&format!("{p}.mlp_in.bias"), &layer.mlp_in.bias);
            f(&format!("{p}.mlp_out.weight"), &layer.mlp_out.weight);
            f(&format!("{p}.mlp_out.bias"), &layer.mlp_out.bias);
        }
        for (i, k) in self.encoder.downsamplers.iter().enumerate() {
            f(&format!("encoder.down.{i}.kernels"), k);
        }
        f("heads.depthwise1", &self.heads.depthwise1);
        f("heads.pointwise1.weight", &self.heads.pointwise1.weight);
        f("heads.pointwise1.bias", &self.heads.pointwise1.bias);
        f("heads.depthwise2", &self.heads.depthwise2);
        f("heads.pointwise2.weight", &self.heads.pointwise2.weight);
        f("heads.pointwise2.bias", &self.heads.pointwise2.bias);
        f("heads.regression.weight", &self.heads.regression.weight);
        f("heads.regression.bias", &self.heads.regression.bias);
        f("heads.classification.weight", &self.heads.classification.weight);
        f("heads.classification.bias", &self.heads.classification.bias);
    }

    /// Mutable twin of [`Model::visit_params`], same traversal order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>)) {
        for (i, lin) in self.encoder.projection.iter_mut().enumerate() {
            f(&format!("encoder.projection.{i}.weight"), &mut lin.weight);
            f(&format!("encoder.projection.{i}.bias"), &mut lin.bias);
        }
        if let Some(pos) = &mut self.encoder.positional {
            f("encoder.positional", pos);
        }
        for (i, layer) in self.encoder.layers.iter_mut().enumerate() {
            let p = format!("encoder.layers.{i}");
            f(&format!("{p}.norm1.gamma"), &mut layer.norm1.gamma);
            f(&format!("{p}.norm1.beta"), &mut layer.norm1.beta);
            match &mut layer.mixer {
                MixerParams::Attention { query, key, value, output } => {
                    f(&format!("{p}.attn.query.weight"), &mut query.weight);
                    f(&format!("{p}.attn.query.bias"), &mut query.bias);
                    f(&format!("{p}.attn.key.weight"), &mut key.weight);
                    f(&format!("{p}.attn.key.bias"), &mut key.bias);
                    f(&format!("{p}.attn.value.weight"), &mut value.weight);
                    f(&format!("{p}.attn.value.bias"), &mut value.bias);
                    f(&format!("{p}.attn.output.weight"), &mut output.weight);
                    f(&format!("{p}.attn.output.bias"), &mut output.bias);
                }
                MixerParams::Conv { depthwise, pointwise } => {
                    f(&format!("{p}.conv.depthwise"), depthwise);
                    f(&format!("{p}.conv.pointwise.weight"), &mut pointwise.weight);
                    f(&format!("{p}.conv.pointwise.bias"), &mut pointwise.bias);
                }
            }
            f(&format!("{p}.norm2.gamma"), &mut layer.norm2.gamma);
            f(&format!("{p}.norm2.beta"), &mut layer.norm2.beta);
            f(&format!("{p}.mlp_in.weight"), &mut layer.mlp_in.weight);
            f(&format!("{p}.mlp_in.bias"), &mut layer.mlp_in.bias);
            f(&format!("{p}.mlp_out.weight"), &mut layer.mlp_out.weight);
            f(&format!("{p}.mlp_out.bias"), &mut layer.mlp_out.bias);
        }
        for (i, k) in self.encoder.downsamplers.iter_mut().enumerate() {
            f(&format!("encoder.down.{i}.kernels"), k);
        }
        f("heads.depthwise1", &mut self.heads.depthwise1);
        f("heads.pointwise1.weight", &mut self.heads.pointwise1.weight);
        f("heads.pointwise1.bias", &mut self.heads.pointwise1.bias);
        f("heads.depthwise2", &mut self.heads.depthwise2);
        f("heads.pointwise2.weight", &mut self.heads.pointwise2.weight);
        f("heads.pointwise2.bias", &mut self.heads.pointwise2.bias);
        f("heads.regression.weight", &mut self.heads.regression.weight);
        f("heads.regression.bias", &mut self.heads.regression.bias);
        f("heads.classification.weight", &mut self.heads.classification.weight);
        f("heads.classification.bias", &mut self.heads.classification.bias);
    }

    /// Snapshot of all parameters keyed by name.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor<S>> {
        let mut map = BTreeMap::new();
        self.visit_params(|name, t| {
            map.insert(name.to_string(), t.clone());
        });
        map
    }

    /// Replace parameter values from a snapshot; every parameter must be
    /// present with a matching shape, and no extras are allowed.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        let mut expected = 0usize;
        let mut problem: Option<Error> = None;
        self.visit_params_mut(|name, t| {
            expected += 1;
            if problem.is_some() {
                return;
            }
            match state.get(name) {
                None => problem = Some(Error::validation(format!("checkpoint missing {name}"))),
                Some(src) if src.shape() != t.shape() => {
                    problem = Some(Error::ShapeMismatch {
                        context: "checkpoint parameter shape",
                        left: src.shape().to_vec(),
                        right: t.shape().to_vec(),
                    })
                }
                Some(src) => {
                    t.data_mut().copy_from_slice(src.data());
                }
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        if state.len() != expected {
            return Err(Error::validation(format!(
                "checkpoint has {} parameters, model expects {expected}",
                state.len()
            )));
        }
        Ok(())
    }
}

impl BoundModel {
    /// Leaf node handles in [`Model::visit_params`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for lin in &self.encoder.projection {
            ids.push(lin.weight);
            ids.push(lin.bias);
        }
        if let Some(pos) = self.encoder.positional {
            ids.push(pos);
        }
        for layer in &self.encoder.layers {
            ids.push(layer.norm1.gamma);
            ids.push(layer.norm1.beta);
            match &layer.mixer {
                BoundMixer::Attention { query, key, value, output } => {
                    for lin in [query, key, value, output] {
                        ids.push(lin.weight);
                        ids.push(lin.bias);
                    }
                }
                BoundMixer::Conv { depthwise, pointwise } => {
                    ids.push(*depthwise);
                    ids.push(pointwise.weight);
                    ids.push(pointwise.bias);
                }
            }
            ids.push(layer.norm2.gamma);
            ids.push(layer.norm2.beta);
            ids.push(layer.mlp_in.weight);
            ids.push(layer.mlp_in.bias);
            ids.push(layer.mlp_out.weight);
            ids.push(layer.mlp_out.bias);
        }
        ids.extend(&self.encoder.downsamplers);
        ids.push(self.heads.depthwise1);
        ids.push(self.heads.pointwise1.weight);
        ids.push(self.heads.pointwise1.bias);
        ids.push(self.heads.depthwise2);
        ids.push(self.heads.pointwise2.weight);
        ids.push(self.heads.pointwise2.bias);
        ids.push(self.heads.regression.weight);
        ids.push(self.heads.regression.bias);
        ids.push(self.heads.classification.weight);
        ids.push(self.heads.classification.bias);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> Model<f64> {
        let cfg = PyramidConfig {
            num_levels: 2,
            model_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            ..Default::default()
        };
        Model::new(cfg, 4, 7).unwrap()
    }

    #[test]
    fn bound_ids_align_with_param_traversal() {
        let model = small_model();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let ids = bound.ids();
        let mut names = Vec::new();
        model.visit_params(|name, _| names.push(name.to_string()));
        assert_eq!(ids.len(), names.len());
        // every bound id's value must equal the tensor it claims to mirror
        let mut i = 0;
        model.visit_params(|_, t| {
            assert_eq!(tape.value(ids[i]), t.data());
            i += 1;
        });
    }

    #[test]
    fn state_dict_round_trip() {
        let model = small_model();
        let state = model.state_dict();
        let mut other = Model::new(model.config.clone(), 4, 999).unwrap();
        let before: Vec<f64> = {
            let mut v = Vec::new();
            other.visit_params(|_, t| v.extend_from_slice(t.data()));
            v
        };
        other.load_state(&state).unwrap();
        let after: Vec<f64> = {
            let mut v = Vec::new();
            other.visit_params(|_, t| v.extend_from_slice(t.data()));
            v
        };
        let original: Vec<f64> = {
            let mut v = Vec::new();
            model.visit_params(|_, t| v.extend_from_slice(t.data()));
            v
        };
        assert_ne!(before, original);
        assert_eq!(after, original);
    }

    #[test]
    fn load_state_rejects_missing_and_extra() {
        let model = small_model();
        let mut state = model.state_dict();
        state.remove("heads.regression.bias");
        let mut m2 = small_model();
        assert!(m2.load_state(&state).is_err());

        let mut state = model.state_dict();
        state.insert("bogus".into(), Tensor::zeros(vec![1]));
        assert!(m2.load_state(&state).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        let a = small_model();
        let b = small_model();
        let mut va = Vec::new();
        a.visit_params(|_, t| va.extend(t.data().iter().map(|v| v.to_bits())));
        let mut vb = Vec::new();
        b.visit_params(|_, t| vb.extend(t.data().iter().map(|v| v.to_bits())));
        assert_eq!(va, vb);
    }

    #[test]
    fn infer_produces_predictions_per_level() {
        let model = small_model();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let video = FeatureSequence::new(
            "v0",
            Tensor::randn(vec![16, 4], 1.0, &mut rng),
            1.0,
        )
        .unwrap();
        let inf = model.infer(&video).unwrap();
        assert_eq!(inf.pyramid.levels.len(), 2);
        assert_eq!(inf.predictions.len(), 2);
        assert_eq!(inf.predictions[0].len(), 8);
        assert_eq!(inf.predictions[1].len(), 4);
    }
}

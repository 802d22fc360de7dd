//! The attention-based caption generator: per-modality encoders and temporal
//! attention, fusion of the modality content vectors, and an LSTM decoder.
//!
//! Decoding follows the recurrence
//!
//! ```text
//! s_0        = LSTM(s_init, Embed(<sos>))
//! c_{k,i}    = temporal attention of modality k given s_{i-1}
//! g_i        = fusion(s_{i-1}, c_{1,i} .. c_{K,i})
//! P(y|...)   = softmax(W_g g_i + b_g)
//! s_i        = LSTM(s_{i-1}, Embed(y_i))
//! ```
//!
//! where `s_init` is zero or derived from the final encoder states (see
//! [`InitState`]).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_keys, attention_weights, content_vector, scores_from_keys, TemporalAttentionParams};
use crate::decoder::{decoder_step, embed, output_logits, DecoderState};
use crate::encoder::{encode_modality, EncoderOutput, EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::fusion::{fused_preactivation, validate_modality_count, FusionMode, FusionParams};
use crate::graph::{Graph, Var};
use crate::lstm::{LstmParams, LstmWeights};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, SOS_ID};

/// One modality's time-ordered feature matrix `[T, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    pub modality: String,
    pub frames: Tensor<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(modality: impl Into<String>, frames: Tensor<T>) -> Result<Self> {
        if !frames.is_matrix() {
            return Err(Error::Dimension {
                op: "FeatureSequence",
                lhs: frames.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(Self {
            modality: modality.into(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn cast<U: Scalar>(&self) -> FeatureSequence<U> {
        FeatureSequence {
            modality: self.modality.clone(),
            frames: self.frames.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub input_dim: usize,
    pub encoder: EncoderSpec,
}

/// How the decoder state before `<sos>` is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitState {
    #[default]
    Zero,
    /// Mean over modalities of `tanh(W_init_k h^k_L + b_init_k)`; memory cell
    /// starts at zero.
    EncoderFinal,
}

fn default_embed_dim() -> usize {
    256
}

fn default_decoder_cells() -> usize {
    512
}

fn default_init_scale() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: Vec<ModalityConfig>,
    pub vocabulary: Vocabulary,
    pub fusion: FusionMode,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_decoder_cells")]
    pub decoder_cells: usize,
    /// Temporal attention inner size; defaults to `decoder_cells`.
    #[serde(default)]
    pub attention_dim: Option<usize>,
    /// Modality attention inner size; defaults to `decoder_cells`.
    #[serde(default)]
    pub modality_attention_dim: Option<usize>,
    /// Width of `g_i`; defaults to `decoder_cells`.
    #[serde(default)]
    pub pre_output_dim: Option<usize>,
    #[serde(default)]
    pub init_state: InitState,
    /// Feed the fused context into the decoder LSTM next to the word
    /// embedding. Off by default.
    #[serde(default)]
    pub feed_content: bool,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn attention_dim(&self) -> usize {
        self.attention_dim.unwrap_or(self.decoder_cells)
    }

    pub fn modality_attention_dim(&self) -> usize {
        self.modality_attention_dim.unwrap_or(self.decoder_cells)
    }

    pub fn pre_output_dim(&self) -> usize {
        self.pre_output_dim.unwrap_or(self.decoder_cells)
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.embed_dim + if self.feed_content { self.pre_output_dim() } else { 0 }
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        validate_modality_count(self.fusion, self.modalities.len())?;
        for (i, m) in self.modalities.iter().enumerate() {
            if m.input_dim == 0 {
                return Err(Error::Config(format!("modality {:?} has input_dim 0", m.name)));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate modality {:?}", m.name)));
            }
            m.encoder.validate()?;
        }
        for (what, v) in [
            ("embed_dim", self.embed_dim),
            ("decoder_cells", self.decoder_cells),
            ("attention_dim", self.attention_dim()),
            ("modality_attention_dim", self.modality_attention_dim()),
            ("pre_output_dim", self.pre_output_dim()),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be positive")));
            }
        }
        if self.vocabulary.len() <= 4 {
            return Err(Error::Config("vocabulary has no words besides the reserved tokens".into()));
        }
        Ok(())
    }
}

/// Where each learnable tensor lives in the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub embedding: ParamId,
    pub encoders: Vec<EncoderParams>,
    pub attention: Vec<TemporalAttentionParams>,
    pub decoder: LstmParams,
    pub fusion: FusionParams,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub init: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: ParamLayout,
}

/// Per-graph state shared by every decoding step of one input: encoder
/// outputs, attention keys, and the bound decoder weights.
#[derive(Clone, Debug)]
pub struct Session {
    pub encoded: Vec<EncoderOutput>,
    keys: Vec<Var>,
    decoder: LstmWeights,
}

/// Everything computed for one output position.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub logits: Var,
    /// Temporal weights per modality, config order.
    pub alphas: Vec<Var>,
    pub beta: Option<Var>,
    pub fused: Var,
    pub pre_output: Var,
}

impl<T: Scalar> Model<T> {
    /// Registers every parameter with uniform `[-init_scale, init_scale]`
    /// weights and zero biases, drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = config.init_scale;
        let mut store = ParamStore::new();
        let cells = config.decoder_cells;

        let embedding = store.add_uniform("embed.E", &[config.vocabulary.len(), config.embed_dim], scale, &mut rng)?;
        let mut encoders = Vec::new();
        let mut content_dims = Vec::new();
        for m in &config.modalities {
            encoders.push(EncoderParams::register(
                &mut store,
                &format!("encoder.{}", m.name),
                &m.encoder,
                m.input_dim,
                scale,
                &mut rng,
            )?);
            content_dims.push(m.encoder.output_dim(m.input_dim));
        }
        let mut attention = Vec::new();
        for (m, &h) in config.modalities.iter().zip(&content_dims) {
            attention.push(TemporalAttentionParams::register(
                &mut store,
                &format!("attn.{}", m.name),
                cells,
                h,
                config.attention_dim(),
                scale,
                &mut rng,
            )?);
        }
        let decoder = LstmParams::register(&mut store, "decoder", config.decoder_input_dim(), cells, scale, &mut rng)?;
        let fusion = FusionParams::register(
            &mut store,
            config.fusion,
            &content_dims,
            cells,
            config.pre_output_dim(),
            config.modality_attention_dim(),
            scale,
            &mut rng,
        )?;
        let w_g = store.add_uniform("output.W_g", &[config.vocabulary.len(), config.pre_output_dim()], scale, &mut rng)?;
        let b_g = store.add_uniform("output.b_g", &[config.vocabulary.len()], 0.0, &mut rng)?;
        let mut init = Vec::new();
        if config.init_state == InitState::EncoderFinal {
            for (k, &h) in content_dims.iter().enumerate() {
                init.push((
                    store.add_uniform(format!("init.W_{}", k + 1), &[cells, h], scale, &mut rng)?,
                    store.add_uniform(format!("init.b_{}", k + 1), &[cells], 0.0, &mut rng)?,
                ));
            }
        }
        Ok(Self {
            config,
            params: store,
            layout: ParamLayout {
                embedding,
                encoders,
                attention,
                decoder,
                fusion,
                w_g,
                b_g,
                init,
            },
        })
    }

    /// Builds the layout for `config` and takes parameter values from
    /// `params`, which must hold exactly the expected names and shapes.
    pub fn from_params(config: ModelConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.config.vocabulary
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Orders `features` to match the configured modalities.
    pub fn arrange<'f>(&self, features: &'f [FeatureSequence<T>]) -> Result<Vec<&'f Tensor<T>>> {
        self.config
            .modalities
            .iter()
            .map(|m| {
                let f = features
                    .iter()
                    .find(|f| f.modality == m.name)
                    .ok_or_else(|| Error::Config(format!("missing modality {:?}", m.name)))?;
                if f.dim() != m.input_dim {
                    return Err(Error::Dimension {
                        op: "arrange",
                        lhs: f.frames.shape().to_vec(),
                        rhs: vec![f.len(), m.input_dim],
                    });
                }
                Ok(&f.frames)
            })
            .collect()
    }

    /// Runs the encoders and precomputes attention keys.
    pub fn encode(&self, g: &mut Graph<'_, T>, features: &[FeatureSequence<T>]) -> Result<Session> {
        let frames = self.arrange(features)?;
        let mut encoded = Vec::with_capacity(frames.len());
        let mut keys = Vec::with_capacity(frames.len());
        for (k, f) in frames.into_iter().enumerate() {
            let x = g.input(f.clone());
            let enc = encode_modality(g, x, &self.layout.encoders[k], k)?;
            keys.push(attention_keys(g, &enc, &self.layout.attention[k])?);
            encoded.push(enc);
        }
        let decoder = LstmWeights::bind(g, &self.layout.decoder)?;
        Ok(Session {
            encoded,
            keys,
            decoder,
        })
    }

    /// `s_0`: the configured initial state after consuming `<sos>`.
    pub fn initial_state(&self, g: &mut Graph<'_, T>, sess: &Session) -> Result<DecoderState> {
        let cells = self.config.decoder_cells;
        let zero = g.input(Tensor::zeros(&[cells]));
        let hidden = match self.config.init_state {
            InitState::Zero => zero,
            InitState::EncoderFinal => {
                let mut parts = Vec::with_capacity(sess.encoded.len());
                for (enc, &(w, b)) in sess.encoded.iter().zip(&self.layout.init) {
                    let last = g.row(enc.states, enc.len - 1)?;
                    let (w, b) = (g.param(w), g.param(b));
                    let a = g.affine(last, w, b)?;
                    parts.push(g.tanh(a));
                }
                let total = g.add_all(&parts)?;
                g.scale(total, T::one() / T::lit(parts.len() as f64))
            }
        };
        let init = DecoderState {
            hidden,
            cell: zero,
            index: 0,
        };
        let input = self.decoder_input(g, SOS_ID, None)?;
        let s0 = decoder_step(g, &init, input, &sess.decoder)?;
        Ok(DecoderState { index: 0, ..s0 })
    }

    fn decoder_input(&self, g: &mut Graph<'_, T>, token: usize, fused: Option<Var>) -> Result<Var> {
        let y = embed(g, token, self.layout.embedding)?;
        if !self.config.feed_content {
            return Ok(y);
        }
        let ctx = match fused {
            Some(f) => f,
            None => g.input(Tensor::zeros(&[self.config.pre_output_dim()])),
        };
        g.concat(&[y, ctx])
    }

    /// Attention, fusion and output scores for the next word given `s_{i-1}`.
    pub fn predict(&self, g: &mut Graph<'_, T>, sess: &Session, state: &DecoderState) -> Result<StepOutput> {
        let mut alphas = Vec::with_capacity(sess.encoded.len());
        let mut contents = Vec::with_capacity(sess.encoded.len());
        for (k, enc) in sess.encoded.iter().enumerate() {
            let e = scores_from_keys(g, state.hidden, sess.keys[k], &self.layout.attention[k])?;
            let alpha = attention_weights(g, e)?;
            contents.push(content_vector(g, alpha, enc)?);
            alphas.push(alpha);
        }
        let fusion = fused_preactivation(g, state.hidden, &contents, &self.layout.fusion)?;
        let logits = output_logits(g, fusion.pre_output, self.layout.w_g, self.layout.b_g)?;
        Ok(StepOutput {
            logits,
            alphas,
            beta: fusion.beta,
            fused: fusion.fused,
            pre_output: fusion.pre_output,
        })
    }

    /// `s_i = LSTM(s_{i-1}, Embed(y_i))`.
    pub fn advance(
        &self,
        g: &mut Graph<'_, T>,
        sess: &Session,
        state: &DecoderState,
        token: usize,
        step: &StepOutput,
    ) -> Result<DecoderState> {
        let input = self.decoder_input(g, token, Some(step.fused))?;
        decoder_step(g, state, input, &sess.decoder)
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn parameters_are_named_by_role() {
        let m = Model::<f64>::new(tiny_config(FusionMode::Attention, 3), 1).unwrap();
        for name in [
            "embed.E",
            "encoder.image.W_p",
            "encoder.audio.fwd.W_xi",
            "encoder.audio.bwd.b_c",
            "attn.image.w_A",
            "attn.audio.V_A",
            "decoder.W_xi",
            "decoder.W_hc",
            "fusion.W_s",
            "fusion.W_c1",
            "fusion.b_c2",
            "mattn.W_B",
            "mattn.V_B2",
            "mattn.w_B",
            "output.W_g",
            "output.b_g",
        ] {
            assert!(m.params().id(name).is_some(), "missing {name}");
        }
        let simple = Model::<f64>::new(tiny_config(FusionMode::Simple, 3), 1).unwrap();
        assert!(simple.params().id("fusion.b_c1").is_none());
        assert!(simple.params().id("mattn.W_B").is_none());
    }

    #[test]
    fn missing_modality_is_config_error() {
        let cfg = tiny_config(FusionMode::Attention, 3);
        let m = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let mut feats = random_features(&cfg, 2, &[4, 3]);
        feats.pop();
        let mut g = Graph::new(m.params());
        assert!(matches!(m.encode(&mut g, &feats), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_config(FusionMode::Simple, 3);
        let a = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let b = Model::<f64>::new(cfg, 9).unwrap();
        for ((_, _, x), (_, _, y)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn encoder_final_init_differs_from_zero() {
        let mut cfg = tiny_config(FusionMode::Attention, 3);
        cfg.init_state = InitState::EncoderFinal;
        let mut m = Model::<f64>::new(cfg.clone(), 3).unwrap();
        randomize(&mut m, 4, 0.8);
        assert!(m.params().id("init.W_2").is_some());
        let feats = random_features(&cfg, 5, &[3, 4]);
        let mut g = Graph::new(m.params());
        let sess = m.encode(&mut g, &feats).unwrap();
        let s0 = m.initial_state(&mut g, &sess).unwrap();
        assert!(g.value(s0.hidden).data().iter().all(|v| v.is_finite()));
    }
}

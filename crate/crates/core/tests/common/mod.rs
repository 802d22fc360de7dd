#![allow(dead_code)]

use modattn_core::encoder::{EncoderMode, EncoderSpec};
use modattn_core::model::{FeatureSequence, InitState, ModalityConfig, Model, ModelConfig};
use modattn_core::{FusionMode, Tensor, Vocabulary};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(fusion: FusionMode, words: usize, dim: usize) -> ModelConfig {
    let mut modalities = vec![ModalityConfig {
        name: "image".into(),
        input_dim: 3,
        encoder: EncoderSpec { mode: EncoderMode::Projection, units: dim },
    }];
    if fusion != FusionMode::Unimodal {
        modalities.push(ModalityConfig {
            name: "motion".into(),
            input_dim: 2,
            encoder: EncoderSpec { mode: EncoderMode::Blstm, units: dim.div_ceil(2) },
        });
    }
    ModelConfig {
        modalities,
        vocabulary: Vocabulary::from_words((0..words).map(|i| format!("w{i}"))).unwrap(),
        fusion,
        embed_dim: dim,
        decoder_cells: dim,
        attention_dim: Some(dim),
        modality_attention_dim: Some(dim),
        pre_output_dim: Some(dim),
        init_state: InitState::Zero,
        feed_content: false,
        init_scale: 0.1,
    }
}

/// A model whose every parameter, biases included, is uniform in
/// `[-scale, scale]`.
pub fn random_model(config: &ModelConfig, seed: u64, scale: f64) -> Model<f64> {
    let mut m = Model::<f64>::new(config.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ps = m.params_mut();
    for id in ps.ids().collect::<Vec<_>>() {
        for v in ps.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    m
}

pub fn random_features(config: &ModelConfig, seed: u64, max_len: usize) -> Vec<FeatureSequence<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    config
        .modalities
        .iter()
        .map(|m| {
            let len = rng.random_range(1..=max_len);
            let data = (0..len * m.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureSequence::new(m.name.clone(), Tensor::matrix(len, m.input_dim, data).unwrap()).unwrap()
        })
        .collect()
}

pub fn fixed_features(config: &ModelConfig, seed: u64, len: usize) -> Vec<FeatureSequence<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    config
        .modalities
        .iter()
        .map(|m| {
            let data = (0..len * m.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureSequence::new(m.name.clone(), Tensor::matrix(len, m.input_dim, data).unwrap()).unwrap()
        })
        .collect()
}

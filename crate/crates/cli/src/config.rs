use std::path::{Path, PathBuf};

use modattn_audio::MfccConfig;
use modattn_core::encoder::{EncoderMode, EncoderSpec};
use modattn_core::train::TrainConfig;
use modattn_core::{FusionMode, InitState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const TRAIN_HELP: &str = "\
Configuration is one JSON object; every field is optional.
Defaults: fusion \"attention\" (unimodal, simple, attention); modalities: every
modality in the manifest, each with a projection encoder of 512 units and the
input dimension read from its feature files; embed_dim 256; decoder_cells 512;
attention_dim, modality_attention_dim and pre_output_dim default to
decoder_cells; init_state \"zero\" (or \"encoder-final\"); feed_content false;
init_scale 0.1; min_count 1; train: epochs 10, batch_size 16, seed 0,
clip_norm 5.0, optimizer \"rmsprop\" (lr 1e-3, rho 0.9, epsilon 1e-8) or
\"adadelta\" (rho 0.95, epsilon 1e-6), l2 1e-6.
Use --print-config to see the resolved configuration.";

pub const FEATURES_HELP: &str = "\
Configuration is one JSON object; every field is optional.
Defaults: mfcc: sample_rate 16000, window 800, shift 400, fft_size 1024,
mel_filters 26, coefficients 13, pre_emphasis 0.97, log_floor 1e-10,
low_hz 0, high_hz 8000; stack 20; stats null (fit mean/variance on the clips
listed in fit_on, or on all clips when fit_on is null, and write stats.json);
set stats to an existing stats.json to reuse training statistics.";

pub const SYNTH_HELP: &str = "\
Configuration is one JSON object; every field is optional.
Defaults: seed 1, train 500, val 50, test 100, corrupted_test 100, objects 6,
actions 6, noise 0.1, corruption_prob 0.3, min_len 8, max_len 16.";

pub fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderSpec,
    /// Read from the manifest's feature files when absent.
    #[serde(default)]
    pub input_dim: Option<usize>,
}

pub fn default_encoder() -> EncoderSpec {
    EncoderSpec { mode: EncoderMode::Projection, units: 512 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub fusion: FusionMode,
    pub modalities: Option<Vec<ModalitySpec>>,
    pub embed_dim: usize,
    pub decoder_cells: usize,
    pub attention_dim: Option<usize>,
    pub modality_attention_dim: Option<usize>,
    pub pre_output_dim: Option<usize>,
    pub init_state: InitState,
    pub feed_content: bool,
    pub init_scale: f64,
    pub min_count: usize,
    pub train: TrainConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Attention,
            modalities: None,
            embed_dim: 256,
            decoder_cells: 512,
            attention_dim: None,
            modality_attention_dim: None,
            pre_output_dim: None,
            init_state: InitState::Zero,
            feed_content: false,
            init_scale: 0.1,
            min_count: 1,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub mfcc: MfccConfig,
    pub stack: usize,
    pub stats: Option<PathBuf>,
    /// Clip names (file stems) used to fit normalization.
    pub fit_on: Option<Vec<String>>,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self { mfcc: MfccConfig::default(), stack: 20, stats: None, fit_on: None }
    }
}

//! Training and scoring one fusion mode on the synthetic task.

use std::time::Instant;

use modattn_core::encoder::{EncoderMode, EncoderSpec};
use modattn_core::search::greedy_decode;
use modattn_core::train::{train, EpochLog, Sample, TrainConfig};
use modattn_core::vocab::EOS_ID;
use modattn_core::{FusionMode, InitState, ModalityConfig, Model, ModelConfig, Result, Vocabulary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocabulary, Split};
use crate::synth::{SynthClip, SynthConfig, SynthTask, ACTION_MODALITY, OBJECT_MODALITY};

/// Per-position agreement with the reference: position `i` counts when the
/// hypothesis has the reference word there. The denominator is the reference
/// length, so missing words count as errors and extra words cost nothing.
pub fn token_matches(hyp: &[usize], reference: &[usize]) -> usize {
    hyp.iter().zip(reference).filter(|(a, b)| a == b).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthModelDims {
    pub embed_dim: usize,
    pub decoder_cells: usize,
    pub attention_dim: usize,
    pub pre_output_dim: usize,
    pub encoder: EncoderSpec,
}

impl Default for SynthModelDims {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            decoder_cells: 32,
            attention_dim: 16,
            pre_output_dim: 16,
            encoder: EncoderSpec { mode: EncoderMode::Projection, units: 16 },
        }
    }
}

pub fn synth_model_config(fusion: FusionMode, vocabulary: Vocabulary, input_dim: usize, dims: &SynthModelDims) -> ModelConfig {
    let modalities = [OBJECT_MODALITY, ACTION_MODALITY]
        .iter()
        .map(|m| ModalityConfig { name: m.to_string(), input_dim, encoder: dims.encoder })
        .collect();
    ModelConfig {
        modalities,
        vocabulary,
        fusion,
        embed_dim: dims.embed_dim,
        decoder_cells: dims.decoder_cells,
        attention_dim: Some(dims.attention_dim),
        modality_attention_dim: Some(dims.attention_dim),
        pre_output_dim: Some(dims.pre_output_dim),
        init_state: InitState::Zero,
        feed_content: false,
        init_scale: 0.1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub dims: SynthModelDims,
    pub train: TrainConfig,
    pub max_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            dims: SynthModelDims::default(),
            train: TrainConfig { epochs: 80, batch_size: 10, learning_rate: Some(0.01), ..Default::default() },
            max_len: 8,
        }
    }
}

/// Corpus-level token accuracy and modality weights collected from greedy
/// decodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub matched: usize,
    pub reference_tokens: usize,
    pub exact: usize,
    pub clips: usize,
    /// Mean weight on the action stream at steps that emitted an action word;
    /// `None` without modality attention or such steps.
    pub action_beta_on_action_words: Option<f64>,
    pub action_beta_on_object_words: Option<f64>,
}

impl DecodeStats {
    pub fn accuracy(&self) -> f64 {
        self.matched as f64 / self.reference_tokens.max(1) as f64
    }
}

pub fn decode_stats(model: &Model<f64>, clips: &[SynthClip], max_len: usize) -> Result<DecodeStats> {
    let vocab = model.vocabulary();
    let action_k = model.config().modality_index(ACTION_MODALITY);
    let per_clip = clips
        .par_iter()
        .map(|c| {
            let d = greedy_decode(model, &c.features()?, max_len)?;
            Ok((d, vocab.encode(&c.caption)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = DecodeStats::default();
    let (mut on_act, mut n_act, mut on_obj, mut n_obj) = (0.0, 0usize, 0.0, 0usize);
    for (d, reference) in &per_clip {
        s.clips += 1;
        s.reference_tokens += reference.len();
        s.matched += token_matches(&d.tokens, reference);
        s.exact += usize::from(&d.tokens == reference);
        let Some(k) = action_k else { continue };
        for (i, &tok) in d.tokens.iter().enumerate() {
            let Some(beta) = d.trace.beta.get(i) else { continue };
            if tok == EOS_ID {
                continue;
            }
            let word = vocab.token(tok)?;
            if word.starts_with("act_") {
                on_act += beta[k];
                n_act += 1;
            } else if word.starts_with("obj_") {
                on_obj += beta[k];
                n_obj += 1;
            }
        }
    }
    s.action_beta_on_action_words = (n_act > 0).then(|| on_act / n_act as f64);
    s.action_beta_on_object_words = (n_obj > 0).then(|| on_obj / n_obj as f64);
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub fusion: FusionMode,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: DecodeStats,
    pub corrupted: DecodeStats,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
}

fn samples(clips: &[&SynthClip], vocab: &Vocabulary) -> Result<Vec<Sample<f64>>> {
    clips
        .iter()
        .map(|c| Ok(Sample { id: c.id.clone(), features: c.features()?, tokens: vocab.encode(&c.caption) }))
        .collect()
}

/// Trains `fusion` on `task` with `cfg.train` (seeded by `seed`) and decodes
/// the test and corrupted-test clips with the best-validation model.
pub fn run_experiment(task: &SynthTask, fusion: FusionMode, cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentResult> {
    let start = Instant::now();
    let vocab = build_vocabulary(&task.corpus_without_files()?, 1)?;
    let mcfg = synth_model_config(fusion, vocab.clone(), task.config.feature_dim(), &cfg.dims);
    let model = Model::<f64>::new(mcfg, seed)?;
    let train_set = samples(&task.split(Split::Train), &vocab)?;
    let val_set = samples(&task.split(Split::Val), &vocab)?;
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let mut hook = |_: &EpochLog, _: &Model<f64>, _: bool| Ok(());
    let out = train(model, &train_set, &val_set, &tcfg, &mut hook)?;
    let test_clips: Vec<SynthClip> = task.split(Split::Test).into_iter().cloned().collect();
    let test = decode_stats(&out.best, &test_clips, cfg.max_len)?;
    let corrupted = decode_stats(&out.best, &task.corrupted_test, cfg.max_len)?;
    Ok(ExperimentResult {
        fusion,
        seed,
        best_epoch: out.best_epoch,
        test,
        corrupted,
        log: out.log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

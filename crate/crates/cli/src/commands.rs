use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use modattn_audio::{read_wav, stacked_features, Normalizer};
use modattn_core::format::{write_atomic, Checkpoint, FeatureFile};
use modattn_core::gradcheck::{check_model_gradient, ModelCheckSpec};
use modattn_core::graph::GradFault;
use modattn_core::search::beam_search;
use modattn_core::train::{train as train_model, EpochLog};
use modattn_core::vocab::tokenize;
use modattn_core::{ModalityConfig, Model, ModelConfig};
use modattn_eval::corpus::{build_vocabulary, CaptionCorpus, Split};
use modattn_eval::metrics::MetricReport;
use modattn_eval::synth::{generate_synthetic_task, SynthConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{default_encoder, read_json, FeaturesConfig, ModalitySpec, TrainFile};
use crate::{PartialFailure, UsageError};

fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist or is not a directory", path.display())).into())
    }
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())).into())
    }
}

fn to_json_pretty<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

pub fn features(wav_dir: &Path, out_dir: &Path, config: Option<&Path>, print_config: bool) -> anyhow::Result<()> {
    let cfg: FeaturesConfig = read_json(config)?;
    cfg.mfcc.validate()?;
    if cfg.stack == 0 {
        return Err(UsageError("stack must be at least 1".into()).into());
    }
    if print_config {
        print!("{}", to_json_pretty(&cfg)?);
        return Ok(());
    }
    require_dir(wav_dir, "WAV directory")?;
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(wav_dir)
        .with_context(|| format!("listing {}", wav_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    let stem = |p: &Path| p.file_stem().unwrap_or_default().to_string_lossy().into_owned();

    let results: Vec<(String, Result<Vec<Vec<f64>>, String>)> = wavs
        .par_iter()
        .map(|p| {
            let r = read_wav(p)
                .and_then(|clip| stacked_features(&clip, &cfg.mfcc, cfg.stack))
                .map_err(|e| e.to_string());
            (stem(p), r)
        })
        .collect();

    let norm = match &cfg.stats {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read stats {}: {e}", path.display())))?;
            serde_json::from_str::<Normalizer>(&text)
                .map_err(|e| UsageError(format!("invalid stats {}: {e}", path.display())))?
        }
        None => {
            if let Some(names) = &cfg.fit_on {
                let known: HashSet<&str> = results.iter().map(|(n, _)| n.as_str()).collect();
                let unknown: Vec<&String> = names.iter().filter(|n| !known.contains(n.as_str())).collect();
                if !unknown.is_empty() {
                    return Err(UsageError(format!("fit_on names clips that are not in the WAV directory: {unknown:?}")).into());
                }
            }
            let fit: Vec<&[Vec<f64>]> = results
                .iter()
                .filter(|(n, _)| cfg.fit_on.as_ref().is_none_or(|names| names.contains(n)))
                .filter_map(|(_, r)| r.as_ref().ok().map(Vec::as_slice))
                .collect();
            Normalizer::fit(fit)?
        }
    };
    let dim = cfg.mfcc.coefficients * cfg.stack;
    if norm.dim() != dim {
        return Err(UsageError(format!("stats have dimension {}, features have {dim}", norm.dim())).into());
    }

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    if cfg.stats.is_none() {
        write_atomic(&out_dir.join("stats.json"), to_json_pretty(&norm)?.as_bytes())?;
    }
    let extraction = serde_json::to_string(&serde_json::json!({ "mfcc": cfg.mfcc, "stack": cfg.stack }))?;
    let mut failures = Vec::new();
    let mut written = 0;
    for (name, r) in &results {
        match r {
            Ok(frames) => {
                let rows = norm.apply(frames)?;
                let data: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
                let file = FeatureFile::new("audio", rows.len(), dim, data, extraction.clone())?;
                file.write(&out_dir.join(format!("{name}.audio.mmfs")))?;
                written += 1;
            }
            Err(msg) => {
                eprintln!("{name}: {msg}");
                failures.push(name.clone());
            }
        }
    }
    log::info!("wrote {written} feature files to {}", out_dir.display());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(PartialFailure(format!("{} of {} WAV files failed: {}", failures.len(), results.len(), failures.join(", "))).into())
    }
}

/// The input dimension of `name` as stored in the first clip that has it.
fn input_dim(corpus: &CaptionCorpus, name: &str) -> anyhow::Result<usize> {
    let path = corpus
        .entries()
        .iter()
        .find_map(|e| e.features.get(name))
        .ok_or_else(|| UsageError(format!("modality {name:?} has no feature files in the manifest; set input_dim")))?;
    Ok(FeatureFile::read(path)?.cols)
}

fn resolve_model(tf: &mut TrainFile, corpus: &CaptionCorpus) -> anyhow::Result<ModelConfig> {
    let specs = match tf.modalities.take() {
        Some(s) => s,
        None => corpus
            .modalities()
            .into_iter()
            .map(|name| ModalitySpec { name, encoder: default_encoder(), input_dim: None })
            .collect(),
    };
    let mut modalities = Vec::with_capacity(specs.len());
    let mut resolved = Vec::with_capacity(specs.len());
    for mut s in specs {
        let dim = match s.input_dim {
            Some(d) => d,
            None => input_dim(corpus, &s.name)?,
        };
        s.input_dim = Some(dim);
        modalities.push(ModalityConfig { name: s.name.clone(), input_dim: dim, encoder: s.encoder });
        resolved.push(s);
    }
    tf.modalities = Some(resolved);
    let cfg = ModelConfig {
        modalities,
        vocabulary: build_vocabulary(corpus, tf.min_count)?,
        fusion: tf.fusion,
        embed_dim: tf.embed_dim,
        decoder_cells: tf.decoder_cells,
        attention_dim: tf.attention_dim,
        modality_attention_dim: tf.modality_attention_dim,
        pre_output_dim: tf.pre_output_dim,
        init_state: tf.init_state,
        feed_content: tf.feed_content,
        init_scale: tf.init_scale,
    };
    cfg.validate()?;
    corpus.check_modalities(&cfg)?;
    Ok(cfg)
}

/// One line of `log.jsonl`. Wall-clock time goes to stderr only, so the file
/// is reproducible.
#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    best: bool,
}

pub fn train(corpus_path: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>, print_config: bool) -> anyhow::Result<()> {
    let mut tf: TrainFile = read_json(config)?;
    if let Some(s) = seed {
        tf.train.seed = s;
    }
    tf.train.validate()?;
    require_file(corpus_path, "manifest")?;
    let corpus = CaptionCorpus::load(corpus_path)?;
    let model_cfg = resolve_model(&mut tf, &corpus)?;
    if print_config {
        print!("{}", to_json_pretty(&tf)?);
        return Ok(());
    }
    log::info!("configuration: {}", serde_json::to_string(&tf)?);
    let train_set = corpus.samples(Split::Train, &model_cfg)?;
    let val_set = corpus.samples(Split::Val, &model_cfg)?;
    log::info!(
        "{} training and {} validation captions, vocabulary of {}",
        train_set.len(),
        val_set.len(),
        model_cfg.vocabulary.len()
    );

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("config.json"), to_json_pretty(&tf)?.as_bytes())?;
    let model = Model::<f64>::new(model_cfg, tf.train.seed)?;
    let ckpt_path = out.join("checkpoint.mmck");
    let log_path = out.join("log.jsonl");
    let mut log_text = String::new();
    let train_cfg = tf.train.clone();
    let mut hook = |entry: &EpochLog, model: &Model<f64>, is_best: bool| -> modattn_core::Result<()> {
        log::info!(
            "epoch {} train {:.6} val {:.6}{} ({} ms)",
            entry.epoch,
            entry.train_loss,
            entry.val_loss,
            if is_best { " best" } else { "" },
            entry.wall_ms
        );
        let line = LogLine { epoch: entry.epoch, train_loss: entry.train_loss, val_loss: entry.val_loss, best: is_best };
        log_text.push_str(&serde_json::to_string(&line)?);
        log_text.push('\n');
        write_atomic(&log_path, log_text.as_bytes())?;
        if is_best {
            Checkpoint::from_model(model, Some(train_cfg.clone()), Some(entry.epoch)).write(&ckpt_path)?;
        }
        Ok(())
    };
    let outcome = train_model(model, &train_set, &val_set, &tf.train, &mut hook)?;
    log::info!("best epoch {}; checkpoint at {}", outcome.best_epoch, ckpt_path.display());
    Ok(())
}

pub struct DecodeOptions {
    pub beam: usize,
    pub max_len: usize,
    pub dump_attention: bool,
    pub split: String,
}

#[derive(Serialize, Deserialize)]
struct DecodeLine {
    id: String,
    hypothesis: String,
    logprob: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    alpha: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    beta: Option<Vec<Vec<f64>>>,
}

pub fn decode(checkpoint: &Path, corpus_path: &Path, opts: &DecodeOptions, out: Option<&Path>) -> anyhow::Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(corpus_path, "manifest")?;
    let split: Split = opts.split.parse()?;
    if opts.beam == 0 || opts.max_len == 0 {
        return Err(UsageError("--beam and --max-len must be at least 1".into()).into());
    }
    let model: Model<f64> = Checkpoint::read(checkpoint)?.to_model()?;
    let corpus = CaptionCorpus::load_unchecked(corpus_path)?;
    corpus.check_modalities(model.config())?;
    let entries = corpus.split(split);
    let results: Vec<(String, anyhow::Result<String>)> = entries
        .par_iter()
        .map(|e| {
            let r = (|| -> anyhow::Result<String> {
                let feats = corpus.load_features(e, model.config())?;
                let best = beam_search(&model, &feats, opts.beam, opts.max_len)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| anyhow!("beam search returned no hypothesis"))?;
                let trace = best.trace;
                let line = DecodeLine {
                    id: e.id.clone(),
                    hypothesis: model.vocabulary().decode(&best.tokens)?,
                    logprob: best.logprob,
                    alpha: opts.dump_attention.then_some(trace.alpha),
                    beta: opts.dump_attention.then_some(trace.beta),
                };
                Ok(serde_json::to_string(&line)?)
            })();
            (e.id.clone(), r)
        })
        .collect();
    let mut text = String::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(line) => {
                text.push_str(&line);
                text.push('\n');
            }
            Err(err) => {
                eprintln!("skipping clip {id}: {err:#}");
                failed.push(id);
            }
        }
    }
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(PartialFailure(format!("{} of {} clips skipped: {}", failed.len(), entries.len(), failed.join(", "))).into())
    }
}

#[derive(Deserialize)]
struct HypothesisLine {
    id: String,
    hypothesis: String,
}

pub fn evaluate(hyp_path: &Path, corpus_path: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    require_file(hyp_path, "hypotheses file")?;
    require_file(corpus_path, "manifest")?;
    let text = std::fs::read_to_string(hyp_path)?;
    let mut lines = Vec::new();
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let h: HypothesisLine = serde_json::from_str(l)
            .map_err(|e| modattn_core::Error::Data(format!("{} line {}: {e}", hyp_path.display(), i + 1)))?;
        lines.push(h);
    }
    if lines.is_empty() {
        return Err(modattn_core::Error::Data(format!("{} contains no hypotheses", hyp_path.display())).into());
    }
    let corpus = CaptionCorpus::load_unchecked(corpus_path)?;
    let test: HashMap<&str, _> = corpus.split(Split::Test).into_iter().map(|e| (e.id.as_str(), e)).collect();
    let unknown: Vec<&str> = lines.iter().map(|h| h.id.as_str()).filter(|id| !test.contains_key(id)).collect();
    if !unknown.is_empty() {
        return Err(modattn_core::Error::Data(format!("hypothesis ids not in the test split: {}", unknown.join(", "))).into());
    }
    let mut seen = HashSet::new();
    let dups: Vec<&str> = lines.iter().map(|h| h.id.as_str()).filter(|id| !seen.insert(*id)).collect();
    if !dups.is_empty() {
        return Err(modattn_core::Error::Data(format!("duplicate hypothesis ids: {}", dups.join(", "))).into());
    }
    let hyps: Vec<Vec<String>> = lines.iter().map(|h| tokenize(&h.hypothesis)).collect();
    let refs: Vec<Vec<Vec<String>>> = lines.iter().map(|h| test[h.id.as_str()].tokenized_captions()).collect();
    let report = MetricReport::compute(&hyps, &refs)?;
    let json = serde_json::to_string(&report)?;
    println!("{json}");
    print!("{}", report.table());
    if let Some(p) = out {
        write_atomic(p, (json + "\n").as_bytes())?;
    }
    Ok(())
}

pub fn gradcheck(dims: &str, seed: Option<u64>, fault: Option<&str>) -> anyhow::Result<()> {
    let mut spec = match dims {
        "small" => ModelCheckSpec::default(),
        other => return Err(UsageError(format!("unknown --dims {other:?} (expected small)")).into()),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let fault = match fault {
        None => None,
        Some("sigmoid") => Some(GradFault::Sigmoid),
        Some("tanh") => Some(GradFault::Tanh),
        Some(other) => return Err(UsageError(format!("unknown fault {other:?}")).into()),
    };
    let start = Instant::now();
    let report = check_model_gradient(&spec, fault)?;
    println!("parameters checked: {}", report.per_param.len());
    println!("elements checked: {}", report.elements_checked);
    println!("max relative error: {:.3e}", report.max_rel_error);
    if let Some(w) = report.worst() {
        println!(
            "worst parameter: {} (element {}, analytic {:.6e}, numeric {:.6e})",
            w.name, w.index, w.analytic, w.numeric
        );
    }
    println!("elapsed: {:.2} s", start.elapsed().as_secs_f64());
    if report.max_rel_error < 1e-4 {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(anyhow!("max relative error {:.3e} is not below 1e-4", report.max_rel_error))
    }
}

pub fn synth(out: &Path, config: Option<&Path>, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let task = generate_synthetic_task(&cfg)?;
    let paths = task.write(out)?;
    write_atomic(&out.join("synth_config.json"), to_json_pretty(&cfg)?.as_bytes())?;
    println!("{}", paths.manifest.display());
    println!("{}", paths.corrupted_manifest.display());
    Ok(())
}

//! A two-stream captioning task. The `image` stream shows two object symbols
//! and the `motion` stream two action symbols, each at a frame flagged by a
//! marker channel; the caption is `obj_i act_j obj_k act_l`. Both streams use
//! the same symbol channels, so a decoder must know which stream it is
//! reading to name the right word class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use modattn_core::format::{write_atomic, FeatureFile};
use modattn_core::{Error, FeatureSequence, Result, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionCorpus, ManifestEntry, Split};

pub const OBJECT_MODALITY: &str = "image";
pub const ACTION_MODALITY: &str = "motion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Extra test clips in which exactly one stream is always corrupted.
    pub corrupted_test: usize,
    pub objects: usize,
    pub actions: usize,
    /// Standard deviation of the Gaussian noise added to every feature.
    pub noise: f64,
    /// Per-stream probability of corruption in the regular splits.
    pub corruption_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train: 500,
            val: 50,
            test: 100,
            corrupted_test: 100,
            objects: 6,
            actions: 6,
            noise: 0.1,
            corruption_prob: 0.3,
            min_len: 8,
            max_len: 16,
        }
    }
}

impl SynthConfig {
    /// Symbol channels shared by both streams.
    pub fn symbols(&self) -> usize {
        self.objects.max(self.actions)
    }

    /// Symbol channels plus the two marker channels.
    pub fn feature_dim(&self) -> usize {
        self.symbols() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train + self.val + self.test < 10 {
            return bad(format!(
                "need at least 10 clips, got {}",
                self.train + self.val + self.test
            ));
        }
        if self.objects < 2 || self.actions < 2 {
            return bad("need at least 2 objects and 2 actions".into());
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad(format!("invalid stream length range {}..={}", self.min_len, self.max_len));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be a finite non-negative number, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return bad(format!("corruption_prob must be in [0, 1], got {}", self.corruption_prob));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub id: String,
    pub split: Split,
    /// `[image, motion]` frames.
    pub streams: [Vec<Vec<f64>>; 2],
    /// Marked frames per stream, first then second symbol.
    pub informative: [[usize; 2]; 2],
    pub corrupted: [bool; 2],
    pub caption: String,
}

impl SynthClip {
    pub fn features(&self) -> Result<Vec<FeatureSequence<f64>>> {
        [OBJECT_MODALITY, ACTION_MODALITY]
            .iter()
            .zip(&self.streams)
            .map(|(m, s)| FeatureSequence::new(*m, Tensor::from_rows(s)?))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTask {
    pub config: SynthConfig,
    /// Train, val and test clips in that order.
    pub clips: Vec<SynthClip>,
    pub corrupted_test: Vec<SynthClip>,
}

pub fn object_word(i: usize) -> String {
    format!("obj_{i}")
}

pub fn action_word(i: usize) -> String {
    format!("act_{i}")
}

fn one_hot(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn stream(rng: &mut ChaCha8Rng, cfg: &SynthConfig, classes: usize, symbols: [usize; 2], corrupt: bool) -> (Vec<Vec<f64>>, [usize; 2]) {
    let d = cfg.feature_dim();
    let s = cfg.symbols();
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let a = rng.random_range(0..len);
    let mut b = rng.random_range(0..len - 1);
    if b >= a {
        b += 1;
    }
    let (t1, t2) = (a.min(b), a.max(b));
    let mut frames = vec![vec![0.0; d]; len];
    for (slot, (&t, &sym)) in [t1, t2].iter().zip(&symbols).enumerate() {
        frames[t] = one_hot(d, sym);
        frames[t][s + slot] = 1.0;
    }
    if corrupt {
        for (t, f) in frames.iter_mut().enumerate() {
            if t != t1 && t != t2 {
                *f = one_hot(d, rng.random_range(0..classes));
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("validated noise");
        for v in frames.iter_mut().flatten() {
            *v += normal.sample(rng);
        }
    }
    // Stored as float32 on disk; keep the in-memory copy identical.
    for v in frames.iter_mut().flatten() {
        *v = *v as f32 as f64;
    }
    (frames, [t1, t2])
}

fn clip(rng: &mut ChaCha8Rng, cfg: &SynthConfig, id: String, split: Split, corrupted: [bool; 2]) -> SynthClip {
    let objs = [rng.random_range(0..cfg.objects), rng.random_range(0..cfg.objects)];
    let acts = [rng.random_range(0..cfg.actions), rng.random_range(0..cfg.actions)];
    let (image, ti) = stream(rng, cfg, cfg.objects, objs, corrupted[0]);
    let (motion, tm) = stream(rng, cfg, cfg.actions, acts, corrupted[1]);
    let caption = format!(
        "{} {} {} {}",
        object_word(objs[0]),
        action_word(acts[0]),
        object_word(objs[1]),
        action_word(acts[1])
    );
    SynthClip { id, split, streams: [image, motion], informative: [ti, tm], corrupted, caption }
}

/// Deterministic in `cfg.seed`.
pub fn generate_synthetic_task(cfg: &SynthConfig) -> Result<SynthTask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clips = Vec::new();
    for (split, n) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        for i in 0..n {
            let corrupted = [rng.random_bool(cfg.corruption_prob), rng.random_bool(cfg.corruption_prob)];
            clips.push(clip(&mut rng, cfg, format!("{split}_{i:04}"), split, corrupted));
        }
    }
    let mut corrupted_test = Vec::new();
    for i in 0..cfg.corrupted_test {
        let which = rng.random_range(0..2usize);
        let corrupted = [which == 0, which == 1];
        corrupted_test.push(clip(&mut rng, cfg, format!("corrupt_{i:04}"), Split::Test, corrupted));
    }
    Ok(SynthTask { config: cfg.clone(), clips, corrupted_test })
}

/// Where [`SynthTask::write`] put things.
#[derive(Clone, Debug)]
pub struct SynthPaths {
    pub manifest: PathBuf,
    pub corrupted_manifest: PathBuf,
}

impl SynthTask {
    fn entries(&self, clips: &[SynthClip], dir: &Path) -> Result<Vec<ManifestEntry>> {
        let cfg_json = serde_json::to_string(&self.config)?;
        let mut entries = Vec::with_capacity(clips.len());
        for c in clips {
            let mut features = BTreeMap::new();
            for (m, frames) in [OBJECT_MODALITY, ACTION_MODALITY].iter().zip(&c.streams) {
                let rel = PathBuf::from("features").join(format!("{}.{m}.mmfs", c.id));
                let seq = FeatureSequence::new(*m, Tensor::from_rows(frames)?)?;
                FeatureFile::from_sequence(&seq, cfg_json.clone())?.write(&dir.join(&rel))?;
                features.insert(m.to_string(), rel);
            }
            entries.push(ManifestEntry {
                id: c.id.clone(),
                split: c.split,
                features,
                captions: vec![c.caption.clone()],
            });
        }
        Ok(entries)
    }

    /// Writes `features/*.mmfs`, `manifest.jsonl` and
    /// `manifest_corrupted.jsonl` under `dir`, with manifest paths relative
    /// to `dir`.
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        std::fs::create_dir_all(dir.join("features"))?;
        let jsonl = |entries: Vec<ManifestEntry>| -> Result<String> {
            let mut s = String::new();
            for e in entries {
                s.push_str(&serde_json::to_string(&e)?);
                s.push('\n');
            }
            Ok(s)
        };
        let paths = SynthPaths {
            manifest: dir.join("manifest.jsonl"),
            corrupted_manifest: dir.join("manifest_corrupted.jsonl"),
        };
        write_atomic(&paths.manifest, jsonl(self.entries(&self.clips, dir)?)?.as_bytes())?;
        write_atomic(&paths.corrupted_manifest, jsonl(self.entries(&self.corrupted_test, dir)?)?.as_bytes())?;
        Ok(paths)
    }

    pub fn split(&self, split: Split) -> Vec<&SynthClip> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }

    /// The in-memory corpus, for callers that do not need files. Feature paths
    /// are left empty.
    pub fn corpus_without_files(&self) -> Result<CaptionCorpus> {
        CaptionCorpus::new(
            self.clips
                .iter()
                .map(|c| ManifestEntry {
                    id: c.id.clone(),
                    split: c.split,
                    features: BTreeMap::new(),
                    captions: vec![c.caption.clone()],
                })
                .collect(),
        )
    }
}

fn argmax_prefix(v: &[f64], n: usize) -> usize {
    (0..n).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn read_stream(frames: &[Vec<f64>], classes: usize, symbols: usize) -> [usize; 2] {
    [0, 1].map(|slot| {
        let t = (0..frames.len()).fold(0, |b, t| if frames[t][symbols + slot] > frames[b][symbols + slot] { t } else { b });
        argmax_prefix(&frames[t], classes)
    })
}

/// Reads each stream's symbols at its marked frames, taking objects from the
/// first argument and actions from the second.
pub fn oracle_caption(cfg: &SynthConfig, image: &[Vec<f64>], motion: &[Vec<f64>]) -> String {
    let o = read_stream(image, cfg.objects, cfg.symbols());
    let a = read_stream(motion, cfg.actions, cfg.symbols());
    format!("{} {} {} {}", object_word(o[0]), action_word(a[0]), object_word(o[1]), action_word(a[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, noise: f64) -> SynthConfig {
        SynthConfig { seed, train: 40, val: 5, test: 20, corrupted_test: 20, noise, ..Default::default() }
    }

    #[test]
    fn shapes_and_markers() {
        let cfg = small(3, 0.0);
        let task = generate_synthetic_task(&cfg).unwrap();
        assert_eq!(task.clips.len(), 65);
        for c in task.clips.iter().chain(&task.corrupted_test) {
            for (k, s) in c.streams.iter().enumerate() {
                assert!((8..=16).contains(&s.len()));
                assert!(s.iter().all(|f| f.len() == cfg.feature_dim()));
                let [t1, t2] = c.informative[k];
                assert!(t1 < t2);
                assert_eq!(s[t1][cfg.symbols()], 1.0);
                assert_eq!(s[t2][cfg.symbols() + 1], 1.0);
                let marked = s.iter().filter(|f| f[cfg.symbols()] != 0.0 || f[cfg.symbols() + 1] != 0.0).count();
                assert_eq!(marked, 2);
            }
        }
        assert!(task.corrupted_test.iter().all(|c| c.corrupted[0] ^ c.corrupted[1]));
    }

    #[test]
    fn corruption_rate_is_roughly_configured() {
        let cfg = SynthConfig { train: 2000, val: 0, test: 0, corrupted_test: 0, ..Default::default() };
        let task = generate_synthetic_task(&cfg).unwrap();
        let n = task.clips.iter().flat_map(|c| c.corrupted).filter(|&b| b).count() as f64 / 4000.0;
        assert!((n - 0.3).abs() < 0.03, "{n}");
    }

    #[test]
    fn seed_determinism() {
        let a = generate_synthetic_task(&small(9, 0.2)).unwrap();
        assert_eq!(a, generate_synthetic_task(&small(9, 0.2)).unwrap());
        assert_ne!(a, generate_synthetic_task(&small(10, 0.2)).unwrap());
    }

    #[test]
    fn oracle_is_exact_without_noise_and_fails_when_streams_swap() {
        let cfg = small(5, 0.0);
        let task = generate_synthetic_task(&cfg).unwrap();
        let all: Vec<&SynthClip> = task.clips.iter().chain(&task.corrupted_test).collect();
        for c in &all {
            assert_eq!(oracle_caption(&cfg, &c.streams[0], &c.streams[1]), c.caption);
        }
        let swapped_right = all
            .iter()
            .filter(|c| oracle_caption(&cfg, &c.streams[1], &c.streams[0]) == c.caption)
            .count();
        assert!(swapped_right * 10 < all.len(), "{swapped_right} of {}", all.len());
    }

    #[test]
    fn too_few_clips_rejected() {
        let cfg = SynthConfig { train: 5, val: 1, test: 1, ..Default::default() };
        assert!(matches!(generate_synthetic_task(&cfg), Err(Error::Config(_))));
    }
}

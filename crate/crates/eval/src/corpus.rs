use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use modattn_audio::dummy_sequence;
use modattn_core::format::FeatureFile;
use modattn_core::train::Sample;
use modattn_core::vocab::tokenize;
use modattn_core::{Error, FeatureSequence, ModelConfig, Result, Vocabulary};
use serde::{Deserialize, Serialize};

/// Modality that may be absent from a clip; a dummy sequence stands in.
pub const OPTIONAL_MODALITY: &str = "audio";

/// Length of the stand-in sequence for missing audio.
pub const DUMMY_LEN: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub features: BTreeMap<String, PathBuf>,
    pub captions: Vec<String>,
}

impl ManifestEntry {
    pub fn tokenized_captions(&self) -> Vec<Vec<String>> {
        self.captions.iter().map(|c| tokenize(c)).collect()
    }
}

/// Clips in manifest order. Feature paths are absolute or already resolved
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionCorpus {
    entries: Vec<ManifestEntry>,
}

impl CaptionCorpus {
    /// Checks ids are unique and every clip has at least one non-empty
    /// caption. Feature files are not touched; see [`Self::check_files`].
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut ids = HashSet::new();
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Data(format!("clip id {:?} appears more than once", e.id)));
            }
            if e.captions.is_empty() {
                return Err(Error::Data(format!("clip {:?} has no captions", e.id)));
            }
            if e.captions.iter().any(|c| tokenize(c).is_empty()) {
                return Err(Error::Data(format!("clip {:?} has an empty caption", e.id)));
            }
        }
        Ok(Self { entries })
    }

    /// `(clip id, path)` for every listed feature file that does not exist.
    pub fn missing_files(&self) -> Vec<(String, PathBuf)> {
        self.entries
            .iter()
            .flat_map(|e| e.features.values().filter(|p| !p.is_file()).map(|p| (e.id.clone(), p.clone())))
            .collect()
    }

    pub fn check_files(&self) -> Result<()> {
        let missing = self.missing_files();
        if missing.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = missing.iter().map(|(id, p)| format!("{id}: {}", p.display())).collect();
        Err(Error::Data(format!("missing feature files: {}", list.join(", "))))
    }

    /// Parses manifest text without checking feature files.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Data(format!("manifest line {}: {err}", i + 1)))?;
            for p in e.features.values_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            entries.push(e);
        }
        Self::new(entries)
    }

    /// Reads a JSON-lines manifest; relative feature paths are taken relative
    /// to the manifest's directory. Every feature file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Self::load_unchecked(path)?;
        c.check_files()?;
        Ok(c)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Every modality named by at least one clip.
    pub fn modalities(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self.entries.iter().flat_map(|e| e.features.keys()).collect();
        set.into_iter().cloned().collect()
    }

    /// Fails with a configuration error when the model needs a modality the
    /// manifest never provides. Audio may be missing everywhere.
    pub fn check_modalities(&self, config: &ModelConfig) -> Result<()> {
        let have = self.modalities();
        let missing: Vec<&str> = config
            .modalities
            .iter()
            .map(|m| m.name.as_str())
            .filter(|m| *m != OPTIONAL_MODALITY && !have.iter().any(|h| h == m))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "model modalities {missing:?} are not in the manifest (it has {have:?})"
            )))
        }
    }

    /// Feature sequences in model modality order. Missing or frame-less audio
    /// is replaced by a zero sequence of length [`DUMMY_LEN`].
    pub fn load_features(&self, entry: &ManifestEntry, config: &ModelConfig) -> Result<Vec<FeatureSequence<f64>>> {
        config
            .modalities
            .iter()
            .map(|m| {
                let dummy = || -> Result<FeatureSequence<f64>> {
                    let rows = dummy_sequence(DUMMY_LEN, m.input_dim);
                    FeatureSequence::new(m.name.clone(), modattn_core::Tensor::from_rows(&rows)?)
                };
                match entry.features.get(&m.name) {
                    None if m.name == OPTIONAL_MODALITY => {
                        log::debug!("clip {}: no audio, using a dummy sequence", entry.id);
                        dummy()
                    }
                    None => Err(Error::Data(format!("clip {:?} lacks modality {:?}", entry.id, m.name))),
                    Some(path) => {
                        let file = FeatureFile::read(path)?;
                        if file.modality != m.name {
                            return Err(Error::Data(format!(
                                "{} holds modality {:?}, expected {:?}",
                                path.display(),
                                file.modality,
                                m.name
                            )));
                        }
                        if file.cols != m.input_dim {
                            return Err(Error::Data(format!(
                                "{} has {} columns, the model expects {} for {:?}",
                                path.display(),
                                file.cols,
                                m.input_dim,
                                m.name
                            )));
                        }
                        if file.rows == 0 && m.name == OPTIONAL_MODALITY {
                            log::debug!("clip {}: audio has no frames, using a dummy sequence", entry.id);
                            return dummy();
                        }
                        file.to_sequence()
                    }
                }
            })
            .collect()
    }

    /// One sample per (clip, caption) in manifest order.
    pub fn samples(&self, split: Split, config: &ModelConfig) -> Result<Vec<Sample<f64>>> {
        let mut out = Vec::new();
        for e in self.split(split) {
            let features = self.load_features(e, config)?;
            for c in &e.captions {
                out.push(Sample {
                    id: e.id.clone(),
                    features: features.clone(),
                    tokens: config.vocabulary.encode(c),
                });
            }
        }
        Ok(out)
    }
}

/// Words with train-split frequency at least `min_count`, ids assigned by
/// descending frequency and then lexicographically.
pub fn build_vocabulary(corpus: &CaptionCorpus, min_count: usize) -> Result<Vocabulary> {
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty train split".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for e in train {
        for c in &e.captions {
            for w in tokenize(c) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    let mut words: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, n)| *n >= min_count.max(1) && !modattn_core::vocab::RESERVED.contains(&w.as_str()))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_words(words.into_iter().map(|(w, _)| w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, split: Split, caps: &[&str]) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            split,
            features: BTreeMap::new(),
            captions: caps.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn vocabulary_counts_and_cutoff() {
        let c = CaptionCorpus::new(vec![entry("x", Split::Train, &["a b", "a"]), entry("y", Split::Test, &["c c c"])]).unwrap();
        let v = build_vocabulary(&c, 1).unwrap();
        assert_eq!(&v.tokens()[4..], &["a", "b"]);
        let v2 = build_vocabulary(&c, 2).unwrap();
        assert_eq!(&v2.tokens()[4..], &["a"]);
        assert_eq!(v2.encode("b"), vec![modattn_core::vocab::UNK_ID]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let c = CaptionCorpus::new(vec![entry("x", Split::Train, &["zeta alpha mid", "mid"])]).unwrap();
        let v = build_vocabulary(&c, 1).unwrap();
        assert_eq!(&v.tokens()[4..], &["mid", "alpha", "zeta"]);
        assert_eq!(v, build_vocabulary(&c, 1).unwrap());
    }

    #[test]
    fn empty_train_split_is_a_data_error() {
        let c = CaptionCorpus::new(vec![entry("x", Split::Val, &["a"])]).unwrap();
        assert!(matches!(build_vocabulary(&c, 1), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_validation() {
        assert!(CaptionCorpus::new(vec![entry("x", Split::Train, &["a"]), entry("x", Split::Test, &["b"])]).is_err());
        assert!(CaptionCorpus::new(vec![entry("x", Split::Train, &[])]).is_err());
        assert!(CaptionCorpus::new(vec![entry("x", Split::Train, &["..."])]).is_err());
        let bad = r#"{"id":"a","split":"dev","features":{},"captions":["x"]}"#;
        assert!(CaptionCorpus::parse(bad, Path::new(".")).is_err());
        let missing = r#"{"id":"a","split":"train","features":{"image":"nope.mmfs"},"captions":["x"]}"#;
        let c = CaptionCorpus::parse(missing, Path::new("/nonexistent")).unwrap();
        assert_eq!(c.missing_files().len(), 1);
        assert!(c.check_files().unwrap_err().to_string().contains("nope.mmfs"));
    }

    #[test]
    fn tokenization_round_trip_through_vocabulary() {
        let c = CaptionCorpus::new(vec![entry("x", Split::Train, &["A man, slicing a Tomato!"])]).unwrap();
        let v = build_vocabulary(&c, 1).unwrap();
        let ids = v.encode(&c.entries()[0].captions[0]);
        let text = v.decode(&ids).unwrap();
        assert_eq!(text, "a man slicing a tomato");
        assert_eq!(tokenize(&text), c.entries()[0].tokenized_captions()[0]);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = CaptionCorpus::new(vec![entry("x", Split::Train, &["a b"]), entry("y", Split::Val, &["c"])]).unwrap();
        let back = CaptionCorpus::parse(&c.to_jsonl().unwrap(), Path::new("/")).unwrap();
        assert_eq!(back, c);
    }
}

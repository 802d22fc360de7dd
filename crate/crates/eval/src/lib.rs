//! Caption corpora, BLEU and CIDEr-D scoring, and a synthetic two-stream
//! captioning task on which modality identification is required.

pub mod corpus;
pub mod experiment;
pub mod metrics;
pub mod synth;

pub use corpus::{build_vocabulary, CaptionCorpus, ManifestEntry, Split};
pub use metrics::{bleu, cider, Bleu, MetricReport};
pub use synth::{generate_synthetic_task, SynthClip, SynthConfig, SynthTask};

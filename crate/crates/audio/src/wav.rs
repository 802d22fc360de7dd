use std::path::Path;

use crate::{AudioError, Result};

/// Mono samples scaled to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcmClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl PcmClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit integer or 32-bit float mono RIFF WAVE file. The sample
/// rate is not checked here; extraction rejects anything but the configured
/// rate.
pub fn read_wav(path: &Path) -> Result<PcmClip> {
    let fail = |msg: String| AudioError::Format(format!("{}: {msg}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => fail(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(fail(format!("expected mono audio, found {} channels", spec.channels)));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (fmt, bits) => {
            return Err(fail(format!(
                "unsupported sample format {fmt:?} with {bits} bits (need 16-bit int or 32-bit float)"
            )))
        }
    }
    .map_err(|e| fail(e.to_string()))?;
    Ok(PcmClip::new(samples, spec.sample_rate))
}

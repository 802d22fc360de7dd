//! Audio front end: 16 kHz mono WAV loading, MFCC extraction, frame stacking
//! and mean/variance normalization.

mod mfcc;
mod normalize;
mod wav;

pub use mfcc::{
    dct_ii_orthonormal, extract_mfcc, frame_count, hz_to_mel, log_mel_energies, mel_center_frequencies,
    mel_filterbank, mel_to_hz, power_spectrum, stack_frames, MfccConfig,
};
pub use normalize::{dummy_sequence, Normalizer};
pub use wav::{read_wav, PcmClip};

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// One stacked feature vector per group of `group` MFCC frames, e.g. 260
/// dimensions for 13 coefficients and groups of 20.
pub fn stacked_features(clip: &PcmClip, cfg: &MfccConfig, group: usize) -> Result<Vec<Vec<f64>>> {
    Ok(stack_frames(&extract_mfcc(clip, cfg)?, group)?)
}

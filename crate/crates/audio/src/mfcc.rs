use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::wav::PcmClip;
use crate::{AudioError, Result};

/// MFCC settings. Defaults: 50 ms Hamming windows every 25 ms at 16 kHz,
/// 1024-point FFT, 26 HTK-style mel filters spanning 0–8000 Hz, 13
/// coefficients with c0 kept, pre-emphasis 0.97, log floor 1e-10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub shift: usize,
    pub fft_size: usize,
    pub mel_filters: usize,
    pub coefficients: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window: 800,
            shift: 400,
            fft_size: 1024,
            mel_filters: 26,
            coefficients: 13,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            low_hz: 0.0,
            high_hz: 8000.0,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AudioError::Config(m));
        if self.window == 0 || self.shift == 0 {
            return bad("window and shift must be positive".into());
        }
        if self.window > self.fft_size {
            return bad(format!("window {} exceeds FFT size {}", self.window, self.fft_size));
        }
        if self.coefficients == 0 || self.coefficients > self.mel_filters {
            return bad(format!(
                "need 1 ≤ coefficients ≤ mel filters, got {} and {}",
                self.coefficients, self.mel_filters
            ));
        }
        if !(self.low_hz >= 0.0 && self.low_hz < self.high_hz && self.high_hz <= self.sample_rate as f64 / 2.0) {
            return bad(format!(
                "mel range {}–{} Hz must lie within 0–{} Hz",
                self.low_hz,
                self.high_hz,
                self.sample_rate as f64 / 2.0
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log floor must be positive".into());
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `floor((n - window) / shift) + 1`, or 0 when the signal is shorter than a
/// window.
pub fn frame_count(n: usize, window: usize, shift: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / shift + 1
    }
}

/// Filter edge frequencies in Hz: `mel_filters + 2` points equally spaced on
/// the mel scale. Filter `m` rises from edge `m` to edge `m+1` and falls to
/// edge `m+2`.
fn mel_edges(cfg: &MfccConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(cfg.high_hz));
    let n = cfg.mel_filters + 1;
    (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
}

pub fn mel_center_frequencies(cfg: &MfccConfig) -> Vec<f64> {
    let e = mel_edges(cfg);
    e[1..e.len() - 1].to_vec()
}

/// Triangular weights `[mel_filters][fft_size/2 + 1]`, evaluated at the exact
/// bin frequencies `k * rate / fft_size`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let edges = mel_edges(cfg);
    let bins = cfg.fft_size / 2 + 1;
    (0..cfg.mel_filters)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
                    if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II of `x`, first `keep` coefficients.
pub fn dct_ii_orthonormal(x: &[f64], keep: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..keep)
        .map(|n| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * n as f64 * (i as f64 + 0.5) / m).cos())
                .sum();
            s * if n == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() }
        })
        .collect()
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn pre_emphasize(x: &[f64], a: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        y.push(if i == 0 { v } else { v - a * x[i - 1] });
    }
    y
}

struct Plan {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: Vec<Vec<f64>>,
}

impl Plan {
    fn new(cfg: &MfccConfig) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(cfg.fft_size),
            window: hamming(cfg.window),
            bank: mel_filterbank(cfg),
        }
    }
}

/// `|X_k|^2 / fft_size` for `k = 0..=fft_size/2` of the Hamming-windowed,
/// zero-padded frame.
pub fn power_spectrum(frame: &[f64], cfg: &MfccConfig) -> Vec<f64> {
    power_with(&Plan::new(cfg), frame, cfg)
}

fn power_with(plan: &Plan, frame: &[f64], cfg: &MfccConfig) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .zip(&plan.window)
        .map(|(x, w)| Complex::new(x * w, 0.0))
        .collect();
    buf.resize(cfg.fft_size, Complex::new(0.0, 0.0));
    plan.fft.process(&mut buf);
    buf[..cfg.fft_size / 2 + 1]
        .iter()
        .map(|c| c.norm_sqr() / cfg.fft_size as f64)
        .collect()
}

fn log_mel_with(plan: &Plan, frame: &[f64], cfg: &MfccConfig) -> Vec<f64> {
    let p = power_with(plan, frame, cfg);
    plan.bank
        .iter()
        .map(|w| {
            let e: f64 = w.iter().zip(&p).map(|(a, b)| a * b).sum();
            e.max(cfg.log_floor).ln()
        })
        .collect()
}

fn check_clip(clip: &PcmClip, cfg: &MfccConfig) -> Result<()> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(AudioError::Format(format!(
            "sample rate {} Hz, expected {} Hz (resample upstream)",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    Ok(())
}

/// Floored log mel energies per frame, after pre-emphasis over the whole
/// signal and Hamming windowing.
pub fn log_mel_energies(clip: &PcmClip, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    check_clip(clip, cfg)?;
    let plan = Plan::new(cfg);
    let x = pre_emphasize(&clip.samples, cfg.pre_emphasis);
    let n = frame_count(x.len(), cfg.window, cfg.shift);
    Ok((0..n)
        .map(|f| {
            let start = f * cfg.shift;
            log_mel_with(&plan, &x[start..start + cfg.window], cfg)
        })
        .collect())
}

/// One `coefficients`-dimensional MFCC vector per frame. A clip shorter than
/// one window yields no frames.
pub fn extract_mfcc(clip: &PcmClip, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    Ok(log_mel_energies(clip, cfg)?
        .iter()
        .map(|e| dct_ii_orthonormal(e, cfg.coefficients))
        .collect())
}

/// Concatenates non-overlapping groups of `group` consecutive frames; a
/// trailing partial group is dropped.
pub fn stack_frames(frames: &[Vec<f64>], group: usize) -> Result<Vec<Vec<f64>>> {
    if group == 0 {
        return Err(AudioError::Config("stacking group must be at least 1".into()));
    }
    Ok(frames.chunks_exact(group).map(|c| c.concat()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f64>) -> PcmClip {
        PcmClip::new(samples, 16000)
    }

    #[test]
    fn one_second_gives_39_frames_and_one_stack() {
        let cfg = MfccConfig::default();
        let f = extract_mfcc(&clip(vec![0.0; 16000]), &cfg).unwrap();
        assert_eq!(f.len(), 39);
        assert!(f.iter().all(|v| v.len() == 13));
        let s = stack_frames(&f, 20).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 260);
    }

    #[test]
    fn frame_count_formula() {
        for n in [800, 801, 1199, 1200, 1600, 16000, 44100] {
            assert_eq!(frame_count(n, 800, 400), (n - 800) / 400 + 1);
        }
        assert_eq!(frame_count(799, 800, 400), 0);
        let cfg = MfccConfig::default();
        assert!(extract_mfcc(&clip(vec![0.1; 799]), &cfg).unwrap().is_empty());
    }

    #[test]
    fn silence_gives_dct_of_constant_floor() {
        let cfg = MfccConfig::default();
        let f = extract_mfcc(&clip(vec![0.0; 4000]), &cfg).unwrap();
        let want = dct_ii_orthonormal(&[1e-10f64.ln(); 26], 13);
        for frame in &f {
            assert_eq!(frame, &f[0]);
            for (a, b) in frame.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!((want[0] - 26f64.sqrt() * 1e-10f64.ln()).abs() < 1e-9);
        assert!(want[1..].iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn wrong_rate_is_format_error() {
        let c = PcmClip::new(vec![0.0; 2000], 44100);
        assert!(matches!(extract_mfcc(&c, &MfccConfig::default()), Err(AudioError::Format(_))));
    }

    #[test]
    fn stacking_groups_in_time_order() {
        let frames: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64; 13]).collect();
        let s = stack_frames(&frames, 20).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], frames[..20].concat());
        assert_eq!(stack_frames(&frames[..39], 20).unwrap().len(), 1);
        assert!(stack_frames(&frames, 0).is_err());
    }

    #[test]
    fn dct_is_orthonormal() {
        let x = [0.3, -1.2, 2.5, 0.0, 4.1];
        let c = dct_ii_orthonormal(&x, 5);
        let e1: f64 = x.iter().map(|v| v * v).sum();
        let e2: f64 = c.iter().map(|v| v * v).sum();
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cases = [
            MfccConfig { window: 2048, ..Default::default() },
            MfccConfig { coefficients: 30, ..Default::default() },
            MfccConfig { high_hz: 9000.0, ..Default::default() },
            MfccConfig { shift: 0, ..Default::default() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(AudioError::Config(_))));
        }
    }
}

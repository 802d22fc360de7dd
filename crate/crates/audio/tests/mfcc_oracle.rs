use std::f64::consts::PI;

use modattn_audio::*;
use proptest::prelude::*;

fn tone(freq: f64, amp: f64, secs: f64) -> PcmClip {
    let n = (16000.0 * secs) as usize;
    PcmClip::new((0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect(), 16000)
}

// Straight-from-definition log mel energies: O(N^2) DFT, own Hamming window,
// own filter edges.
fn oracle_log_mel(frame: &[f64]) -> Vec<f64> {
    let n_fft = 1024usize;
    let w = frame.len();
    let x: Vec<f64> = frame
        .iter()
        .enumerate()
        .map(|(i, v)| v * (0.54 - 0.46 * (2.0 * PI * i as f64 / (w - 1) as f64).cos()))
        .collect();
    let power: Vec<f64> = (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * t) as f64 / n_fft as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im) / n_fft as f64
        })
        .collect();
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(8000.0);
    let edges: Vec<f64> = (0..28).map(|i| hz(top * i as f64 / 27.0)).collect();
    (0..26)
        .map(|m| {
            let e: f64 = power
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = k as f64 * 16000.0 / 1024.0;
                    let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                    let wgt = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    wgt * p
                })
                .sum();
            e.max(1e-10).ln()
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn tone_energy_matches_oracle_and_peaks_near_1khz() {
    let cfg = MfccConfig::default();
    let clip = tone(1000.0, 0.5, 0.2);
    let ours = log_mel_energies(&clip, &cfg).unwrap();
    assert_eq!(ours.len(), frame_count(clip.samples.len(), 800, 400));

    let mut pre = clip.samples.clone();
    for i in (1..pre.len()).rev() {
        pre[i] -= 0.97 * clip.samples[i - 1];
    }
    for (f, got) in ours.iter().enumerate() {
        let want = oracle_log_mel(&pre[f * 400..f * 400 + 800]);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-8, "frame {f}: {a} vs {b}");
        }
        let centers = mel_center_frequencies(&cfg);
        let nearest = argmax(&centers.iter().map(|c| -(c - 1000.0).abs()).collect::<Vec<_>>());
        assert_eq!(argmax(got), nearest);
    }
}

#[test]
fn mfcc_is_dct_of_log_mel() {
    let cfg = MfccConfig::default();
    let clip = tone(440.0, 0.3, 0.1);
    let mel = log_mel_energies(&clip, &cfg).unwrap();
    let mfcc = extract_mfcc(&clip, &cfg).unwrap();
    for (m, c) in mel.iter().zip(&mfcc) {
        let naive: Vec<f64> = (0..13)
            .map(|n| {
                let s: f64 = m
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * n as f64 * (2 * i + 1) as f64 / 52.0).cos())
                    .sum();
                s * if n == 0 { (1.0f64 / 26.0).sqrt() } else { (2.0f64 / 26.0).sqrt() }
            })
            .collect();
        for (a, b) in c.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn normalized_training_features_are_standardized() {
    let cfg = MfccConfig::default();
    let clips: Vec<Vec<Vec<f64>>> = [(300.0, 0.2), (1200.0, 0.6), (2500.0, 0.1), (700.0, 0.9)]
        .iter()
        .map(|&(f, a)| stacked_features(&tone(f, a, 1.6), &cfg, 20).unwrap())
        .collect();
    let norm = Normalizer::fit(clips.iter().map(|c| c.as_slice())).unwrap();
    let out: Vec<Vec<f64>> = clips.iter().flat_map(|c| norm.apply(c).unwrap()).collect();
    let n = out.len() as f64;
    for d in 0..260 {
        let mean: f64 = out.iter().map(|v| v[d]).sum::<f64>() / n;
        let var: f64 = out.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "dim {d} mean {mean}");
        if norm.variance[d] > 1e-8 {
            assert!((var - 1.0).abs() < 1e-6, "dim {d} var {var}");
        }
    }
}

#[test]
fn wav_file_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("silence.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    for _ in 0..16000 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let clip = read_wav(&p).unwrap();
    let s = stacked_features(&clip, &MfccConfig::default(), 20).unwrap();
    assert_eq!((s.len(), s[0].len()), (1, 260));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn peak_band_is_scale_invariant(freq in 200.0f64..7000.0, scale in 0.05f64..20.0) {
        let cfg = MfccConfig::default();
        let a = log_mel_energies(&tone(freq, 0.05, 0.06), &cfg).unwrap();
        let b = log_mel_energies(&tone(freq, 0.05 * scale, 0.06), &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(argmax(x), argmax(y));
            let shift = 2.0 * scale.ln();
            for (u, v) in x.iter().zip(y) {
                if *u > -20.0 {
                    prop_assert!((v - u - shift).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn stacked_length_formula(n in 0usize..40000) {
        let cfg = MfccConfig::default();
        let clip = PcmClip::new(vec![0.01; n], 16000);
        let s = stacked_features(&clip, &cfg, 20).unwrap();
        prop_assert_eq!(s.len(), frame_count(n, 800, 400) / 20);
    }
}

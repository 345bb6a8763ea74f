mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfx_core::features::{
    compute_channels, descriptor_103, hpss_decompose, FeatureConfig, FeatureExtractor,
    FeatureTensor, DESCRIPTOR_LEN, N_CHANNELS,
};
use rfx_core::spectral::{stft, MagnitudeSpectrogram, StftConfig, MEL_LOG_EPS};
use rfx_core::Error;

const SR: u32 = 44_100;

fn energy(m: &MagnitudeSpectrogram) -> f64 {
    m.energy()
}

fn small_fx() -> FeatureExtractor {
    FeatureExtractor::new(FeatureConfig {
        stft: StftConfig::new(16, 4).unwrap(),
        sample_rate: 8000,
        n_mels: 4,
        kernel_time: 3,
        kernel_freq: 3,
    })
    .unwrap()
}

fn spec(n_frames: usize, cfg: StftConfig, sr: u32, mut f: impl FnMut(usize, usize) -> f64) -> MagnitudeSpectrogram {
    let bins = cfg.n_bins();
    let mut m = MagnitudeSpectrogram::zeros(n_frames, cfg, sr);
    for t in 0..n_frames {
        for k in 0..bins {
            m.values[t * bins + k] = f(t, k);
        }
    }
    m
}

/// `[bin][frame]` view for the reference code.
fn bins_by_frame(m: &MagnitudeSpectrogram) -> Vec<Vec<f64>> {
    (0..m.n_bins).map(|k| (0..m.n_frames).map(|t| m.get(t, k)).collect()).collect()
}

#[test]
fn sustained_sine_is_harmonic() {
    let x: Vec<f64> = (0..4 * SR as usize)
        .map(|i| 0.5 * (2.0 * PI * 440.0 * i as f64 / SR as f64).sin())
        .collect();
    let mag = stft(&x, StftConfig::default(), SR).unwrap().magnitude;
    let hp = hpss_decompose(&mag, 17, 17).unwrap();
    let share = energy(&hp.harmonic) / energy(&mag);
    assert!(share >= 0.9, "harmonic share {share}");
}

#[test]
fn click_train_is_percussive() {
    let mut x = vec![0.0; 4 * SR as usize];
    for i in (0..x.len()).step_by(SR as usize / 10) {
        x[i] = 1.0;
    }
    let mag = stft(&x, StftConfig::default(), SR).unwrap().magnitude;
    let hp = hpss_decompose(&mag, 17, 17).unwrap();
    let share = energy(&hp.percussive) / energy(&mag);
    assert!(share >= 0.8, "percussive share {share}");
}

#[test]
fn constant_magnitude_splits_evenly() {
    let cfg = StftConfig::new(64, 16).unwrap();
    let mag = spec(20, cfg, 8000, |_, _| 0.7);
    let hp = hpss_decompose(&mag, 5, 7).unwrap();
    for (h, p) in hp.harmonic.values.iter().zip(&hp.percussive.values) {
        assert_eq!(*h, 0.35);
        assert_eq!(*p, 0.35);
    }
}

#[test]
fn even_kernel_is_a_config_error() {
    let mag = MagnitudeSpectrogram::zeros(8, StftConfig::new(64, 16).unwrap(), 8000);
    assert!(matches!(hpss_decompose(&mag, 4, 3), Err(Error::Config(_))));
    assert!(matches!(hpss_decompose(&mag, 3, 1), Err(Error::Config(_))));
}

#[test]
fn hpss_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = StftConfig::new(32, 8).unwrap();
    let mag = spec(11, cfg, 8000, |_, _| rng.random::<f64>());
    let hp = hpss_decompose(&mag, 5, 3).unwrap();
    let (h, p) = common::hpss(&bins_by_frame(&mag), 5, 3);
    for t in 0..11 {
        for k in 0..17 {
            assert!((hp.harmonic.get(t, k) - h[k][t]).abs() < 1e-12);
            assert!((hp.percussive.get(t, k) - p[k][t]).abs() < 1e-12);
        }
    }
}

#[test]
fn time_constant_residual_has_zero_dynamics() {
    let fx = small_fx();
    let mag = spec(6, fx.config.stft, 8000, |_, k| 0.1 + k as f64);
    let f = compute_channels(&mag, &fx, "c").unwrap();
    for c in [3, 4, 6] {
        assert!(f.channel(c).iter().all(|&v| v == 0.0), "channel {c}");
    }
}

#[test]
fn balanced_frame_has_zero_hp_ratio() {
    // A constant spectrogram splits H = P exactly.
    let fx = small_fx();
    let mag = spec(5, fx.config.stft, 8000, |_, _| 0.3);
    let f = compute_channels(&mag, &fx, "b").unwrap();
    assert!(f.channel(5).iter().all(|&v| v == 0.0));
}

#[test]
fn fewer_than_three_frames_is_too_short() {
    let fx = small_fx();
    let mag = MagnitudeSpectrogram::zeros(2, fx.config.stft, 8000);
    assert!(matches!(compute_channels(&mag, &fx, "s"), Err(Error::TooShort { .. })));
}

#[test]
fn three_by_four_golden_tensor() {
    let fx = small_fx();
    let vals = [
        [0.9, 0.1, 0.4, 0.0, 0.3, 0.8, 0.2, 0.6, 0.05],
        [0.2, 0.7, 0.4, 0.5, 0.0, 0.1, 0.9, 0.3, 0.6],
        [0.6, 0.3, 0.8, 0.1, 0.7, 0.2, 0.4, 0.0, 0.9],
    ];
    let mag = spec(3, fx.config.stft, 8000, |t, k| vals[t][k]);
    let f = compute_channels(&mag, &fx, "g").unwrap();
    assert_eq!((f.n_mels, f.n_frames), (4, 3));
    assert_eq!(f.values.len(), 7 * 4 * 3);
    let fb = common::mel_filterbank(4, 16, 8000.0);
    let reference = common::channels(&bins_by_frame(&mag), &fb, 3, 3);
    for c in 0..N_CHANNELS {
        for m in 0..4 {
            for t in 0..3 {
                let (a, b) = (f.get(c, m, t), reference[c][m][t]);
                assert!((a - b).abs() < 1e-12, "c {c} m {m} t {t}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn feature_bytes_are_deterministic() {
    let fx = small_fx();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mag = spec(9, fx.config.stft, 8000, |_, _| rng.random::<f64>());
    let a = compute_channels(&mag, &fx, "d").unwrap().to_le_bytes();
    let b = compute_channels(&mag.clone(), &fx, "d").unwrap().to_le_bytes();
    assert_eq!(a, b);
    assert_eq!(&a[..12], &[7, 0, 0, 0, 4, 0, 0, 0, 9, 0, 0, 0]);
    assert_eq!(a.len(), 12 + 4 * 7 * 4 * 9);
}

fn default_fx() -> FeatureExtractor {
    FeatureExtractor::new(FeatureConfig::default()).unwrap()
}

#[test]
fn descriptor_of_silence_has_fixed_layout() {
    let fx = default_fx();
    let mag = MagnitudeSpectrogram::zeros(8, fx.config.stft, SR);
    let f = compute_channels(&mag, &fx, "z").unwrap();
    let d = descriptor_103(&f, &mag, &fx).unwrap();
    assert_eq!(d.values.len(), DESCRIPTOR_LEN);
    let floor = MEL_LOG_EPS.ln();
    // mel channels sit at the log floor, everything dynamic is zero
    for c in 0..3 {
        assert!((d.values[c] - floor).abs() < 1e-12);
    }
    for c in 3..7 {
        assert_eq!(d.values[c], 0.0);
    }
    assert!(d.values[7..14].iter().all(|&v| v.abs() < 1e-12));
    assert!(d.values[14..78].iter().all(|&v| v == 0.0));
    assert_eq!(d.values[78], 0.0);
    assert!((d.values[85] - floor).abs() < 1e-12);
}

#[test]
fn descriptor_means_survive_segment_repetition() {
    let fx = default_fx();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mag = spec(12, fx.config.stft, SR, |_, _| rng.random::<f64>());
    let one = compute_channels(&mag, &fx, "x").unwrap();
    let three = FeatureTensor::concat_frames(&[one.clone(), one.clone(), one.clone()], "x").unwrap();
    let d1 = descriptor_103(&one, &mag, &fx).unwrap();
    let d3 = descriptor_103(&three, &mag, &fx).unwrap();
    for c in 0..7 {
        assert!((d1.values[c] - d3.values[c]).abs() < 1e-12, "mean {c}");
    }
}

/// Straight-line reference for the descriptor layout.
fn reference_descriptor(ch: &[Vec<Vec<f64>>], mag: &[Vec<f64>], sr: f64, n_fft: usize) -> Vec<f64> {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let std = |x: &[f64]| {
        let m = mean(x);
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    };
    let mut out = Vec::new();
    let flat: Vec<Vec<f64>> = ch.iter().map(|c| c.iter().flatten().cloned().collect()).collect();
    for c in &flat {
        out.push(mean(c));
    }
    for c in &flat {
        out.push(std(c));
    }
    let frames = mag[0].len();
    let edges: Vec<f64> = (0..=8).map(|i| 20.0 * (sr / 2.0 / 20.0).powf(i as f64 / 8.0)).collect();
    let band = |f: f64| -> Option<usize> {
        if f < edges[0] || f > edges[8] {
            None
        } else {
            Some((0..8).find(|&b| f < edges[b + 1]).unwrap_or(7))
        }
    };
    let (h, p) = common::hpss(mag, 17, 17);
    let mut be = vec![vec![0.0; frames]; 8];
    let (mut bh, mut bp) = (vec![0.0; 8], vec![0.0; 8]);
    let (mut eh, mut ep, mut tot) = (0.0, 0.0, 0.0);
    for k in 0..mag.len() {
        let b = band(k as f64 * sr / n_fft as f64);
        for t in 0..frames {
            tot += mag[k][t].powi(2);
            eh += h[k][t].powi(2);
            ep += p[k][t].powi(2);
            if let Some(b) = b {
                be[b][t] += mag[k][t].powi(2);
                bh[b] += h[k][t].powi(2);
                bp[b] += p[k][t].powi(2);
            }
        }
    }
    for e in &be {
        let (m, s) = (mean(e), std(e));
        let mx = e.iter().cloned().fold(0.0, f64::max);
        let (sk, ku) = if s > 0.0 {
            (
                e.iter().map(|v| ((v - m) / s).powi(3)).sum::<f64>() / frames as f64,
                e.iter().map(|v| ((v - m) / s).powi(4)).sum::<f64>() / frames as f64 - 3.0,
            )
        } else {
            (0.0, 0.0)
        };
        let fl: Vec<f64> = (1..frames).map(|t| (e[t] - e[t - 1]).abs()).collect();
        let peak = if mx > 0.0 {
            e.iter().filter(|&&v| v >= 0.5 * mx).count() as f64 / frames as f64
        } else {
            0.0
        };
        out.extend([m, s, mx, sk, ku, mean(&fl), std(&fl), peak]);
    }
    let nf = ch[0][0].len();
    let hp: Vec<f64> = (0..nf).map(|t| ch[5][0][t]).collect();
    let share = |a: f64, b: f64| if a + b > 0.0 { a / (a + b) } else { 0.0 };
    out.extend([
        ((eh + 1e-6) / (ep + 1e-6)).ln(),
        mean(&hp),
        std(&hp),
        hp.iter().cloned().fold(f64::INFINITY, f64::min),
        hp.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        share(eh, ep),
        share(ep, eh),
        (tot + 1e-6).ln(),
    ]);
    for b in 0..8 {
        out.push(share(bh[b], bp[b]));
    }
    for c in ch {
        let fm: Vec<f64> = (0..nf).map(|t| c.iter().map(|row| row[t]).sum::<f64>() / c.len() as f64).collect();
        let m = mean(&fm);
        let den: f64 = fm.iter().map(|v| (v - m).powi(2)).sum();
        let num: f64 = (1..nf).map(|t| (fm[t] - m) * (fm[t - 1] - m)).sum();
        out.push(if den > 0.0 { num / den } else { 0.0 });
    }
    let fl: Vec<f64> = (0..nf).map(|t| ch[6][0][t]).collect();
    out.extend([mean(&fl), std(&fl)]);
    out
}

#[test]
fn descriptor_matches_reference_on_seeded_track() {
    let fx = default_fx();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x: Vec<f64> = (0..SR as usize / 2)
        .map(|i| {
            let t = i as f64 / SR as f64;
            0.4 * (2.0 * PI * 330.0 * t).sin() + 0.05 * (rng.random::<f64>() - 0.5)
        })
        .collect();
    let mag = stft(&x, fx.config.stft, SR).unwrap().magnitude;
    let f = compute_channels(&mag, &fx, "seeded").unwrap();
    let d = descriptor_103(&f, &mag, &fx).unwrap();
    let ch: Vec<Vec<Vec<f64>>> = (0..7)
        .map(|c| (0..f.n_mels).map(|m| (0..f.n_frames).map(|t| f.get(c, m, t)).collect()).collect())
        .collect();
    let reference = reference_descriptor(&ch, &bins_by_frame(&mag), SR as f64, 2048);
    assert_eq!(reference.len(), DESCRIPTOR_LEN);
    for (i, (a, b)) in d.values.iter().zip(&reference).enumerate() {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "entry {i}: {a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hpss_partitions_and_is_scale_equivariant(
        vals in prop::collection::vec(0.0f64..3.0, 17 * 7),
        c in 0.01f64..100.0,
    ) {
        let cfg = StftConfig::new(32, 8).unwrap();
        let mag = MagnitudeSpectrogram { n_frames: 7, n_bins: 17, values: vals, config: cfg, sample_rate: 8000 };
        let hp = hpss_decompose(&mag, 3, 5).unwrap();
        let scaled = hpss_decompose(&mag.scaled(c), 3, 5).unwrap();
        for i in 0..mag.values.len() {
            let (h, p) = (hp.harmonic.values[i], hp.percussive.values[i]);
            prop_assert!(h >= 0.0 && p >= 0.0);
            prop_assert!((h + p - mag.values[i]).abs() <= 1e-9);
            prop_assert!((scaled.harmonic.values[i] - c * h).abs() <= 1e-9 * (1.0 + c * h));
            prop_assert!((scaled.percussive.values[i] - c * p).abs() <= 1e-9 * (1.0 + c * p));
        }
    }

    #[test]
    fn descriptor_is_finite_with_103_entries(
        vals in prop::collection::vec(0.0f64..1.0, 9 * 6),
    ) {
        let fx = small_fx();
        let mag = MagnitudeSpectrogram { n_frames: 6, n_bins: 9, values: vals, config: fx.config.stft, sample_rate: 8000 };
        let f = compute_channels(&mag, &fx, "p").unwrap();
        let d = descriptor_103(&f, &mag, &fx).unwrap();
        prop_assert_eq!(d.values.len(), DESCRIPTOR_LEN);
        prop_assert!(d.values.iter().all(|v| v.is_finite()));
    }
}

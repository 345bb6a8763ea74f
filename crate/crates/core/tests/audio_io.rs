use std::f64::consts::PI;
use std::path::Path;

use proptest::prelude::*;
use rfx_core::audio_io::{
    decode_wav, normalize, resample, segment, write_wav, WavEncoding, Waveform, TARGET_RATE,
};
use rfx_core::spectral::{stft, StftConfig};
use rfx_core::Error;

/// Canonical 44-byte header followed by the payload.
fn wav_bytes(channels: u16, rate: u32, bits: u16, format: u16, payload: &[u8]) -> Vec<u8> {
    let block = channels * bits / 8;
    let mut b = Vec::new();
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + payload.len() as u32).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&format.to_le_bytes());
    b.extend_from_slice(&channels.to_le_bytes());
    b.extend_from_slice(&rate.to_le_bytes());
    b.extend_from_slice(&(rate * block as u32).to_le_bytes());
    b.extend_from_slice(&block.to_le_bytes());
    b.extend_from_slice(&bits.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    b.extend_from_slice(payload);
    b
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn handwritten_pcm16_scales_by_two_to_the_fifteen() {
    let dir = tempfile::tempdir().unwrap();
    let payload: Vec<u8> = [32767i16, -32768, 0, 16384]
        .iter()
        .flat_map(|s| s.to_le_bytes())
        .collect();
    let p = write(dir.path(), "four.wav", &wav_bytes(1, 44_100, 16, 1, &payload));
    let w = decode_wav(&p).unwrap();
    assert_eq!(w.samples, vec![32767.0 / 32768.0, -1.0, 0.0, 0.5]);
    assert_eq!((w.channels, w.sample_rate), (1, 44_100));
}

#[test]
fn one_second_of_silence() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "s.wav", &wav_bytes(1, 44_100, 16, 1, &vec![0u8; 88_200]));
    let w = decode_wav(&p).unwrap();
    assert_eq!(w.samples.len(), 44_100);
    assert!(w.samples.iter().all(|&s| s == 0.0));
}

#[test]
fn pcm24_and_float_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let p24 = write(
        dir.path(),
        "a.wav",
        &wav_bytes(1, 8000, 24, 1, &[0x00, 0x00, 0x40, 0xff, 0xff, 0xff]),
    );
    assert_eq!(decode_wav(&p24).unwrap().samples, vec![0.5, -1.0 / 8_388_608.0]);
    let payload: Vec<u8> = [0.25f32, -1.5].iter().flat_map(|s| s.to_le_bytes()).collect();
    let pf = write(dir.path(), "f.wav", &wav_bytes(1, 8000, 32, 3, &payload));
    // no clipping at decode time
    assert_eq!(decode_wav(&pf).unwrap().samples, vec![0.25, -1.5]);
}

#[test]
fn truncated_header_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let full = wav_bytes(1, 44_100, 16, 1, &[0, 0, 0, 0]);
    let p = write(dir.path(), "t.wav", &full[..20]);
    assert!(matches!(decode_wav(&p), Err(Error::Format(_))));
    let p = write(dir.path(), "junk.wav", b"definitely not a wav file");
    assert!(matches!(decode_wav(&p), Err(Error::Format(_))));
}

#[test]
fn unsupported_encoding_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "u8.wav", &wav_bytes(1, 8000, 8, 1, &[128, 128]));
    assert!(matches!(decode_wav(&p), Err(Error::UnsupportedCodec(_))));
}

#[test]
fn write_then_decode_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let w = Waveform::mono(vec![0.0, 0.25, -0.5, 0.875], 22_050, "x");
    let p = dir.path().join("rt.wav");
    write_wav(&p, &w, WavEncoding::Float32).unwrap();
    assert_eq!(decode_wav(&p).unwrap().samples, w.samples);
    write_wav(&p, &w, WavEncoding::Pcm16).unwrap();
    let back = decode_wav(&p).unwrap().samples;
    for (a, b) in back.iter().zip(&w.samples) {
        assert!((a - b).abs() <= 0.5 / 32768.0);
    }
}

#[test]
fn stereo_downmix_and_clip() {
    let w = Waveform {
        samples: vec![0.5, -0.5, 1.37, 1.37, -2.0, 0.0],
        channels: 2,
        sample_rate: TARGET_RATE,
        source_path: "st".into(),
    };
    let n = normalize(&w).unwrap();
    assert_eq!(n.samples, vec![0.0, 1.0, -1.0]);
    assert_eq!(n.channels, 1);
}

#[test]
fn empty_input_is_rejected() {
    let w = Waveform::mono(vec![], TARGET_RATE, "e");
    assert!(matches!(normalize(&w), Err(Error::EmptyInput(_))));
}

#[test]
fn upsampling_doubles_the_length() {
    for n in [1usize, 2, 999, 22_050, 22_051] {
        let w = Waveform::mono(vec![0.1; n], 22_050, "r");
        let len = normalize(&w).unwrap().samples.len();
        assert!(len.abs_diff(2 * n) <= 1, "{n} -> {len}");
    }
}

#[test]
fn sine_keeps_its_bin_after_resampling() {
    for (rate, freq) in [(22_050u32, 1000.0), (48_000, 3000.0), (32_000, 440.0)] {
        let x: Vec<f64> = (0..rate as usize)
            .map(|i| 0.8 * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect();
        let n = normalize(&Waveform::mono(x, rate, "s")).unwrap();
        let mag = stft(&n.samples, StftConfig::default(), TARGET_RATE).unwrap().magnitude;
        let mid = mag.n_frames / 2;
        let frame = mag.frame(mid);
        let peak = (0..frame.len()).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
        let expected = freq * 2048.0 / TARGET_RATE as f64;
        assert!((peak as f64 - expected).abs() <= 1.0, "{rate}: {peak} vs {expected}");
    }
}

#[test]
fn segment_counts() {
    let mk = |secs: f64| Waveform::mono(vec![0.0; (secs * 44_100.0).round() as usize], 44_100, "t");
    let s = segment(&mk(30.0), 4.0).unwrap();
    assert_eq!(s.segments.len(), 7);
    assert!(s.segments.iter().all(|x| x.len() == 176_400));
    assert_eq!(segment(&mk(4.0), 4.0).unwrap().segments.len(), 1);
    match segment(&mk(3.9), 4.0) {
        Err(Error::TooShort { have, .. }) => assert!((have - 3.9).abs() < 1e-9),
        other => panic!("{other:?}"),
    }
}

#[test]
fn segments_keep_temporal_order() {
    let w = Waveform::mono((0..10).map(f64::from).collect(), 2, "o");
    let s = segment(&w, 2.0).unwrap();
    assert_eq!(s.segments, vec![vec![0.0, 1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0, 7.0]]);
}

#[test]
fn equal_rates_pass_through() {
    let x = vec![0.3, -0.2, 0.9];
    assert_eq!(resample(&x, 44_100, 44_100), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn normalize_is_idempotent_and_bounded(
        x in prop::collection::vec(-2.0f64..2.0, 1..600),
        rate in prop::sample::select(vec![8000u32, 22_050, 44_100, 48_000]),
        channels in 1u16..3,
    ) {
        let len = x.len() - x.len() % channels as usize;
        prop_assume!(len > 0);
        let w = Waveform { samples: x[..len].to_vec(), channels, sample_rate: rate, source_path: "p".into() };
        let once = normalize(&w).unwrap();
        prop_assert!(once.samples.iter().all(|s| (-1.0..=1.0).contains(s)));
        prop_assert_eq!(once.sample_rate, TARGET_RATE);
        let twice = normalize(&once).unwrap();
        prop_assert_eq!(once.samples, twice.samples);
    }

    #[test]
    fn segments_never_fabricate_samples(len in 4usize..2000, secs in 0.001f64..0.02) {
        let w = Waveform::mono(vec![0.0; len], 44_100, "f");
        if let Ok(s) = segment(&w, secs) {
            prop_assert!(s.segments.len() * s.segment_len <= len);
            prop_assert!(s.segments.iter().all(|x| x.len() == s.segment_len));
        }
    }
}

//! WAV decoding, mono 44.1 kHz normalisation and fixed-length segmentation.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

pub const TARGET_RATE: u32 = 44_100;
pub const SEGMENT_SECONDS: f64 = 4.0;
/// Taps per polyphase branch of the resampling filter.
const RESAMPLE_TAPS: usize = 64;
const RESAMPLE_ROLLOFF: f64 = 0.95;
const KAISER_BETA: f64 = 8.6;

/// Interleaved audio samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub channels: u16,
    pub sample_rate: u32,
    pub source_path: String,
}

impl Waveform {
    pub fn mono(samples: Vec<f64>, sample_rate: u32, source_path: impl Into<String>) -> Self {
        Self {
            samples,
            channels: 1,
            sample_rate,
            source_path: source_path.into(),
        }
    }

    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels.max(1) as usize
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }
}

/// Fixed-length windows of one track, in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSet {
    pub track_id: String,
    pub segment_len: usize,
    pub segments: Vec<Vec<f64>>,
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::io(path, io),
        hound::Error::IoError(io) => Error::Format(format!("{}: {}", path.display(), io)),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
        hound::Error::Unsupported => {
            Error::UnsupportedCodec(format!("{}: unsupported WAV encoding", path.display()))
        }
        other => Error::UnsupportedCodec(format!("{}: {}", path.display(), other)),
    }
}

/// Decodes PCM 16/24/32-bit or 32-bit float WAV. Integer samples are
/// scaled by `2^-(bits-1)`; no clipping is applied.
pub fn decode_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound(path, e))?
        }
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedCodec(format!(
                "{}: {:?} with {} bits per sample",
                path.display(),
                fmt,
                bits
            )))
        }
    };
    Ok(Waveform {
        samples,
        channels: spec.channels,
        sample_rate: spec.sample_rate,
        source_path: path.display().to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Writes interleaved samples; PCM16 output is clipped and rounded.
pub fn write_wav(path: &Path, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let spec = hound::WavSpec {
        channels: w.channels,
        sample_rate: w.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &w.samples {
        let r = match encoding {
            WavEncoding::Pcm16 => {
                writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            }
            WavEncoding::Float32 => writer.write_sample(s as f32),
        };
        r.map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

/// Downmix to mono by channel mean, resample to 44.1 kHz, clip to [-1, 1].
pub fn normalize(w: &Waveform) -> Result<Waveform> {
    if w.samples.is_empty() || w.channels == 0 {
        return Err(Error::EmptyInput("waveform"));
    }
    let ch = w.channels as usize;
    let mono: Vec<f64> = if ch == 1 {
        w.samples.clone()
    } else {
        w.samples
            .chunks_exact(ch)
            .map(|f| f.iter().sum::<f64>() / ch as f64)
            .collect()
    };
    let mut out = resample(&mono, w.sample_rate, TARGET_RATE);
    out.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    Ok(Waveform {
        samples: out,
        channels: 1,
        sample_rate: TARGET_RATE,
        source_path: w.source_path.clone(),
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Rational-ratio polyphase resampler with a Kaiser-windowed sinc kernel.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: usize,
    down: usize,
    /// Taps per branch, split evenly around the centre.
    taps: usize,
    /// `table[phase * taps + j]`
    table: Vec<f64>,
}

impl Resampler {
    pub fn new(from: u32, to: u32) -> Self {
        let g = gcd(from as u64, to as u64);
        let up = (to as u64 / g) as usize;
        let down = (from as u64 / g) as usize;
        let span = up.max(down);
        let half_width = (RESAMPLE_TAPS / 2 * span) as f64;
        let cutoff = RESAMPLE_ROLLOFF * 0.5 / span as f64;
        let half_taps = (RESAMPLE_TAPS / 2 * span).div_ceil(up);
        let taps = 2 * half_taps;
        let norm = bessel_i0(KAISER_BETA);
        let mut table = vec![0.0; up * taps];
        for phase in 0..up {
            for j in 0..taps {
                let d = phase as f64 + (j as f64 - half_taps as f64 + 1.0) * up as f64;
                let r = d / half_width;
                if r.abs() >= 1.0 {
                    continue;
                }
                let x = 2.0 * cutoff * d;
                let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let win = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                table[phase * taps + j] = up as f64 * 2.0 * cutoff * sinc * win;
            }
        }
        Self {
            up,
            down,
            taps,
            table,
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len * self.up).div_ceil(self.down)
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if self.up == self.down {
            return x.to_vec();
        }
        let half = self.taps / 2;
        (0..self.output_len(x.len()))
            .map(|m| {
                let p = m * self.down;
                let k0 = p / self.up;
                let phase = p % self.up;
                let row = &self.table[phase * self.taps..(phase + 1) * self.taps];
                let mut acc = 0.0;
                for (j, &h) in row.iter().enumerate() {
                    // input index k = k0 - (j - half + 1)
                    let k = k0 as isize - (j as isize - half as isize + 1);
                    if k >= 0 && (k as usize) < x.len() {
                        acc += h * x[k as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    Resampler::new(from, to).process(x)
}

/// Non-overlapping windows of `seg_seconds`; the incomplete tail is dropped.
pub fn segment(w: &Waveform, seg_seconds: f64) -> Result<SegmentSet> {
    if w.channels != 1 {
        return Err(Error::Config("segment expects a mono waveform".into()));
    }
    let seg_len = (seg_seconds * w.sample_rate as f64).round() as usize;
    if seg_len == 0 {
        return Err(Error::Config(format!("segment length {} s is empty", seg_seconds)));
    }
    let duration = w.duration_seconds();
    if w.samples.len() < seg_len {
        return Err(Error::TooShort {
            what: "track duration (s)",
            have: duration,
            need: seg_seconds,
        });
    }
    Ok(SegmentSet {
        track_id: w.source_path.clone(),
        segment_len: seg_len,
        segments: w
            .samples
            .chunks_exact(seg_len)
            .map(<[f64]>::to_vec)
            .collect(),
    })
}

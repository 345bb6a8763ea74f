//! Harmonic/percussive decomposition of the residual and the seven-channel
//! forensic tensor fed to the classifier.
//!
//! Channel order: `mel_res, mel_H, mel_P, Δ, Δ², hp_ratio, spectral_flux`.
//! The last two are per-frame scalars repeated over the mel axis.
//!
//! Everything here is expressed as tape operations so that the same code
//! serves inference (on a no-grad tape) and classifier steering, where
//! gradients flow from the classifier back into the residual.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Axis, Tape, Tensor, Var};
use crate::spectral::{MagnitudeSpectrogram, MelFilterbank, StftConfig, MEL_LOG_EPS};

pub const N_CHANNELS: usize = 7;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "mel_res",
    "mel_H",
    "mel_P",
    "delta",
    "delta2",
    "hp_ratio",
    "spectral_flux",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub sample_rate: u32,
    pub n_mels: usize,
    /// Median width along time (harmonic enhancement), in frames.
    pub kernel_time: usize,
    /// Median width along frequency (percussive enhancement), in bins.
    pub kernel_freq: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            sample_rate: crate::audio_io::TARGET_RATE,
            n_mels: crate::spectral::DEFAULT_N_MELS,
            kernel_time: 17,
            kernel_freq: 17,
        }
    }
}

/// Feature configuration with its mel filterbank built once.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: FeatureConfig,
    filterbank: Arc<MelFilterbank>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.stft.validate()?;
        check_kernel(config.kernel_time)?;
        check_kernel(config.kernel_freq)?;
        let filterbank = Arc::new(MelFilterbank::new(
            config.n_mels,
            config.stft.n_fft,
            config.sample_rate,
        )?);
        Ok(Self { config, filterbank })
    }

    pub fn filterbank(&self) -> &Arc<MelFilterbank> {
        &self.filterbank
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::Config(format!("HPSS kernel {} must be odd and >= 3", k)));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct HpssResult {
    pub harmonic: MagnitudeSpectrogram,
    pub percussive: MagnitudeSpectrogram,
}

pub struct HpssVars {
    pub harmonic: Var,
    pub percussive: Var,
}

/// Median-filter HPSS with power-2 Wiener masks on a `[1, 1, bins, frames]`
/// magnitude. Cells where both enhanced spectra vanish go to the
/// percussive part.
pub fn hpss_on_tape(
    tape: &Tape,
    mag: &Var,
    kernel_time: usize,
    kernel_freq: usize,
) -> Result<HpssVars> {
    check_kernel(kernel_time)?;
    check_kernel(kernel_freq)?;
    let h_enh = tape.median_filter(mag, Axis::Time, kernel_time)?;
    let p_enh = tape.median_filter(mag, Axis::Freq, kernel_freq)?;
    let h2 = tape.square(&h_enh);
    let p2 = tape.square(&p_enh);
    let mask = tape.div(&h2, &tape.add(&h2, &p2)?)?;
    Ok(HpssVars {
        harmonic: tape.mul(&mask, mag)?,
        percussive: tape.mul(&tape.one_minus(&mask), mag)?,
    })
}

pub fn hpss_decompose(
    mag: &MagnitudeSpectrogram,
    kernel_time: usize,
    kernel_freq: usize,
) -> Result<HpssResult> {
    let tape = Tape::no_grad();
    let x = tape.constant(mag.to_tensor());
    let out = hpss_on_tape(&tape, &x, kernel_time, kernel_freq)?;
    Ok(HpssResult {
        harmonic: MagnitudeSpectrogram::from_tensor(out.harmonic.value(), mag.config, mag.sample_rate)?,
        percussive: MagnitudeSpectrogram::from_tensor(
            out.percussive.value(),
            mag.config,
            mag.sample_rate,
        )?,
    })
}

/// Seven forensic channels, stored channel-major as `7 × n_mels × n_frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
    pub segment_id: String,
}

impl FeatureTensor {
    pub fn from_tensor(t: &Tensor, segment_id: impl Into<String>) -> Result<Self> {
        let [n, c, m, f] = t.dims4();
        if n != 1 || c != N_CHANNELS {
            return Err(Error::shape(
                "feature tensor",
                format!("expected [1, 7, mels, frames], got {:?}", t.shape()),
            ));
        }
        Ok(Self {
            n_mels: m,
            n_frames: f,
            values: t.data().to_vec(),
            segment_id: segment_id.into(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, N_CHANNELS, self.n_mels, self.n_frames],
            self.values.clone(),
        )
        .expect("consistent")
    }

    pub fn get(&self, channel: usize, mel: usize, frame: usize) -> f64 {
        self.values[(channel * self.n_mels + mel) * self.n_frames + frame]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.n_mels * self.n_frames;
        &self.values[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.n_mels * self.n_frames;
        &mut self.values[c * plane..(c + 1) * plane]
    }

    /// Joins segments along the time axis.
    pub fn concat_frames(parts: &[FeatureTensor], id: impl Into<String>) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput("feature segments"))?;
        let m = first.n_mels;
        if parts.iter().any(|p| p.n_mels != m) {
            return Err(Error::shape("concat_frames", "mel counts differ"));
        }
        let total: usize = parts.iter().map(|p| p.n_frames).sum();
        let mut values = vec![0.0; N_CHANNELS * m * total];
        for c in 0..N_CHANNELS {
            for mi in 0..m {
                let mut off = 0;
                for p in parts {
                    let src = &p.values[(c * m + mi) * p.n_frames..(c * m + mi + 1) * p.n_frames];
                    let dst = (c * m + mi) * total + off;
                    values[dst..dst + p.n_frames].copy_from_slice(src);
                    off += p.n_frames;
                }
            }
        }
        Ok(Self {
            n_mels: m,
            n_frames: total,
            values,
            segment_id: id.into(),
        })
    }

    /// Little-endian dump: `u32` channels, mels, frames, then `f32` values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        for d in [N_CHANNELS, self.n_mels, self.n_frames] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }
}

/// Builds the `[1, 7, mels, frames]` feature tensor from a residual
/// magnitude `[1, 1, bins, frames]`.
pub fn channels_on_tape(tape: &Tape, residual: &Var, fx: &FeatureExtractor) -> Result<Var> {
    let [_, _, _, frames] = residual.value().dims4();
    if frames < 3 {
        return Err(Error::TooShort {
            what: "feature frames",
            have: frames as f64,
            need: 3.0,
        });
    }
    let fb = fx.filterbank();
    let m = fb.n_mels;
    let mel_res = tape.log_mel(residual, fb)?;
    let hpss = hpss_on_tape(tape, residual, fx.config.kernel_time, fx.config.kernel_freq)?;
    let mel_h = tape.log_mel(&hpss.harmonic, fb)?;
    let mel_p = tape.log_mel(&hpss.percussive, fb)?;
    let delta = tape.time_diff(&mel_res);
    let delta2 = tape.time_diff2(&mel_res);
    let sum_h = tape.log_eps(&tape.sum_freq(&hpss.harmonic), MEL_LOG_EPS);
    let sum_p = tape.log_eps(&tape.sum_freq(&hpss.percussive), MEL_LOG_EPS);
    let hp_ratio = tape.broadcast_freq(&tape.sub(&sum_h, &sum_p)?, m)?;
    let rise = tape.relu(&delta);
    let flux = tape.sqrt(&tape.sum_freq(&tape.square(&rise)));
    let flux = tape.broadcast_freq(&flux, m)?;
    tape.concat_channels(&[&mel_res, &mel_h, &mel_p, &delta, &delta2, &hp_ratio, &flux])
}

pub fn compute_channels(
    residual: &MagnitudeSpectrogram,
    fx: &FeatureExtractor,
    segment_id: impl Into<String>,
) -> Result<FeatureTensor> {
    let tape = Tape::no_grad();
    let r = tape.constant(residual.to_tensor());
    let out = channels_on_tape(&tape, &r, fx)?;
    FeatureTensor::from_tensor(out.value(), segment_id)
}

pub const DESCRIPTOR_LEN: usize = 103;
pub const DESCRIPTOR_VERSION: &str = "d103-1";
pub const N_BANDS: usize = 8;
const BAND_LOW_HZ: f64 = 20.0;

/// Offline track descriptor.
///
/// | range | content |
/// |---|---|
/// | 0..7 | channel means |
/// | 7..14 | channel standard deviations |
/// | 14..78 | per band (8 log bands, 20 Hz to Nyquist): mean, std, max, skew, excess kurtosis, flux mean, flux std, peak-frame fraction of frame energy |
/// | 78..86 | global log H/P energy, hp_ratio mean/std/min/max, H share, P share, log total energy |
/// | 86..94 | harmonic energy share per band |
/// | 94..101 | lag-1 autocorrelation of each channel's frame means |
/// | 101..103 | spectral-flux mean and std |
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor103 {
    pub values: Vec<f64>,
}

/// Log-spaced band edges in Hz, `N_BANDS + 1` values.
pub fn band_edges(sample_rate: u32) -> Vec<f64> {
    let nyq = sample_rate as f64 / 2.0;
    let ratio = (nyq / BAND_LOW_HZ).ln();
    (0..=N_BANDS)
        .map(|i| BAND_LOW_HZ * (ratio * i as f64 / N_BANDS as f64).exp())
        .collect()
}

fn band_of(freq: f64, edges: &[f64]) -> Option<usize> {
    if freq < edges[0] || freq > edges[N_BANDS] {
        return None;
    }
    Some((0..N_BANDS).find(|&b| freq < edges[b + 1]).unwrap_or(N_BANDS - 1))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let (mean, std) = mean_std(xs);
    if std == 0.0 {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let skew = xs.iter().map(|x| ((x - mean) / std).powi(3)).sum::<f64>() / n;
    let kurt = xs.iter().map(|x| ((x - mean) / std).powi(4)).sum::<f64>() / n - 3.0;
    (skew, kurt)
}

fn lag1_autocorr(xs: &[f64]) -> f64 {
    let (mean, _) = mean_std(xs);
    let den: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    if den == 0.0 || xs.len() < 2 {
        return 0.0;
    }
    xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / den
}

pub fn descriptor_103(
    track_channels: &FeatureTensor,
    residual: &MagnitudeSpectrogram,
    fx: &FeatureExtractor,
) -> Result<Descriptor103> {
    if track_channels.n_frames == 0 || residual.n_frames == 0 {
        return Err(Error::EmptyInput("descriptor input"));
    }
    let mut v = Vec::with_capacity(DESCRIPTOR_LEN);
    let stats: Vec<(f64, f64)> = (0..N_CHANNELS)
        .map(|c| mean_std(track_channels.channel(c)))
        .collect();
    v.extend(stats.iter().map(|s| s.0));
    v.extend(stats.iter().map(|s| s.1));

    let edges = band_edges(residual.sample_rate);
    let bin_hz = residual.config.bin_hz(residual.sample_rate);
    let bands: Vec<Option<usize>> = (0..residual.n_bins)
        .map(|k| band_of(k as f64 * bin_hz, &edges))
        .collect();
    let hpss = hpss_decompose(residual, fx.config.kernel_time, fx.config.kernel_freq)?;

    let frames = residual.n_frames;
    let mut band_energy = vec![vec![0.0; frames]; N_BANDS];
    let mut band_h = [0.0; N_BANDS];
    let mut band_p = [0.0; N_BANDS];
    let (mut eh, mut ep, mut total) = (0.0, 0.0, 0.0);
    for t in 0..frames {
        for (k, band) in bands.iter().enumerate() {
            let r = residual.get(t, k);
            let h = hpss.harmonic.get(t, k);
            let p = hpss.percussive.get(t, k);
            total += r * r;
            eh += h * h;
            ep += p * p;
            if let Some(b) = *band {
                band_energy[b][t] += r * r;
                band_h[b] += h * h;
                band_p[b] += p * p;
            }
        }
    }
    for e in &band_energy {
        let (mean, std) = mean_std(e);
        let max = e.iter().cloned().fold(0.0, f64::max);
        let (skew, kurt) = moments(e);
        let flux: Vec<f64> = e.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let (fmean, fstd) = mean_std(&flux);
        let peak = if max > 0.0 {
            e.iter().filter(|&&x| x >= 0.5 * max).count() as f64 / frames as f64
        } else {
            0.0
        };
        v.extend([mean, std, max, skew, kurt, fmean, fstd, peak]);
    }

    let hp_frames: Vec<f64> = (0..track_channels.n_frames)
        .map(|t| track_channels.get(5, 0, t))
        .collect();
    let (hp_mean, hp_std) = mean_std(&hp_frames);
    let hp_min = hp_frames.iter().cloned().fold(f64::INFINITY, f64::min);
    let hp_max = hp_frames.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let share = |a: f64, b: f64| if a + b > 0.0 { a / (a + b) } else { 0.0 };
    v.extend([
        ((eh + MEL_LOG_EPS) / (ep + MEL_LOG_EPS)).ln(),
        hp_mean,
        hp_std,
        hp_min,
        hp_max,
        share(eh, ep),
        share(ep, eh),
        (total + MEL_LOG_EPS).ln(),
    ]);
    for b in 0..N_BANDS {
        v.push(share(band_h[b], band_p[b]));
    }
    for c in 0..N_CHANNELS {
        let frame_means: Vec<f64> = (0..track_channels.n_frames)
            .map(|t| {
                (0..track_channels.n_mels)
                    .map(|m| track_channels.get(c, m, t))
                    .sum::<f64>()
                    / track_channels.n_mels as f64
            })
            .collect();
        v.push(lag1_autocorr(&frame_means));
    }
    let flux_frames: Vec<f64> = (0..track_channels.n_frames)
        .map(|t| track_channels.get(6, 0, t))
        .collect();
    let (fm, fs) = mean_std(&flux_frames);
    v.extend([fm, fs]);
    debug_assert_eq!(v.len(), DESCRIPTOR_LEN);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("descriptor produced a non-finite value".into()));
    }
    Ok(Descriptor103 { values: v })
}

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{derive_seed, encode_variant, CodecVariant, EncoderTemplates};
use crate::audio_io::{write_wav, WavEncoding, Waveform, TARGET_RATE};
use crate::error::{Error, Result};

/// Source of codec variants for normalised 44.1 kHz mono audio.
pub trait CodecBank: Sync {
    fn name(&self) -> &str;

    /// `track_id` under `variant`, or `None` when the bank lacks it.
    fn render(&self, track_id: &str, samples: &[f64], variant: CodecVariant) -> Result<Option<Vec<f64>>>;
}

/// Every variant is the input itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityBank;

impl CodecBank for IdentityBank {
    fn name(&self) -> &str {
        "identity"
    }

    fn render(&self, _: &str, samples: &[f64], _: CodecVariant) -> Result<Option<Vec<f64>>> {
        Ok(Some(samples.to_vec()))
    }
}

/// A lossy-codec caricature: bins above `lowpass_hz` scaled by
/// `high_gain`, plus white noise of `dither_rel × rms` restricted to
/// frequencies above `dither_from_hz`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedCodec {
    pub lowpass_hz: f64,
    pub high_gain: f64,
    pub dither_from_hz: f64,
    pub dither_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedBank {
    pub seed: u64,
    pub codecs: BTreeMap<CodecVariant, SimulatedCodec>,
}

impl SimulatedBank {
    pub fn new(seed: u64) -> Self {
        let c = |lowpass_hz, high_gain, dither_from_hz, dither_rel| SimulatedCodec {
            lowpass_hz,
            high_gain,
            dither_from_hz,
            dither_rel,
        };
        Self {
            seed,
            codecs: BTreeMap::from([
                (CodecVariant::Mp3_128, c(11_000.0, 0.3, 8_000.0, 0.25)),
                (CodecVariant::Mp3_320, c(19_000.0, 0.8, 12_000.0, 0.05)),
                (CodecVariant::Aac128, c(14_000.0, 0.5, 9_000.0, 0.15)),
                (CodecVariant::Opus128, c(12_000.0, 0.6, 8_000.0, 0.10)),
                (CodecVariant::Opus192, c(18_000.0, 0.8, 10_000.0, 0.05)),
            ]),
        }
    }

    pub fn apply(&self, track_id: &str, samples: &[f64], variant: CodecVariant) -> Result<Vec<f64>> {
        if variant == CodecVariant::Wav {
            return Ok(samples.to_vec());
        }
        let p = self
            .codecs
            .get(&variant)
            .ok_or_else(|| Error::Config(format!("simulated bank has no {variant}")))?;
        let n = samples.len();
        if n == 0 {
            return Err(Error::EmptyInput("codec input"));
        }
        let rms = (samples.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{track_id}/{variant}")));
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let mut x: Vec<Complex64> = samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        let mut d: Vec<Complex64> = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(p.dither_rel * rms * g, 0.0)
            })
            .collect();
        fwd.process(&mut x);
        fwd.process(&mut d);
        let hz = |k: usize| k.min(n - k) as f64 * TARGET_RATE as f64 / n as f64;
        for k in 0..n {
            let f = hz(k);
            if f >= p.lowpass_hz {
                x[k] *= p.high_gain;
            }
            if f >= p.dither_from_hz {
                x[k] += d[k];
            }
        }
        planner.plan_fft_inverse(n).process(&mut x);
        Ok(x.iter().map(|c| (c.re / n as f64).clamp(-1.0, 1.0)).collect())
    }
}

impl CodecBank for SimulatedBank {
    fn name(&self) -> &str {
        "simulated"
    }

    fn render(&self, track_id: &str, samples: &[f64], variant: CodecVariant) -> Result<Option<Vec<f64>>> {
        match variant {
            CodecVariant::Wav => Ok(Some(samples.to_vec())),
            v if self.codecs.contains_key(&v) => self.apply(track_id, samples, v).map(Some),
            _ => Ok(None),
        }
    }
}

/// Runs the external encoders; sources are staged as float WAV under
/// `{workdir}/src/`.
#[derive(Clone, Debug)]
pub struct ExternalBank {
    pub templates: EncoderTemplates,
    pub workdir: PathBuf,
}

impl CodecBank for ExternalBank {
    fn name(&self) -> &str {
        "external"
    }

    fn render(&self, track_id: &str, samples: &[f64], variant: CodecVariant) -> Result<Option<Vec<f64>>> {
        if variant == CodecVariant::Wav {
            return Ok(Some(samples.to_vec()));
        }
        if !self.templates.steps.contains_key(&variant) {
            return Ok(None);
        }
        let src_dir = self.workdir.join("src");
        std::fs::create_dir_all(&src_dir).map_err(|e| Error::io(&src_dir, e))?;
        let src = src_dir.join(format!("{}.wav", track_id.replace(['/', '\\'], "_")));
        write_wav(
            &src,
            &Waveform::mono(samples.to_vec(), TARGET_RATE, track_id),
            WavEncoding::Float32,
        )?;
        let w = encode_variant(&src, track_id, variant, &self.workdir, &self.templates)?;
        Ok(Some(w.samples))
    }
}

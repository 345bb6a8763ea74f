//! Synthetic material with known residuals: harmonic "clean" signals and a
//! band-limited, amplitude-modulated tonal artifact standing in for codec
//! residue.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bench::Label;
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::spectral::MagnitudeSpectrogram;

/// Upper bound on the artifact's share of mixture energy.
pub const MAX_ARTIFACT_FRACTION: f64 = 0.25;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Harmonic stack on a fundamental in 150–600 Hz with `1/k` partials up to
/// 8 kHz, a slow amplitude envelope and a -50 dB noise floor.
pub fn clean_signal<R: Rng + ?Sized>(rng: &mut R, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let f0 = rng.random_range(150.0..600.0);
    let n_harm = ((8000.0 / f0) as usize).clamp(1, 12);
    let partials: Vec<(f64, f64, f64)> = (1..=n_harm)
        .map(|k| (f0 * k as f64, rng.random_range(0.6..1.0) / k as f64, rng.random_range(0.0..2.0 * PI)))
        .collect();
    let env_rate = rng.random_range(0.5..3.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let mut x: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.8 + 0.2 * (2.0 * PI * env_rate * t + env_phase).sin();
            env * partials.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum::<f64>()
        })
        .collect();
    let rms = (energy(&x) / len as f64).sqrt();
    for v in &mut x {
        let n: f64 = StandardNormal.sample(rng);
        *v += 10f64.powf(-50.0 / 20.0) * rms * n;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    x.iter().map(|v| 0.5 * v / peak).collect()
}

/// Parameters of the synthetic artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub band_hz: (f64, f64),
    pub n_tones: usize,
    /// Amplitude-modulation rate range, in Hz.
    pub modulation_hz: (f64, f64),
    pub modulation_depth: f64,
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        Self {
            band_hz: (12_000.0, 18_000.0),
            n_tones: 4,
            modulation_hz: (50.0, 90.0),
            modulation_depth: 0.8,
        }
    }
}

/// Unit-scale artifact; callers rescale it to a target energy.
pub fn artifact_signal<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &ArtifactSpec,
    len: usize,
    sample_rate: u32,
) -> Vec<f64> {
    let sr = sample_rate as f64;
    let tones: Vec<(f64, f64)> = (0..spec.n_tones)
        .map(|_| (rng.random_range(spec.band_hz.0..spec.band_hz.1), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let rate = rng.random_range(spec.modulation_hz.0..spec.modulation_hz.1);
    let mphase = rng.random_range(0.0..2.0 * PI);
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let am = 1.0 - spec.modulation_depth * 0.5 * (1.0 + (2.0 * PI * rate * t + mphase).cos());
            am * tones.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>()
        })
        .collect()
}

/// `base + a`, with `a` scaled so that it carries `fraction` of the sum's
/// energy (cross terms included).
pub fn mix_at_fraction(base: &[f64], artifact: &[f64], fraction: f64) -> (Vec<f64>, Vec<f64>) {
    let eb = energy(base);
    let ea = energy(artifact);
    let cross: f64 = base.iter().zip(artifact).map(|(b, a)| b * a).sum();
    // solve s²·ea·(1 - f) + 2s·cross·(-f) - f·eb = 0 for the positive root
    let (qa, qb, qc) = (ea * (1.0 - fraction), -2.0 * fraction * cross, -fraction * eb);
    let s = if ea > 0.0 {
        (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa)
    } else {
        0.0
    };
    let a: Vec<f64> = artifact.iter().map(|v| v * s).collect();
    let mix = base.iter().zip(&a).map(|(b, a)| b + a).collect();
    (mix, a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherOracle {
    pub seed: u64,
    pub n_pairs: usize,
    /// Artifact share of mixture energy, at most 0.25.
    pub artifact_fraction: f64,
    pub artifact: ArtifactSpec,
    /// Emit all-zero teacher residuals.
    pub zero_residual: bool,
}

impl Default for TeacherOracle {
    fn default() -> Self {
        Self {
            seed: 7,
            n_pairs: 64,
            artifact_fraction: 0.2,
            artifact: ArtifactSpec::default(),
            zero_residual: false,
        }
    }
}

/// One distillation example.
#[derive(Clone, Debug)]
pub struct TeacherPair {
    pub mixture: Vec<f64>,
    pub mixture_magnitude: MagnitudeSpectrogram,
    pub mixture_phase: Vec<f64>,
    /// `min(|STFT(artifact)|, b·|STFT(mixture)|)` per cell, `b` being the
    /// pipeline's mask bound: the artifact clipped to what the mask can
    /// express.
    pub residual: MagnitudeSpectrogram,
}

impl TeacherOracle {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_ARTIFACT_FRACTION).contains(&self.artifact_fraction) {
            return Err(Error::Config(format!(
                "artifact fraction {} outside [0, {MAX_ARTIFACT_FRACTION}]",
                self.artifact_fraction
            )));
        }
        if self.n_pairs == 0 {
            return Err(Error::Config("teacher oracle needs at least one pair".into()));
        }
        Ok(())
    }

    pub fn generate(&self, pipeline: &Pipeline) -> Result<Vec<TeacherPair>> {
        self.validate()?;
        let len = pipeline.config.segment_len;
        let sr = pipeline.config.sample_rate;
        let bound = pipeline.config.unet.mask.scale();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_pairs)
            .map(|_| {
                let base = clean_signal(&mut rng, len, sr);
                let art = artifact_signal(&mut rng, &self.artifact, len, sr);
                let (mixture, a) = mix_at_fraction(&base, &art, self.artifact_fraction);
                let spec = pipeline.spectrum(&mixture)?;
                let mut residual = pipeline.spectrum(&a)?.magnitude;
                for (r, x) in residual.values.iter_mut().zip(&spec.magnitude.values) {
                    *r = if self.zero_residual { 0.0 } else { r.min(bound * x) };
                }
                Ok(TeacherPair {
                    mixture,
                    mixture_magnitude: spec.magnitude,
                    mixture_phase: spec.phase,
                    residual,
                })
            })
            .collect()
    }
}

/// A labelled training or evaluation track (one segment long).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub id: String,
    pub samples: Vec<f64>,
    pub label: Label,
}

/// Balanced set: AI items carry the artifact at `fraction`, real items
/// are clean.
pub fn toy_labeled_set(
    pipeline: &Pipeline,
    n: usize,
    fraction: f64,
    artifact: &ArtifactSpec,
    seed: u64,
) -> Vec<LabeledItem> {
    let len = pipeline.config.segment_len;
    let sr = pipeline.config.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let base = clean_signal(&mut rng, len, sr);
            let label = if i % 2 == 0 { Label::Ai } else { Label::Real };
            let samples = match label {
                Label::Ai => {
                    let art = artifact_signal(&mut rng, artifact, len, sr);
                    mix_at_fraction(&base, &art, fraction).0
                }
                Label::Real => base,
            };
            LabeledItem {
                id: format!("toy{seed}-{i:03}"),
                samples,
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixing_hits_the_requested_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = clean_signal(&mut rng, 2048, 44_100);
        let a = artifact_signal(&mut rng, &ArtifactSpec::default(), 2048, 44_100);
        let (mix, scaled) = mix_at_fraction(&b, &a, 0.2);
        assert!((energy(&scaled) / energy(&mix) - 0.2).abs() < 1e-12);
    }
}

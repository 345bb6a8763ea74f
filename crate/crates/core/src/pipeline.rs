//! End-to-end segment scoring: STFT, residual extraction, forensic channels
//! and the classifier, with the shapes all fixed by one [`PipelineConfig`].

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{self, Waveform, TARGET_RATE};
use crate::error::{Error, Result};
use crate::features::{channels_on_tape, FeatureConfig, FeatureExtractor, FeatureTensor};
use crate::nn::cnn::{logits_on_tape, BnMode};
use crate::nn::unet::residual_on_tape;
use crate::nn::{ops::sigmoid, BoundParams, Var, CnnConfig, ModelWeights, Tape, Tensor, UNetConfig};
use crate::spectral::{MagnitudeSpectrogram, Spectrum, StftConfig, StftPlan};

pub const META_KEY: &str = "pipeline.config";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sample_rate: u32,
    /// Segment length in samples.
    pub segment_len: usize,
    pub stft: StftConfig,
    pub n_mels: usize,
    pub kernel_time: usize,
    pub kernel_freq: usize,
    pub unet: UNetConfig,
    pub cnn: CnnConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_rate: TARGET_RATE,
            segment_len: (audio_io::SEGMENT_SECONDS * TARGET_RATE as f64) as usize,
            stft: StftConfig::default(),
            n_mels: crate::spectral::DEFAULT_N_MELS,
            kernel_time: 17,
            kernel_freq: 17,
            unet: UNetConfig::default(),
            cnn: CnnConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small shapes for the synthetic training tasks: 2048-sample segments,
    /// a 128-point STFT (65 bins × 65 frames) and 16 mel bands.
    pub fn toy() -> Self {
        Self {
            sample_rate: TARGET_RATE,
            segment_len: 2048,
            stft: StftConfig { n_fft: 128, hop: 32 },
            n_mels: 16,
            kernel_time: 9,
            kernel_freq: 9,
            unet: UNetConfig {
                base_channels: 4,
                ..UNetConfig::default()
            },
            cnn: CnnConfig::default(),
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            stft: self.stft,
            sample_rate: self.sample_rate,
            n_mels: self.n_mels,
            kernel_time: self.kernel_time,
            kernel_freq: self.kernel_freq,
        }
    }

    pub fn segment_seconds(&self) -> f64 {
        self.segment_len as f64 / self.sample_rate as f64
    }

    /// Reads the configuration stored in a weight file, falling back to the
    /// defaults when the file carries none.
    pub fn from_weights(w: &ModelWeights) -> Result<Self> {
        match w.meta.get(META_KEY) {
            Some(s) => serde_json::from_str(s)
                .map_err(|e| Error::Weight(format!("bad {META_KEY} metadata: {e}"))),
            None => Ok(Self::default()),
        }
    }

    pub fn stamp(&self, w: &mut ModelWeights) {
        w.meta.insert(
            META_KEY.into(),
            serde_json::to_string(self).expect("serializable"),
        );
        w.meta.insert(
            "unet.config".into(),
            serde_json::to_string(&self.unet).expect("serializable"),
        );
        w.meta.insert(
            "cnn.config".into(),
            serde_json::to_string(&self.cnn).expect("serializable"),
        );
    }
}

/// A configured pipeline with its FFT plan and filterbank built once.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub plan: Arc<StftPlan>,
    pub features: FeatureExtractor,
}

/// Everything computed for one segment in inference mode.
#[derive(Clone, Debug)]
pub struct SegmentOutput {
    pub residual: MagnitudeSpectrogram,
    pub mask_mean: f64,
    pub features: FeatureTensor,
    pub probability: f64,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.unet.validate()?;
        Ok(Self {
            plan: Arc::new(StftPlan::new(config.stft)?),
            features: FeatureExtractor::new(config.feature_config())?,
            config,
        })
    }

    pub fn spectrum(&self, samples: &[f64]) -> Result<Spectrum> {
        self.plan.analyze(samples, self.config.sample_rate)
    }

    /// Feature tensor `[1, 7, mels, frames]` of the residual of `mag`, with
    /// the residual and mask kept for inspection.
    pub fn forward_on_tape(
        &self,
        tape: &Tape,
        p: &BoundParams,
        mag: &Var,
    ) -> Result<(crate::nn::unet::UNetOutput, Var)> {
        let out = residual_on_tape(tape, p, &self.config.unet, mag)?;
        let feats = channels_on_tape(tape, &out.residual, &self.features)?;
        Ok((out, feats))
    }

    pub fn logit_on_tape(&self, tape: &Tape, p: &BoundParams, feats: &Var) -> Result<Var> {
        Ok(logits_on_tape(tape, p, &self.config.cnn, feats, BnMode::Eval)?.0)
    }

    pub fn check_weights(&self, w: &ModelWeights) -> Result<()> {
        self.config.unet.check_weights(w)?;
        self.config.cnn.check_weights(w)
    }

    /// Scores one magnitude spectrogram.
    pub fn score_magnitude(&self, mag: &MagnitudeSpectrogram, w: &ModelWeights) -> Result<SegmentOutput> {
        let tape = Tape::no_grad();
        let p = BoundParams::bind(&tape, w, |_| false);
        let x = tape.constant(mag.to_tensor());
        let (out, feats) = self.forward_on_tape(&tape, &p, &x)?;
        let logit = self.logit_on_tape(&tape, &p, &feats)?;
        Ok(SegmentOutput {
            residual: MagnitudeSpectrogram::from_tensor(out.residual.value(), mag.config, mag.sample_rate)?,
            mask_mean: out.mask.value().mean(),
            features: FeatureTensor::from_tensor(feats.value(), "")?,
            probability: sigmoid(logit.value().item()),
        })
    }

    pub fn score_segment(&self, samples: &[f64], w: &ModelWeights) -> Result<SegmentOutput> {
        let spec = self.spectrum(samples)?;
        self.score_magnitude(&spec.magnitude, w)
    }

    /// Segment probabilities of a decoded waveform, in temporal order.
    pub fn score_waveform(&self, w: &Waveform, weights: &ModelWeights) -> Result<Vec<f64>> {
        self.check_weights(weights)?;
        let norm = audio_io::normalize(w)?;
        let seg = audio_io::segment(&norm, self.config.segment_seconds())?;
        seg.segments
            .par_iter()
            .map(|s| Ok(self.score_segment(s, weights)?.probability))
            .collect()
    }

    /// Magnitudes of a single segment as a tape tensor.
    pub fn magnitude_tensor(&self, samples: &[f64]) -> Result<Tensor> {
        Ok(self.spectrum(samples)?.magnitude.to_tensor())
    }
}

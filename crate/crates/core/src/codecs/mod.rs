//! Codec variants through external encoders or a simulated stand-in, the
//! cross-codec probability spread and the per-codec detection sweep.

mod bank;
mod external;
mod sweep;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bank::{CodecBank, ExternalBank, IdentityBank, SimulatedBank, SimulatedCodec};
pub use external::{encode_variant, EncoderTemplates, ENCODER_DIR_ENV};
pub use sweep::{codec_sweep, render_table, CodecSweepReport, SweepFailure, SweepRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CodecVariant {
    #[serde(rename = "wav")]
    Wav,
    #[serde(rename = "mp3-128")]
    Mp3_128,
    #[serde(rename = "mp3-320")]
    Mp3_320,
    #[serde(rename = "aac-128")]
    Aac128,
    #[serde(rename = "opus-128")]
    Opus128,
    #[serde(rename = "opus-192")]
    Opus192,
}

impl CodecVariant {
    pub const ALL: [CodecVariant; 6] = [
        CodecVariant::Wav,
        CodecVariant::Mp3_128,
        CodecVariant::Mp3_320,
        CodecVariant::Aac128,
        CodecVariant::Opus128,
        CodecVariant::Opus192,
    ];

    /// The four variants every codec-aware training batch carries.
    pub const TRAINING: [CodecVariant; 4] = [
        CodecVariant::Wav,
        CodecVariant::Mp3_128,
        CodecVariant::Aac128,
        CodecVariant::Opus128,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CodecVariant::Wav => "wav",
            CodecVariant::Mp3_128 => "mp3-128",
            CodecVariant::Mp3_320 => "mp3-320",
            CodecVariant::Aac128 => "aac-128",
            CodecVariant::Opus128 => "opus-128",
            CodecVariant::Opus192 => "opus-192",
        }
    }

    /// Extension of the intermediate encoded file.
    pub fn extension(self) -> &'static str {
        match self {
            CodecVariant::Wav => "wav",
            CodecVariant::Mp3_128 | CodecVariant::Mp3_320 => "mp3",
            CodecVariant::Aac128 => "m4a",
            CodecVariant::Opus128 | CodecVariant::Opus192 => "opus",
        }
    }

    /// Parses a comma-separated list such as `wav,mp3-128`.
    pub fn parse_list(s: &str) -> Result<Vec<CodecVariant>> {
        s.split(',').map(|v| v.trim().parse()).collect()
    }
}

impl fmt::Display for CodecVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodecVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CodecVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = CodecVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown codec variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Spread of per-codec mean probabilities for one class: the largest
/// codec mean minus the smallest. Every codec must cover the same tracks.
pub fn cross_codec_delta(per_codec: &BTreeMap<CodecVariant, BTreeMap<String, f64>>) -> Result<f64> {
    let mut iter = per_codec.iter();
    let Some((first_codec, first)) = iter.next() else {
        return Ok(0.0);
    };
    for (codec, probs) in iter {
        if probs.len() != first.len() || !probs.keys().eq(first.keys()) {
            return Err(Error::Alignment(format!(
                "codec {codec} covers {} tracks, {first_codec} covers {}; track sets differ",
                probs.len(),
                first.len()
            )));
        }
    }
    if first.is_empty() {
        return Ok(0.0);
    }
    let means: Vec<f64> = per_codec
        .values()
        .map(|p| p.values().sum::<f64>() / p.len() as f64)
        .collect();
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Stable per-(seed, key) sub-seed.
pub(crate) fn derive_seed(seed: u64, key: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let h = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(key.as_bytes()).finalize();
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

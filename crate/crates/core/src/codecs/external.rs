use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::CodecVariant;
use crate::audio_io::{decode_wav, normalize, Waveform};
use crate::error::{Error, Result};

/// Directory searched first for encoder programs.
pub const ENCODER_DIR_ENV: &str = "ARTIFACT_ENCODER_DIR";

/// Encoder command templates per variant. Each variant runs its steps in
/// order; tokens are split on whitespace before substitution, so paths
/// with spaces stay one argument and nothing passes through a shell.
///
/// Placeholders: `{in}` source file, `{mid}` encoded intermediate
/// (`{workdir}/{variant}/{track_id}.{ext}`), `{out}` decoded WAV
/// (`{workdir}/{variant}/{track_id}.wav`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTemplates {
    pub steps: BTreeMap<CodecVariant, Vec<String>>,
    #[serde(default)]
    pub tool_dir: Option<PathBuf>,
}

impl Default for EncoderTemplates {
    fn default() -> Self {
        let ff = |args: &str| {
            vec![
                format!("ffmpeg -nostdin -y -loglevel error -i {{in}} {args} {{mid}}"),
                "ffmpeg -nostdin -y -loglevel error -i {mid} -c:a pcm_f32le {out}".to_string(),
            ]
        };
        let steps = BTreeMap::from([
            (CodecVariant::Mp3_128, ff("-c:a libmp3lame -b:a 128k")),
            (CodecVariant::Mp3_320, ff("-c:a libmp3lame -b:a 320k")),
            (CodecVariant::Aac128, ff("-c:a aac -b:a 128k")),
            (CodecVariant::Opus128, ff("-c:a libopus -b:a 128k")),
            (CodecVariant::Opus192, ff("-c:a libopus -b:a 192k")),
        ]);
        Self { steps, tool_dir: None }
    }
}

impl EncoderTemplates {
    /// Defaults with the tool directory taken from the environment.
    pub fn from_env() -> Self {
        Self {
            tool_dir: std::env::var_os(ENCODER_DIR_ENV).map(PathBuf::from),
            ..Self::default()
        }
    }

    /// Reads a JSON object mapping variant names to step lists; variants it
    /// names replace the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let steps: BTreeMap<CodecVariant, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut t = Self::from_env();
        t.steps.extend(steps);
        Ok(t)
    }

    fn program(&self, name: &str) -> PathBuf {
        match &self.tool_dir {
            Some(dir) if dir.join(name).is_file() => dir.join(name),
            _ => PathBuf::from(name),
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn run_step(template: &str, templates: &EncoderTemplates, subst: &[(&str, &Path)]) -> Result<()> {
    let mut tokens = template.split_whitespace().map(|tok| {
        subst.iter().fold(tok.to_string(), |acc, (k, v)| {
            acc.replace(k, &v.to_string_lossy())
        })
    });
    let prog = tokens
        .next()
        .ok_or_else(|| Error::Config("empty encoder template".into()))?;
    let args: Vec<String> = tokens.collect();
    let program = templates.program(&prog);
    let output = Command::new(&program).args(&args).output().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Environment(format!(
                "encoder `{}` not found (expected command: {template}); install it or set {ENCODER_DIR_ENV}",
                program.display()
            ))
        } else {
            Error::Environment(format!("cannot run `{}`: {e}", program.display()))
        }
    })?;
    if !output.status.success() {
        return Err(Error::Encoder {
            command: format!("{} {}", program.display(), args.join(" ")),
            status: output.status.code().unwrap_or(-1),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    Ok(())
}

/// Encodes `track` as `variant` and decodes it back, returning normalised
/// audio. The `wav` variant decodes the source directly.
pub fn encode_variant(
    track: &Path,
    track_id: &str,
    variant: CodecVariant,
    workdir: &Path,
    templates: &EncoderTemplates,
) -> Result<Waveform> {
    if variant == CodecVariant::Wav {
        return normalize(&decode_wav(track)?);
    }
    let steps = templates
        .steps
        .get(&variant)
        .ok_or_else(|| Error::Config(format!("no encoder template for {variant}")))?;
    let dir = workdir.join(variant.name());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = sanitize(track_id);
    let mid = dir.join(format!("{stem}.{}", variant.extension()));
    let out = dir.join(format!("{stem}.wav"));
    for step in steps {
        run_step(step, templates, &[("{in}", track), ("{mid}", &mid), ("{out}", &out)])?;
    }
    normalize(&decode_wav(&out)?)
}

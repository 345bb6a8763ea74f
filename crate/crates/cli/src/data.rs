//! Loading helpers shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rfx_core::audio_io::{decode_wav, normalize, segment};
use rfx_core::bench::{read_predictions, BenchOrigin, Manifest, PredictionRecord};
use rfx_core::codecs::{CodecBank, EncoderTemplates, ExternalBank, IdentityBank, SimulatedBank};
use rfx_core::nn::{load_weights, save_weights, ModelWeights};
use rfx_core::pipeline::{Pipeline, PipelineConfig};
use rfx_core::training::LabeledItem;

use crate::args::{BankArg, OriginArg};

pub fn origin(o: OriginArg) -> Option<BenchOrigin> {
    match o {
        OriginArg::Train => Some(BenchOrigin::Train),
        OriginArg::Test => Some(BenchOrigin::Test),
        OriginArg::All => None,
    }
}

/// Weights plus the pipeline their metadata describes.
pub fn load_model(path: &Path) -> Result<(Pipeline, ModelWeights)> {
    let w = load_weights(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = PipelineConfig::from_weights(&w)?;
    Ok((Pipeline::new(cfg)?, w))
}

pub fn save_model(pipeline: &Pipeline, mut w: ModelWeights, path: &Path) -> Result<()> {
    pipeline.config.stamp(&mut w);
    save_weights(&w, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `[MODEL=]PATH` pairs; unnamed files are named after their stem.
pub fn read_pred_args(specs: &[String]) -> Result<Vec<(String, Vec<PredictionRecord>)>> {
    let mut out: Vec<(String, Vec<PredictionRecord>)> = Vec::new();
    for s in specs {
        let (name, path) = match s.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(s);
                let n = p.file_stem().map_or(s.clone(), |n| n.to_string_lossy().into_owned());
                (n, p)
            }
        };
        if out.iter().any(|(n, _)| *n == name) {
            anyhow::bail!(rfx_core::Error::Config(format!("model name `{name}` given twice in --pred")));
        }
        let recs = read_predictions(&path).with_context(|| format!("reading {}", path.display()))?;
        out.push((name, recs));
    }
    Ok(out)
}

/// Every segment of every manifest track in `origin`, as labeled items
/// with ids `{track}#{segment}`.
pub fn manifest_items(pipeline: &Pipeline, manifest: &Manifest, origin: Option<BenchOrigin>) -> Result<Vec<LabeledItem>> {
    let mut items = Vec::new();
    for e in manifest.filtered(origin) {
        let w = decode_wav(Path::new(&e.path)).and_then(|w| normalize(&w))?;
        let seg = segment(&w, pipeline.config.segment_seconds())?;
        for (i, s) in seg.segments.into_iter().enumerate() {
            items.push(LabeledItem {
                id: format!("{}#{i}", e.id),
                samples: s,
                label: e.label,
            });
        }
    }
    if items.is_empty() {
        anyhow::bail!(rfx_core::Error::Config("manifest partition holds no tracks".into()));
    }
    Ok(items)
}

/// Scratch directory that is removed on drop when it was not user-given.
pub struct Workdir {
    pub path: PathBuf,
    owned: bool,
}

impl Workdir {
    pub fn new(given: Option<&PathBuf>) -> Result<Self> {
        let (path, owned) = match given {
            Some(p) => (p.clone(), false),
            None => (std::env::temp_dir().join(format!("rfx-work-{}", std::process::id())), true),
        };
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { path, owned })
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        if self.owned {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}

pub fn codec_bank(kind: BankArg, templates: Option<&PathBuf>, workdir: &Workdir, seed: u64) -> Result<Box<dyn CodecBank>> {
    Ok(match kind {
        BankArg::Identity => Box::new(IdentityBank),
        BankArg::Simulated => Box::new(SimulatedBank::new(seed)),
        BankArg::External => Box::new(ExternalBank {
            templates: match templates {
                Some(p) => EncoderTemplates::load(p)?,
                None => EncoderTemplates::from_env(),
            },
            workdir: workdir.path.clone(),
        }),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

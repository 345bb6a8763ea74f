use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cross_codec_delta, CodecBank, CodecVariant};
use crate::audio_io::{decode_wav, normalize, Waveform, TARGET_RATE};
use crate::bench::{BenchOrigin, Confusion, Label, Manifest, PredictionRecord, Status};
use crate::error::{Error, Result};
use crate::nn::ModelWeights;
use crate::pipeline::Pipeline;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: CodecVariant,
    pub n_ok: usize,
    pub n_failed: usize,
    pub tpr: f64,
    pub fpr: f64,
    /// `100 · (TPR − TPR_wav)`; absent when WAV is not swept.
    pub delta_tpr_pp: Option<f64>,
    pub mean_prob_ai: Option<f64>,
    pub mean_prob_real: Option<f64>,
    /// Silent decodes or a constant probability across ≥ 2 tracks.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub track_id: String,
    pub variant: CodecVariant,
    pub error: String,
    /// The encoder program could not be found or started, as opposed to
    /// a failure on this particular track.
    #[serde(default)]
    pub environment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecSweepReport {
    pub tau: f64,
    pub bank: String,
    pub rows: Vec<SweepRow>,
    /// Cross-codec spreads over tracks scored under every variant.
    pub delta_ai: f64,
    pub delta_real: f64,
    /// The same spreads over segment probabilities, keyed by track and
    /// segment index; segments absent from any variant are skipped.
    pub delta_ai_segments: f64,
    pub delta_real_segments: f64,
    pub failures: Vec<SweepFailure>,
    /// Per-variant records, failed tracks included, ready for
    /// missing-prediction accounting.
    pub predictions: BTreeMap<CodecVariant, Vec<PredictionRecord>>,
    pub notes: Vec<String>,
}

impl CodecSweepReport {
    /// Per-variant record lists keyed by variant name.
    pub fn predictions_by_model(&self) -> BTreeMap<String, Vec<PredictionRecord>> {
        self.predictions
            .iter()
            .map(|(v, p)| (v.name().to_string(), p.clone()))
            .collect()
    }

    pub fn write_rows_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("csv: {e}")))?;
        w.write_record(["variant", "n_ok", "n_failed", "tpr", "fpr", "delta_tpr_pp", "degenerate"])
            .map_err(|e| Error::Parse(format!("csv: {e}")))?;
        for r in &self.rows {
            w.write_record([
                r.variant.name().to_string(),
                r.n_ok.to_string(),
                r.n_failed.to_string(),
                r.tpr.to_string(),
                r.fpr.to_string(),
                r.delta_tpr_pp.map(|d| d.to_string()).unwrap_or_default(),
                r.degenerate.to_string(),
            ])
            .map_err(|e| Error::Parse(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct Outcome {
    record: PredictionRecord,
    silent: bool,
    environment: bool,
}

fn score_variant(
    pipeline: &Pipeline,
    weights: &ModelWeights,
    bank: &dyn CodecBank,
    id: &str,
    samples: &[f64],
    variant: CodecVariant,
    tau: f64,
) -> Result<Outcome> {
    let rendered = bank
        .render(id, samples, variant)?
        .ok_or_else(|| Error::IncompleteBank {
            track: id.to_string(),
            codec: variant.name().to_string(),
        })?;
    let silent = rendered.iter().all(|&s| s == 0.0);
    let probs = pipeline.score_waveform(&Waveform::mono(rendered, TARGET_RATE, id), weights)?;
    Ok(Outcome {
        record: PredictionRecord::scored(id, probs, tau)?,
        silent,
        environment: false,
    })
}

/// Scores every manifest track under every variant. Failures are recorded
/// per (track, variant) and the sweep continues.
pub fn codec_sweep(
    pipeline: &Pipeline,
    weights: &ModelWeights,
    manifest: &Manifest,
    variants: &[CodecVariant],
    bank: &dyn CodecBank,
    tau: f64,
    origin: Option<BenchOrigin>,
) -> Result<CodecSweepReport> {
    pipeline.check_weights(weights)?;
    if variants.is_empty() {
        return Err(Error::Config("codec sweep needs at least one variant".into()));
    }
    if (1..variants.len()).any(|i| variants[..i].contains(&variants[i])) {
        return Err(Error::Config("codec sweep variants must be distinct".into()));
    }
    let entries = manifest.filtered(origin);
    let per_track: Vec<Vec<Outcome>> = entries
        .par_iter()
        .map(|e| {
            let decoded = decode_wav(Path::new(&e.path)).and_then(|w| normalize(&w));
            variants
                .iter()
                .map(|&v| match &decoded {
                    Err(err) => Outcome {
                        record: PredictionRecord::failed(&e.id, Status::DecodeError, err.to_string()),
                        silent: false,
                        environment: false,
                    },
                    Ok(w) => score_variant(pipeline, weights, bank, &e.id, &w.samples, v, tau)
                        .unwrap_or_else(|err| Outcome {
                            environment: matches!(err, Error::Environment(_)),
                            record: PredictionRecord::failed(&e.id, Status::Missing, err.to_string()),
                            silent: false,
                        }),
                })
                .collect()
        })
        .collect();

    let mut predictions: BTreeMap<CodecVariant, Vec<PredictionRecord>> =
        variants.iter().map(|&v| (v, Vec::new())).collect();
    let mut failures = Vec::new();
    let mut silent: BTreeMap<CodecVariant, usize> = variants.iter().map(|&v| (v, 0)).collect();
    for outcomes in per_track {
        for (&v, o) in variants.iter().zip(outcomes) {
            if let Some(err) = &o.record.error {
                failures.push(SweepFailure {
                    track_id: o.record.id.clone(),
                    variant: v,
                    error: err.clone(),
                    environment: o.environment,
                });
            }
            *silent.get_mut(&v).expect("variant") += o.silent as usize;
            predictions.get_mut(&v).expect("variant").push(o.record);
        }
    }

    let label_of = |id: &str| manifest.get(id).map(|e| e.label).expect("manifest id");
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for &v in variants {
        let recs = &predictions[&v];
        let mut c = Confusion::default();
        let (mut ai, mut real) = (Vec::new(), Vec::new());
        for r in recs.iter().filter(|r| r.is_ok()) {
            let p = r.song_prob.expect("ok record");
            let l = label_of(&r.id);
            c.add(l, r.verdict.expect("ok record"));
            match l {
                Label::Ai => ai.push(p),
                Label::Real => real.push(p),
            }
        }
        let m = crate::bench::MetricsBlock::from_confusion(c, tau, None);
        let all: Vec<f64> = ai.iter().chain(&real).copied().collect();
        let constant = all.len() >= 2 && all.iter().all(|&p| p == all[0]);
        let n_silent = silent[&v];
        if n_silent > 0 {
            notes.push(format!("{v}: {n_silent} track(s) decoded to silence"));
        }
        if constant {
            notes.push(format!("{v}: every track received the same probability {}", all[0]));
        }
        let mean = |x: &[f64]| (!x.is_empty()).then(|| x.iter().sum::<f64>() / x.len() as f64);
        rows.push(SweepRow {
            variant: v,
            n_ok: c.total(),
            n_failed: recs.len() - c.total(),
            tpr: m.recall,
            fpr: m.fpr,
            delta_tpr_pp: None,
            mean_prob_ai: mean(&ai),
            mean_prob_real: mean(&real),
            degenerate: n_silent > 0 || constant,
        });
    }
    if let Some(wav) = rows.iter().find(|r| r.variant == CodecVariant::Wav).map(|r| r.tpr) {
        for r in &mut rows {
            r.delta_tpr_pp = Some(100.0 * (r.tpr - wav));
        }
    }

    // tracks scored under every variant
    let ok_sets: Vec<HashSet<&str>> = predictions
        .values()
        .map(|recs| recs.iter().filter(|r| r.is_ok()).map(|r| r.id.as_str()).collect())
        .collect();
    let complete: HashSet<&str> = entries
        .iter()
        .map(|e| e.id.as_str())
        .filter(|id| ok_sets.iter().all(|s| s.contains(id)))
        .collect();
    let delta_for = |class: Label, segments: bool| -> Result<f64> {
        let mut per_codec: BTreeMap<CodecVariant, BTreeMap<String, f64>> = predictions
            .iter()
            .map(|(v, recs)| {
                let mut probs = BTreeMap::new();
                for r in recs
                    .iter()
                    .filter(|r| complete.contains(&r.id.as_str()) && label_of(&r.id) == class)
                {
                    if segments {
                        for (i, &p) in r.segment_probs.iter().enumerate() {
                            probs.insert(format!("{}#{i}", r.id), p);
                        }
                    } else {
                        probs.insert(r.id.clone(), r.song_prob.expect("ok record"));
                    }
                }
                (*v, probs)
            })
            .collect();
        if segments {
            let shared: HashSet<String> = per_codec
                .values()
                .map(|m| m.keys().cloned().collect::<HashSet<_>>())
                .reduce(|a, b| a.intersection(&b).cloned().collect())
                .unwrap_or_default();
            per_codec.values_mut().for_each(|m| m.retain(|k, _| shared.contains(k)));
        }
        cross_codec_delta(&per_codec)
    };
    Ok(CodecSweepReport {
        tau,
        bank: bank.name().to_string(),
        delta_ai: delta_for(Label::Ai, false)?,
        delta_real: delta_for(Label::Real, false)?,
        delta_ai_segments: delta_for(Label::Ai, true)?,
        delta_real_segments: delta_for(Label::Real, true)?,
        rows,
        failures,
        predictions,
        notes,
    })
}

/// Codec / TPR / FPR / ΔTPR-vs-WAV table, rates in percent.
pub fn render_table(report: &CodecSweepReport) -> String {
    let mut s = format!(
        "{:<10} {:>8} {:>8} {:>18}\n",
        "Codec", "TPR (%)", "FPR (%)", "ΔTPR vs WAV (pp)"
    );
    for r in &report.rows {
        let d = match r.delta_tpr_pp {
            Some(d) if d == 0.0 => "0.0".to_string(),
            Some(d) => format!("{d:+.1}"),
            None => "n/a".to_string(),
        };
        let flag = if r.degenerate { "  [degenerate]" } else { "" };
        let _ = writeln!(
            s,
            "{:<10} {:>8.1} {:>8.1} {:>18}{flag}",
            r.variant.name(),
            100.0 * r.tpr,
            100.0 * r.fpr,
            d
        );
    }
    s
}

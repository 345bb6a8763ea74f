//! Manifest-driven evaluation: song verdicts, confusion metrics, ROC sweeps,
//! per-subset sanity gates and missing-prediction accounting.

mod accounting;
mod metrics;
mod report;
mod sanity;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use accounting::{dual_accounting, AccountingKind, AccountingPair, ImputationAccounting};
pub use metrics::{
    auc, default_grid, evaluate, f1_score, median_verdict, roc_sweep, Confusion, Evaluation,
    MetricsBlock, RocCurve, RocPoint, SubsetBlock, DEFAULT_TAU,
};
pub use report::{emit_report, parse_report, BenchReport, ReportConfig, ReportFiles, REPORT_SCHEMA};
pub use sanity::{sanity_protocol, SanityConfig, SanityReport, SanityResult, SanityVerdict, SubsetRate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Ai,
    Real,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Ai => "ai",
            Label::Real => "real",
        }
    }

    /// BCE target: 1 for AI, 0 for real.
    pub fn target(self) -> f64 {
        match self {
            Label::Ai => 1.0,
            Label::Real => 0.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ai" => Ok(Label::Ai),
            "real" => Ok(Label::Real),
            other => Err(Error::Parse(format!("label must be ai or real, got `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchOrigin {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: Label,
    #[serde(default)]
    pub generator: String,
    pub source_group: String,
    pub bench_origin: BenchOrigin,
    pub subset: String,
}

/// Ordered manifest with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate manifest id `{}`", e.id)));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(parse_jsonl(text, "manifest")?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    /// Entries restricted to one bench origin.
    pub fn filtered(&self, origin: Option<BenchOrigin>) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| origin.is_none_or(|o| e.bench_origin == o))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Missing,
    DecodeError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default)]
    pub segment_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub song_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Label>,
    pub status: Status,
    /// Diagnostic for non-ok records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn scored(id: impl Into<String>, segment_probs: Vec<f64>, tau: f64) -> Result<Self> {
        let (p, v) = median_verdict(&segment_probs, tau)?;
        Ok(Self {
            id: id.into(),
            segment_probs,
            song_prob: Some(p),
            verdict: Some(v),
            status: Status::Ok,
            error: None,
        })
    }

    pub fn failed(id: impl Into<String>, status: Status, error: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            segment_probs: Vec::new(),
            song_prob: None,
            verdict: None,
            status,
            error: Some(error.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    /// Song probability of an ok record: the median of its segments, or the
    /// stored song probability when an external model gives no segments.
    pub fn song_probability(&self) -> Result<f64> {
        if !self.segment_probs.is_empty() {
            return Ok(median_verdict(&self.segment_probs, DEFAULT_TAU)?.0);
        }
        self.song_prob.ok_or(Error::NoSegments)
    }

    fn validate(&self) -> Result<()> {
        let in_range = |p: f64| (0.0..=1.0).contains(&p);
        if !self.segment_probs.iter().copied().all(in_range) || !self.song_prob.is_none_or(in_range) {
            return Err(Error::Parse(format!("record `{}` has a probability outside [0, 1]", self.id)));
        }
        Ok(())
    }
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    let recs: Vec<PredictionRecord> = parse_jsonl(text, "predictions")?;
    recs.iter().try_for_each(PredictionRecord::validate)?;
    Ok(recs)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    parse_predictions(&read_text(path)?)
}

pub fn write_predictions(path: &Path, recs: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, recs)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("{what} line {}: {e}", i + 1)))
        })
        .collect()
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("serializable");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    AccountingPair, BenchOrigin, Evaluation, RocCurve, SanityConfig, SanityReport,
};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "abr-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub tau: f64,
    pub origin: Option<BenchOrigin>,
    pub manifest_entries: usize,
    pub sanity: SanityConfig,
    /// Free-form echo of the invocation (paths, model names).
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub config: ReportConfig,
    pub evaluation: Evaluation,
    pub sanity: Option<SanityReport>,
    pub roc: Option<RocCurve>,
    pub accounting: Vec<AccountingPair>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl BenchReport {
    pub fn new(config: ReportConfig, evaluation: Evaluation) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            config,
            evaluation,
            sanity: None,
            roc: None,
            accounting: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub subsets_csv: PathBuf,
    pub roc_csv: Option<PathBuf>,
    pub sanity_csv: Option<PathBuf>,
}

pub fn parse_report(text: &str) -> Result<BenchReport> {
    let r: BenchReport =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report: {e}")))?;
    if r.schema != REPORT_SCHEMA {
        return Err(Error::Parse(format!(
            "report schema `{}`, expected `{REPORT_SCHEMA}`",
            r.schema
        )));
    }
    Ok(r)
}

fn companion(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}.{suffix}.csv"))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Parse(format!("csv: {other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SubsetRow<'a> {
    subset: &'a str,
    class: &'a str,
    n_manifest: usize,
    n_missing: usize,
    tp: usize,
    fp: usize,
    tn: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    precision: f64,
    recall: f64,
    f1: f64,
    fpr: f64,
}

/// Writes the JSON report to `path` plus CSV companions next to it:
/// `{stem}.subsets.csv`, and when present `{stem}.roc.csv` and
/// `{stem}.sanity.csv`.
pub fn emit_report(report: &BenchReport, path: &Path) -> Result<ReportFiles> {
    std::fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))?;
    let subsets_csv = companion(path, "subsets");
    write_csv(
        &subsets_csv,
        report.evaluation.subsets.iter().map(|s| SubsetRow {
            subset: &s.name,
            class: s.class.map_or("mixed", |c| c.as_str()),
            n_manifest: s.n_manifest,
            n_missing: s.n_missing,
            tp: s.metrics.tp,
            fp: s.metrics.fp,
            tn: s.metrics.tn,
            fn_: s.metrics.fn_,
            precision: s.metrics.precision,
            recall: s.metrics.recall,
            f1: s.metrics.f1,
            fpr: s.metrics.fpr,
        }),
    )?;
    let roc_csv = match &report.roc {
        Some(roc) => {
            let p = companion(path, "roc");
            write_csv(&p, &roc.points)?;
            Some(p)
        }
        None => None,
    };
    let sanity_csv = match &report.sanity {
        Some(s) => {
            let p = companion(path, "sanity");
            write_csv(&p, &s.verdicts)?;
            Some(p)
        }
        None => None,
    };
    Ok(ReportFiles {
        report: path.to_path_buf(),
        subsets_csv,
        roc_csv,
        sanity_csv,
    })
}

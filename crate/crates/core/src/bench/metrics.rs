use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{BenchOrigin, Label, Manifest, PredictionRecord};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.5;

/// Lower median of the segment probabilities and the verdict `ai` iff the
/// median is at least `tau`.
pub fn median_verdict(segment_probs: &[f64], tau: f64) -> Result<(f64, Label)> {
    if segment_probs.is_empty() {
        return Err(Error::NoSegments);
    }
    let mut s = segment_probs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s[(s.len() - 1) / 2];
    Ok((m, verdict(m, tau)))
}

fn verdict(p: f64, tau: f64) -> Label {
    if p >= tau {
        Label::Ai
    } else {
        Label::Real
    }
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Confusion counts with AI as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Ai, Label::Ai) => self.tp += 1,
            (Label::Ai, Label::Real) => self.fn_ += 1,
            (Label::Real, Label::Ai) => self.fp += 1,
            (Label::Real, Label::Real) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    /// Undefined when one class is absent.
    pub auc: Option<f64>,
    pub threshold: f64,
}

impl MetricsBlock {
    /// Metrics from counts; ratios with a zero denominator are reported as 0.
    pub fn from_confusion(c: Confusion, threshold: f64, auc: Option<f64>) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        Self {
            n: c.total(),
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
            precision,
            recall,
            f1: f1_score(precision, recall),
            fpr: ratio(c.fp, c.fp + c.tn),
            auc,
            threshold,
        }
    }

    pub fn confusion(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            fp: self.fp,
            tn: self.tn,
            fn_: self.fn_,
        }
    }

    pub fn tpr(&self) -> f64 {
        self.recall
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetBlock {
    pub name: String,
    /// The subset's class when all of its entries share one label.
    pub class: Option<Label>,
    pub n_manifest: usize,
    pub n_missing: usize,
    pub metrics: MetricsBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: MetricsBlock,
    pub subsets: Vec<SubsetBlock>,
    /// Manifest ids without an ok prediction, in manifest order.
    pub missing: Vec<String>,
}

/// Song-level scores aligned to manifest entries; `None` for missing ones.
pub(crate) fn align<'m>(
    manifest: &'m Manifest,
    predictions: &[PredictionRecord],
    origin: Option<BenchOrigin>,
) -> Result<Vec<(&'m super::ManifestEntry, Option<f64>)>> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    for r in predictions {
        if manifest.get(&r.id).is_none() {
            return Err(Error::Alignment(format!("prediction for unknown id `{}`", r.id)));
        }
        if by_id.insert(r.id.as_str(), r).is_some() {
            return Err(Error::Alignment(format!("duplicate prediction for `{}`", r.id)));
        }
    }
    manifest
        .filtered(origin)
        .into_iter()
        .map(|e| {
            let score = match by_id.get(e.id.as_str()) {
                Some(r) if r.is_ok() => Some(r.song_probability()?),
                _ => None,
            };
            Ok((e, score))
        })
        .collect()
}

fn auc_of(rows: &[(Label, f64)]) -> Option<f64> {
    let pick = |c: Label| -> Vec<f64> { rows.iter().filter(|r| r.0 == c).map(|r| r.1).collect() };
    let (ai, real) = (pick(Label::Ai), pick(Label::Real));
    auc(&ai, &real).ok()
}

/// Confusion metrics over ok records, overall and per subset. Manifest
/// entries without an ok prediction are listed as missing and excluded.
pub fn evaluate(
    manifest: &Manifest,
    predictions: &[PredictionRecord],
    tau: f64,
    origin: Option<BenchOrigin>,
) -> Result<Evaluation> {
    let aligned = align(manifest, predictions, origin)?;
    let mut overall = Confusion::default();
    let mut scored = Vec::new();
    let mut missing = Vec::new();
    struct Acc {
        labels: Vec<Label>,
        conf: Confusion,
        scored: Vec<(Label, f64)>,
        missing: usize,
    }
    let mut subsets: BTreeMap<&str, Acc> = BTreeMap::new();
    for (e, score) in &aligned {
        let acc = subsets.entry(e.subset.as_str()).or_insert_with(|| Acc {
            labels: Vec::new(),
            conf: Confusion::default(),
            scored: Vec::new(),
            missing: 0,
        });
        acc.labels.push(e.label);
        match score {
            Some(p) => {
                let v = verdict(*p, tau);
                overall.add(e.label, v);
                acc.conf.add(e.label, v);
                scored.push((e.label, *p));
                acc.scored.push((e.label, *p));
            }
            None => {
                missing.push(e.id.clone());
                acc.missing += 1;
            }
        }
    }
    let subsets = subsets
        .into_iter()
        .map(|(name, a)| {
            let class = a.labels.iter().all(|&l| l == a.labels[0]).then(|| a.labels[0]);
            SubsetBlock {
                name: name.to_string(),
                class,
                n_manifest: a.labels.len(),
                n_missing: a.missing,
                metrics: MetricsBlock::from_confusion(a.conf, tau, auc_of(&a.scored)),
            }
        })
        .collect();
    Ok(Evaluation {
        overall: MetricsBlock::from_confusion(overall, tau, auc_of(&scored)),
        subsets,
        missing,
    })
}

/// Mann-Whitney AUC: the probability that a random AI score outranks a
/// random real score, ties counting one half.
pub fn auc(scores_ai: &[f64], scores_real: &[f64]) -> Result<f64> {
    if scores_ai.is_empty() {
        return Err(Error::UndefinedAuc("ai"));
    }
    if scores_real.is_empty() {
        return Err(Error::UndefinedAuc("real"));
    }
    let mut all: Vec<(f64, bool)> = scores_ai
        .iter()
        .map(|&s| (s, true))
        .chain(scores_real.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the U statistic, kept integral so the result depends only on ranks
    let mut u2: u128 = 0;
    let mut real_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut a, mut r) = (0u128, 0u128);
        while j < all.len() && all[j].0.total_cmp(&all[i].0).is_eq() {
            if all[j].1 {
                a += 1;
            } else {
                r += 1;
            }
            j += 1;
        }
        u2 += a * (2 * real_below + r);
        real_below += r;
        i = j;
    }
    Ok(u2 as f64 / (2 * scores_ai.len() * scores_real.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    /// Largest TPR with FPR ≤ 5%; ties go to the lower FPR, then the
    /// higher threshold.
    pub operating_point: Option<RocPoint>,
    pub best_f1: Option<RocPoint>,
    pub auc: Option<f64>,
}

/// `τ ∈ {0.00, 0.01, …, 1.00}`.
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

pub const OPERATING_FPR: f64 = 0.05;

pub fn roc_sweep(scores: &[f64], labels: &[Label], grid: &[f64]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Alignment(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("ROC threshold grid must be sorted ascending".into()));
    }
    let points: Vec<RocPoint> = grid
        .iter()
        .map(|&tau| {
            let mut c = Confusion::default();
            for (&s, &l) in scores.iter().zip(labels) {
                c.add(l, verdict(s, tau));
            }
            let m = MetricsBlock::from_confusion(c, tau, None);
            RocPoint {
                tau,
                tpr: m.recall,
                fpr: m.fpr,
                precision: m.precision,
                f1: m.f1,
            }
        })
        .collect();
    let operating_point = points
        .iter()
        .filter(|p| p.fpr <= OPERATING_FPR)
        .max_by(|a, b| {
            a.tpr
                .total_cmp(&b.tpr)
                .then(b.fpr.total_cmp(&a.fpr))
                .then(a.tau.total_cmp(&b.tau))
        })
        .cloned();
    let best_f1 = points
        .iter()
        .max_by(|a, b| a.f1.total_cmp(&b.f1).then(b.tau.total_cmp(&a.tau)))
        .cloned();
    let rows: Vec<(Label, f64)> = labels.iter().copied().zip(scores.iter().copied()).collect();
    Ok(RocCurve {
        points,
        operating_point,
        best_f1,
        auc: auc_of(&rows),
    })
}

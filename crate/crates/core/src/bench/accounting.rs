use std::collections::{BTreeMap, HashSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::metrics::{align, Confusion, MetricsBlock};
use super::{BenchOrigin, Label, Manifest, PredictionRecord};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccountingKind {
    /// Every model evaluated on the ids all models scored.
    #[serde(rename = "A_exclude")]
    AExclude,
    /// Full denominator; missing reals count as false positives and
    /// missing AI tracks as false negatives.
    #[serde(rename = "B_impute")]
    BImpute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationAccounting {
    pub accounting: AccountingKind,
    pub n_total: usize,
    pub imputed_real: usize,
    pub imputed_ai: usize,
    pub metrics: MetricsBlock,
}

impl ImputationAccounting {
    /// Exact false-positive rate, 0 without real tracks.
    pub fn fpr_exact(&self) -> Ratio<i64> {
        let d = (self.metrics.fp + self.metrics.tn) as i64;
        if d == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(self.metrics.fp as i64, d)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingPair {
    pub model: String,
    pub a: ImputationAccounting,
    pub b: ImputationAccounting,
    /// `fpr(B) - fpr(A)` as a reduced fraction, e.g. `11/10510`.
    pub fpr_shift: String,
    pub fpr_shift_pp: f64,
    /// Set when any missing AI track was imputed; that side of the rule is
    /// a symmetric completion of the real-side rule.
    pub ai_imputation_applied: bool,
}

impl AccountingPair {
    pub fn fpr_shift_exact(&self) -> Ratio<i64> {
        self.b.fpr_exact() - self.a.fpr_exact()
    }
}

/// Both accountings for every model. Accounting A restricts all models to
/// the ids every one of them scored.
pub fn dual_accounting(
    manifest: &Manifest,
    predictions_by_model: &BTreeMap<String, Vec<PredictionRecord>>,
    tau: f64,
    origin: Option<BenchOrigin>,
) -> Result<Vec<AccountingPair>> {
    let mut aligned = BTreeMap::new();
    for (model, preds) in predictions_by_model {
        aligned.insert(model.as_str(), align(manifest, preds, origin)?);
    }
    let scored: Vec<HashSet<&str>> = aligned
        .values()
        .map(|rows| {
            rows.iter()
                .filter(|(_, s)| s.is_some())
                .map(|(e, _)| e.id.as_str())
                .collect()
        })
        .collect();
    let common: HashSet<&str> = manifest
        .filtered(origin)
        .iter()
        .map(|e| e.id.as_str())
        .filter(|id| scored.iter().all(|s| s.contains(id)))
        .collect();
    let verdict = |p: f64| if p >= tau { Label::Ai } else { Label::Real };
    aligned
        .iter()
        .map(|(model, rows)| {
            let mut a = Confusion::default();
            let mut b = Confusion::default();
            let (mut imputed_real, mut imputed_ai) = (0, 0);
            for (e, score) in rows {
                match score {
                    Some(p) => {
                        b.add(e.label, verdict(*p));
                        if common.contains(e.id.as_str()) {
                            a.add(e.label, verdict(*p));
                        }
                    }
                    None => {
                        // imputed as misclassified
                        match e.label {
                            Label::Real => imputed_real += 1,
                            Label::Ai => imputed_ai += 1,
                        }
                        let wrong = match e.label {
                            Label::Real => Label::Ai,
                            Label::Ai => Label::Real,
                        };
                        b.add(e.label, wrong);
                    }
                }
            }
            let a = ImputationAccounting {
                accounting: AccountingKind::AExclude,
                n_total: a.total(),
                imputed_real: 0,
                imputed_ai: 0,
                metrics: MetricsBlock::from_confusion(a, tau, None),
            };
            let b = ImputationAccounting {
                accounting: AccountingKind::BImpute,
                n_total: b.total(),
                imputed_real,
                imputed_ai,
                metrics: MetricsBlock::from_confusion(b, tau, None),
            };
            let shift = b.fpr_exact() - a.fpr_exact();
            Ok(AccountingPair {
                model: model.to_string(),
                fpr_shift: shift.to_string(),
                fpr_shift_pp: 100.0 * *shift.numer() as f64 / *shift.denom() as f64,
                ai_imputation_applied: imputed_ai > 0,
                a,
                b,
            })
        })
        .collect()
}

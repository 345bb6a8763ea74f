use serde::{Deserialize, Serialize};

use super::{Evaluation, Label};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityConfig {
    pub ai_min_tpr: f64,
    /// Relaxed TPR gate for subsets matching `hard_patterns`.
    pub hard_ai_min_tpr: f64,
    pub real_max_fpr: f64,
    /// Matched case-insensitively against subset names with spaces,
    /// underscores and dashes removed.
    pub hard_patterns: Vec<String>,
}

impl Default for SanityConfig {
    fn default() -> Self {
        Self {
            ai_min_tpr: 0.90,
            hard_ai_min_tpr: 0.60,
            real_max_fpr: 0.05,
            hard_patterns: vec!["stable audio".into()],
        }
    }
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| !matches!(c, ' ' | '_' | '-' | '.'))
        .flat_map(char::to_lowercase)
        .collect()
}

impl SanityConfig {
    pub fn is_hard(&self, subset: &str) -> bool {
        let name = squash(subset);
        self.hard_patterns.iter().any(|p| name.contains(&squash(p)))
    }
}

/// One subset's rate: TPR for AI subsets, FPR for real subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRate {
    pub name: String,
    pub class: Option<Label>,
    pub rate: f64,
}

impl SubsetRate {
    /// Rates of every subset with at least one scored record.
    pub fn from_evaluation(ev: &Evaluation) -> Vec<SubsetRate> {
        ev.subsets
            .iter()
            .filter(|s| s.metrics.n > 0)
            .map(|s| SubsetRate {
                name: s.name.clone(),
                class: s.class,
                rate: match s.class {
                    Some(Label::Real) => s.metrics.fpr,
                    _ => s.metrics.recall,
                },
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SanityResult {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityVerdict {
    pub subset: String,
    pub class: Label,
    pub rate: f64,
    pub threshold: f64,
    pub result: SanityResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub verdicts: Vec<SanityVerdict>,
    pub fail_count: usize,
    pub total: usize,
}

/// AI subsets pass iff TPR ≥ their gate, real subsets iff FPR ≤ theirs.
pub fn sanity_protocol(rates: &[SubsetRate], cfg: &SanityConfig) -> Result<SanityReport> {
    let verdicts = rates
        .iter()
        .map(|r| {
            let class = r.class.ok_or_else(|| {
                Error::Config(format!("subset `{}` mixes ai and real tracks", r.name))
            })?;
            let (threshold, pass) = match class {
                Label::Ai => {
                    let t = if cfg.is_hard(&r.name) {
                        cfg.hard_ai_min_tpr
                    } else {
                        cfg.ai_min_tpr
                    };
                    (t, r.rate >= t)
                }
                Label::Real => (cfg.real_max_fpr, r.rate <= cfg.real_max_fpr),
            };
            Ok(SanityVerdict {
                subset: r.name.clone(),
                class,
                rate: r.rate,
                threshold,
                result: if pass { SanityResult::Pass } else { SanityResult::Fail },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SanityReport {
        fail_count: verdicts.iter().filter(|v| v.result == SanityResult::Fail).count(),
        total: verdicts.len(),
        verdicts,
    })
}

//! Staged training at desk scale: residual distillation against a
//! synthetic teacher, classifier fitting, classifier-steered residual
//! refinement and codec-aware refinement, plus the channel and mask-bound
//! ablations.
//!
//! Each phase updates exactly one network. Per-item gradients are computed
//! on independent tapes in parallel and reduced in index order, so results
//! do not depend on the worker count.

mod ablation;
mod oracle;
mod phases;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BoundParams, ModelWeights, Tape, Tensor, Var};

pub use ablation::{
    ablate_channel, ablate_channels, ablation_table, channel_means, unbounded_mask_ablation,
    AblationRow, AblationTable, ChannelMeans, LabeledFeatures, MaskAblationReport, MaskVariantStats,
    UnboundedAblationConfig,
};
pub use oracle::{
    artifact_signal, clean_signal, mix_at_fraction, toy_labeled_set, ArtifactSpec, LabeledItem,
    TeacherOracle, TeacherPair, MAX_ARTIFACT_FRACTION,
};
pub use phases::{
    classifier_features, evaluate_phase1, phase1_distill, phase2_steer, phase3_batch_plan,
    phase3_codec_aware, train_classifier, codec_delta, ClassifierOutcome, Phase3Outcome, TrainOutcome,
};

/// Consecutive steps above the divergence ceiling before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 20;
/// Ceiling on the step loss relative to the first step's loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Residual distillation.
    #[serde(rename = "1")]
    One,
    /// Classifier-steered residual refinement.
    #[serde(rename = "2")]
    Two,
    /// Codec-aware refinement.
    #[serde(rename = "3")]
    Three,
    /// Classifier fitting on fixed residual features.
    #[serde(rename = "cnn")]
    Classifier,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::One => "1",
            Phase::Two => "2",
            Phase::Three => "3",
            Phase::Classifier => "cnn",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Phase::One, Phase::Two, Phase::Three, Phase::Classifier]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase `{s}`; expected 1, 2, 3 or cnn")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball SGD with coefficient [`MOMENTUM`].
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub phase: Phase,
    pub optimizer: Optimizer,
    /// Global gradient-norm ceiling.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// FFT sizes of the reconstruction loss in phase 1.
    #[serde(default = "default_fft_sizes")]
    pub multires_fft_sizes: Vec<usize>,
}

fn default_fft_sizes() -> Vec<usize> {
    vec![512, 1024, 2048]
}

impl TrainConfig {
    pub fn new(phase: Phase) -> Self {
        Self {
            learning_rate: 0.02,
            steps: 200,
            batch_size: 8,
            seed: 7,
            phase,
            optimizer: Optimizer::Momentum,
            grad_clip: Some(1.0),
            multires_fft_sizes: default_fft_sizes(),
        }
    }

    /// Checks ranges and that the config was built for `phase`.
    pub fn validate(&self, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Config(format!(
                "config is for phase {}, used for phase {phase}",
                self.phase
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Per-step losses of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub phase: Phase,
    pub losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CurveRecord {
    phase: Phase,
    step: usize,
    loss: f64,
}

impl LossCurve {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            losses: Vec::new(),
        }
    }

    /// One `{"phase", "step", "loss"}` object per line.
    pub fn to_jsonl(&self) -> String {
        self.losses
            .iter()
            .enumerate()
            .map(|(step, &loss)| {
                let r = CurveRecord {
                    phase: self.phase,
                    step,
                    loss,
                };
                serde_json::to_string(&r).expect("serializable") + "\n"
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Default)]
pub(crate) struct OptimizerState {
    velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    /// Applies one update to the parameters named in `grads`.
    pub(crate) fn step(
        &mut self,
        weights: &mut ModelWeights,
        mut grads: BTreeMap<String, Tensor>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if let Some(clip) = cfg.grad_clip {
            let norm = grads
                .values()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                for g in grads.values_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= clip / norm);
                }
            }
        }
        for (name, g) in grads {
            let update = match cfg.optimizer {
                Optimizer::Sgd => g,
                Optimizer::Momentum => {
                    let v = self
                        .velocity
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    v.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(v, g)| *v = MOMENTUM * *v + g);
                    v.clone()
                }
            };
            let w = weights
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::Weight(format!("missing parameter `{name}`")))?;
            w.data_mut()
                .iter_mut()
                .zip(update.data())
                .for_each(|(w, u)| *w -= cfg.learning_rate * u);
        }
        Ok(())
    }
}

/// Aborts when the loss stays above `10 ×` the first loss for
/// [`DIVERGENCE_PATIENCE`] consecutive steps or turns non-finite.
#[derive(Debug, Default)]
pub(crate) struct DivergenceGuard {
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    pub(crate) fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss, initial });
        }
        if loss > DIVERGENCE_FACTOR * initial {
            self.streak += 1;
            if self.streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence { step, loss, initial });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

/// Epoch-wise shuffled minibatches of distinct items; an epoch's leftover
/// that cannot fill a batch is dropped. Each batch is returned sorted so
/// the gradient reduction order is fixed.
pub(crate) fn minibatches<R: Rng + ?Sized>(rng: &mut R, n: usize, batch: usize, steps: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(steps);
    let take = batch.min(n);
    for _ in 0..steps {
        if order.len() < take {
            order.clear();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            order.extend(perm);
        }
        let mut b: Vec<usize> = order.drain(..take).collect();
        b.sort_unstable();
        out.push(b);
    }
    out
}

/// Loss and gradients of the trainable parameters for one item.
pub(crate) fn item_gradients(
    weights: &ModelWeights,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    loss_fn: impl FnOnce(&Tape, &BoundParams) -> Result<Var>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let p = BoundParams::bind(&tape, weights, trainable);
    let loss = loss_fn(&tape, &p)?;
    let g = tape.backward(&loss);
    let grads = p
        .iter()
        .filter(|(k, _)| trainable(k))
        .map(|(k, v)| (k.clone(), g.get_or_zeros(v)))
        .collect();
    Ok((loss.value().item(), grads))
}

/// Mean loss and mean gradients over `items`, computed in parallel and
/// reduced in item order.
pub(crate) fn batch_gradients<T: Sync>(
    weights: &ModelWeights,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    items: &[T],
    loss_fn: impl Fn(&Tape, &BoundParams, &T) -> Result<Var> + Sync,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let parts: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = items
        .par_iter()
        .map(|it| item_gradients(weights, trainable, |t, p| loss_fn(t, p, it)))
        .collect();
    let n = items.len() as f64;
    let mut loss = 0.0;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (k, t) in g {
            match acc.get_mut(&k) {
                Some(a) => a.add_assign(&t),
                None => {
                    acc.insert(k, t);
                }
            }
        }
    }
    for t in acc.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, acc))
}

/// Byte-level comparison of the entries under `prefix`.
pub(crate) fn assert_unchanged(before: &ModelWeights, after: &ModelWeights, prefix: &str) -> Result<()> {
    for (name, t) in before.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
        let same = after.params.get(name).is_some_and(|u| {
            u.shape() == t.shape()
                && u.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if !same {
            return Err(Error::FrozenViolation(name.clone()));
        }
    }
    Ok(())
}

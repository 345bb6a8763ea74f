use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::oracle::{LabeledItem, TeacherOracle};
use super::phases::{classifier_features, phase1_distill, phase2_steer, stack, train_classifier};
use super::TrainConfig;
use crate::bench::{Confusion, Label, MetricsBlock};
use crate::error::{Error, Result};
use crate::features::{FeatureTensor, CHANNEL_NAMES, N_CHANNELS};
use crate::nn::cnn::{logits_on_tape, BnMode};
use crate::nn::ops::sigmoid;
use crate::nn::{BoundParams, CnnConfig, MaskBound, ModelWeights, Tape};
use crate::pipeline::{Pipeline, PipelineConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: FeatureTensor,
    pub label: Label,
}

/// Per-channel, per-mel training means (averaged over items and frames).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeans {
    pub n_mels: usize,
    /// `means[c][mel]`
    pub means: Vec<Vec<f64>>,
}

pub fn channel_means(train: &[LabeledFeatures]) -> Result<ChannelMeans> {
    let first = &train.first().ok_or(Error::EmptyInput("channel-mean set"))?.features;
    let m = first.n_mels;
    let mut means = vec![vec![0.0; m]; N_CHANNELS];
    for it in train {
        if it.features.n_mels != m {
            return Err(Error::shape("channel means", format!("{} vs {m} mels", it.features.n_mels)));
        }
        for (c, row) in means.iter_mut().enumerate() {
            let ch = it.features.channel(c);
            let frames = it.features.n_frames;
            for (mel, acc) in row.iter_mut().enumerate() {
                *acc += ch[mel * frames..(mel + 1) * frames].iter().sum::<f64>();
            }
        }
    }
    let total: usize = train.iter().map(|it| it.features.n_frames).sum();
    for row in &mut means {
        row.iter_mut().for_each(|v| *v /= total as f64);
    }
    Ok(ChannelMeans { n_mels: m, means })
}

/// Eval-mode probabilities with `channels` overwritten by their mean maps.
pub fn ablate_channels(
    cnn_weights: &ModelWeights,
    cnn_cfg: &CnnConfig,
    eval: &[LabeledFeatures],
    channels: &[usize],
    means: &ChannelMeans,
) -> Result<Vec<f64>> {
    if let Some(&c) = channels.iter().find(|&&c| c >= N_CHANNELS) {
        return Err(Error::Config(format!("channel {c} out of range 0..{N_CHANNELS}")));
    }
    cnn_cfg.check_weights(cnn_weights)?;
    eval.par_iter()
        .map(|it| {
            let mut ft = it.features.clone();
            if ft.n_mels != means.n_mels {
                return Err(Error::shape("ablation", format!("{} vs {} mels", ft.n_mels, means.n_mels)));
            }
            let frames = ft.n_frames;
            for &c in channels {
                let ch = ft.channel_mut(c);
                for (mel, &mu) in means.means[c].iter().enumerate() {
                    ch[mel * frames..(mel + 1) * frames].iter_mut().for_each(|v| *v = mu);
                }
            }
            let tape = Tape::no_grad();
            let p = BoundParams::bind(&tape, cnn_weights, |_| false);
            let x = tape.constant(stack(&[&LabeledFeatures { features: ft, label: it.label }], &[])?);
            let (logit, _) = logits_on_tape(&tape, &p, cnn_cfg, &x, BnMode::Eval)?;
            Ok(sigmoid(logit.value().item()))
        })
        .collect()
}

fn f1_of(eval: &[LabeledFeatures], probs: &[f64], tau: f64) -> f64 {
    let mut c = Confusion::default();
    for (it, &p) in eval.iter().zip(probs) {
        c.add(it.label, if p >= tau { Label::Ai } else { Label::Real });
    }
    MetricsBlock::from_confusion(c, tau, None).f1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the unablated baseline.
    pub channel: Option<usize>,
    pub name: String,
    pub f1: f64,
    /// `F1 − F1_baseline`.
    pub delta_f1: f64,
}

/// F1 change from replacing one channel by its training mean map.
pub fn ablate_channel(
    cnn_weights: &ModelWeights,
    cnn_cfg: &CnnConfig,
    eval: &[LabeledFeatures],
    channel: usize,
    means: &ChannelMeans,
    tau: f64,
) -> Result<AblationRow> {
    if channel >= N_CHANNELS {
        return Err(Error::Config(format!("channel {channel} out of range 0..{N_CHANNELS}")));
    }
    let base = f1_of(eval, &ablate_channels(cnn_weights, cnn_cfg, eval, &[], means)?, tau);
    let f1 = f1_of(eval, &ablate_channels(cnn_weights, cnn_cfg, eval, &[channel], means)?, tau);
    Ok(AblationRow {
        channel: Some(channel),
        name: CHANNEL_NAMES[channel].to_string(),
        f1,
        delta_f1: f1 - base,
    })
}

/// Baseline plus one row per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub tau: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<14} {:>8} {:>9}\n", "Channel", "F1", "ΔF1");
        for r in &self.rows {
            let _ = writeln!(s, "{:<14} {:>8.4} {:>+9.4}", r.name, r.f1, r.delta_f1);
        }
        s
    }
}

pub fn ablation_table(
    cnn_weights: &ModelWeights,
    cnn_cfg: &CnnConfig,
    eval: &[LabeledFeatures],
    means: &ChannelMeans,
    tau: f64,
) -> Result<AblationTable> {
    let base = f1_of(eval, &ablate_channels(cnn_weights, cnn_cfg, eval, &[], means)?, tau);
    let mut rows = vec![AblationRow {
        channel: None,
        name: "baseline".into(),
        f1: base,
        delta_f1: 0.0,
    }];
    for c in 0..N_CHANNELS {
        let f1 = f1_of(eval, &ablate_channels(cnn_weights, cnn_cfg, eval, &[c], means)?, tau);
        rows.push(AblationRow {
            channel: Some(c),
            name: CHANNEL_NAMES[c].to_string(),
            f1,
            delta_f1: f1 - base,
        });
    }
    Ok(AblationTable { tau, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnboundedAblationConfig {
    pub base: PipelineConfig,
    pub phase1: TrainConfig,
    pub classifier: TrainConfig,
    pub phase2: TrainConfig,
    /// Seed of the shared initial weights.
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskVariantStats {
    pub bound: MaskBound,
    pub mask_mean: f64,
    /// `Σ r² / Σ X²` over the labeled set.
    pub energy_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAblationReport {
    pub bounded: MaskVariantStats,
    pub unbounded: MaskVariantStats,
}

fn train_variant(
    bound: MaskBound,
    oracle: &TeacherOracle,
    labeled: &[LabeledItem],
    cfg: &UnboundedAblationConfig,
) -> Result<MaskVariantStats> {
    let mut pc = cfg.base.clone();
    pc.unet.mask = bound;
    let pipeline = Pipeline::new(pc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let unet = pipeline.config.unet.init(&mut rng);
    let cnn = pipeline.config.cnn.init(&mut rng);
    let p1 = phase1_distill(&unet, &pipeline, oracle, &cfg.phase1)?;
    let feats = classifier_features(&pipeline, &p1.weights, labeled)?;
    let clf = train_classifier(&cnn, &pipeline.config.cnn, &feats, &cfg.classifier, &[])?;
    let p2 = phase2_steer(&p1.weights, &clf.outcome.weights, &pipeline, labeled, &cfg.phase2)?;
    let stats: Vec<(f64, f64, f64)> = labeled
        .par_iter()
        .map(|it| {
            let mag = pipeline.spectrum(&it.samples)?.magnitude;
            let out = pipeline.score_magnitude(&mag, &p2.weights)?;
            let er: f64 = out.residual.values.iter().map(|v| v * v).sum();
            Ok((out.mask_mean, er, mag.energy()))
        })
        .collect::<Result<_>>()?;
    let n = stats.len() as f64;
    let (er, ex) = stats.iter().fold((0.0, 0.0), |(a, b), s| (a + s.1, b + s.2));
    Ok(MaskVariantStats {
        bound,
        mask_mean: stats.iter().map(|s| s.0).sum::<f64>() / n,
        energy_fraction: if ex > 0.0 { er / ex } else { 0.0 },
    })
}

/// Trains the bounded and unbounded mask variants from identical initial
/// weights through distillation, classifier fitting and steering, then
/// compares mask means and residual energy fractions.
pub fn unbounded_mask_ablation(
    oracle: &TeacherOracle,
    labeled: &[LabeledItem],
    cfg: &UnboundedAblationConfig,
) -> Result<MaskAblationReport> {
    if labeled.is_empty() {
        return Err(Error::Config("mask ablation needs a labeled set".into()));
    }
    Ok(MaskAblationReport {
        bounded: train_variant(MaskBound::Half, oracle, labeled, cfg)?,
        unbounded: train_variant(MaskBound::Unit, oracle, labeled, cfg)?,
    })
}

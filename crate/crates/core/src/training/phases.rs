use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::oracle::{LabeledItem, TeacherOracle, TeacherPair};
use super::{
    assert_unchanged, batch_gradients, minibatches, DivergenceGuard, LabeledFeatures, LossCurve,
    OptimizerState, Phase, TrainConfig,
};
use crate::codecs::{cross_codec_delta, CodecBank, CodecVariant};
use crate::error::{Error, Result};
use crate::features::{FeatureTensor, N_CHANNELS};
use crate::nn::cnn::{self, logits_on_tape, update_running_stats, BnMode, CnnConfig};
use crate::nn::unet::{self, residual_on_tape};
use crate::nn::{BoundParams, ModelWeights, Tape, Tensor, Var};
use crate::pipeline::Pipeline;
use crate::spectral::{MultiResConfig, MultiResLoss, StftPlan};
use crate::bench::Label;

/// Momentum of the batch-norm running statistics during classifier fitting.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub curve: LossCurve,
    /// Full-set loss before the first step.
    pub initial_loss: f64,
    /// Full-set loss after the last step.
    pub final_loss: f64,
}

fn is_unet(name: &str) -> bool {
    name.starts_with(unet::PREFIX)
}

/// One teacher pair in tape-ready form.
struct DistillItem {
    magnitude: Tensor,
    target: Tensor,
    phase: Arc<Vec<f64>>,
    teacher_wave: Tensor,
    inv_scale: f64,
}

fn prepare_pairs(pipeline: &Pipeline, pairs: &[TeacherPair]) -> Result<Vec<DistillItem>> {
    let len = pipeline.config.segment_len;
    pairs
        .iter()
        .map(|p| {
            let magnitude = p.mixture_magnitude.to_tensor();
            let max = magnitude.max_abs();
            let frames = p.residual.n_frames;
            let teacher_wave = pipeline
                .plan
                .synthesize(&p.residual.values, &p.mixture_phase, frames, len);
            Ok(DistillItem {
                target: p.residual.to_tensor(),
                magnitude,
                phase: Arc::new(p.mixture_phase.clone()),
                teacher_wave: Tensor::new(&[len], teacher_wave)?,
                inv_scale: if max > 0.0 { 1.0 / max } else { 0.0 },
            })
        })
        .collect()
}

fn distill_loss(
    tape: &Tape,
    p: &BoundParams,
    pipeline: &Pipeline,
    loss: &MultiResLoss,
    it: &DistillItem,
) -> Result<Var> {
    let x = tape.constant(it.magnitude.clone());
    let out = residual_on_tape(tape, p, &pipeline.config.unet, &x)?;
    let diff = tape.sub(&out.residual, &tape.constant(it.target.clone()))?;
    let l1 = tape.scale(&tape.mean(&tape.abs(&diff)), it.inv_scale);
    let plan: &Arc<StftPlan> = &pipeline.plan;
    let y = tape.istft(&out.residual, &it.phase, plan, pipeline.config.segment_len)?;
    let mr = loss.on_tape(tape, &y, &tape.constant(it.teacher_wave.clone()))?;
    tape.add(&l1, &mr)
}

fn mean_loss<T: Sync>(items: &[T], f: impl Fn(&Tape, &T) -> Result<f64> + Sync) -> Result<f64> {
    let losses: Vec<f64> = items
        .par_iter()
        .map(|it| f(&Tape::no_grad(), it))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / items.len() as f64)
}

fn multires(cfg: &TrainConfig) -> Result<MultiResLoss> {
    MultiResLoss::new(&MultiResConfig {
        fft_sizes: cfg.multires_fft_sizes.clone(),
    })
}

/// Mean distillation loss of `weights` over `pairs`.
pub fn evaluate_phase1(
    weights: &ModelWeights,
    pipeline: &Pipeline,
    pairs: &[TeacherPair],
    cfg: &TrainConfig,
) -> Result<f64> {
    let items = prepare_pairs(pipeline, pairs)?;
    let loss = multires(cfg)?;
    mean_loss(&items, |tape, it| {
        let p = BoundParams::bind(tape, weights, |_| false);
        Ok(distill_loss(tape, &p, pipeline, &loss, it)?.value().item())
    })
}

/// Fits the residual extractor to the oracle's teacher residuals under
/// L1 on magnitudes plus the multi-resolution loss on reconstructions
/// that reuse the mixture phase.
pub fn phase1_distill(
    unet_weights: &ModelWeights,
    pipeline: &Pipeline,
    oracle: &TeacherOracle,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(Phase::One)?;
    pipeline.config.unet.check_weights(unet_weights)?;
    let pairs = oracle.generate(pipeline)?;
    let items = prepare_pairs(pipeline, &pairs)?;
    let loss = multires(cfg)?;
    let eval = |w: &ModelWeights| {
        mean_loss(&items, |tape, it| {
            let p = BoundParams::bind(tape, w, |_| false);
            Ok(distill_loss(tape, &p, pipeline, &loss, it)?.value().item())
        })
    };
    let mut weights = unet_weights.clone();
    let initial_loss = eval(&weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::default();
    let mut guard = DivergenceGuard::default();
    let mut curve = LossCurve::new(Phase::One);
    for (step, batch) in minibatches(&mut rng, items.len(), cfg.batch_size, cfg.steps).into_iter().enumerate() {
        let chosen: Vec<&DistillItem> = batch.iter().map(|&i| &items[i]).collect();
        let (l, g) = batch_gradients(&weights, &is_unet, &chosen, |tape, p, it| {
            distill_loss(tape, p, pipeline, &loss, it)
        })?;
        guard.observe(step, l)?;
        curve.losses.push(l);
        opt.step(&mut weights, g, cfg)?;
    }
    let final_loss = eval(&weights)?;
    Ok(TrainOutcome {
        weights,
        curve,
        initial_loss,
        final_loss,
    })
}

/// Residual features of each item under the UNet in `weights`.
pub fn classifier_features(
    pipeline: &Pipeline,
    weights: &ModelWeights,
    items: &[LabeledItem],
) -> Result<Vec<LabeledFeatures>> {
    pipeline.config.unet.check_weights(weights)?;
    items
        .par_iter()
        .map(|it| {
            let tape = Tape::no_grad();
            let p = BoundParams::bind(&tape, weights, |_| false);
            let x = tape.constant(pipeline.magnitude_tensor(&it.samples)?);
            let (_, feats) = pipeline.forward_on_tape(&tape, &p, &x)?;
            Ok(LabeledFeatures {
                features: FeatureTensor::from_tensor(feats.value(), it.id.clone())?,
                label: it.label,
            })
        })
        .collect()
}

/// `[n, 7, mels, frames]` batch with `masked` channels zeroed.
pub(crate) fn stack(items: &[&LabeledFeatures], masked: &[usize]) -> Result<Tensor> {
    let first = &items
        .first()
        .ok_or(Error::EmptyInput("feature batch"))?
        .features;
    let (m, f) = (first.n_mels, first.n_frames);
    let mut data = Vec::with_capacity(items.len() * N_CHANNELS * m * f);
    for it in items {
        let ft = &it.features;
        if (ft.n_mels, ft.n_frames) != (m, f) {
            return Err(Error::shape(
                "feature batch",
                format!("{}x{} vs {}x{}", ft.n_mels, ft.n_frames, m, f),
            ));
        }
        for c in 0..N_CHANNELS {
            if masked.contains(&c) {
                data.extend(std::iter::repeat_n(0.0, m * f));
            } else {
                data.extend_from_slice(ft.channel(c));
            }
        }
    }
    Tensor::new(&[items.len(), N_CHANNELS, m, f], data)
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub outcome: TrainOutcome,
    /// Channels zeroed at the input and in the first convolution.
    pub masked_channels: Vec<usize>,
}

fn targets(items: &[&LabeledFeatures]) -> Vec<f64> {
    items.iter().map(|it| it.label.target()).collect()
}

fn classifier_bce(w: &ModelWeights, cfg: &CnnConfig, data: &[&LabeledFeatures], masked: &[usize]) -> Result<f64> {
    let tape = Tape::no_grad();
    let p = BoundParams::bind(&tape, w, |_| false);
    let x = tape.constant(stack(data, masked)?);
    let (logits, _) = logits_on_tape(&tape, &p, cfg, &x, BnMode::Eval)?;
    Ok(tape.bce_with_logits(&logits, &targets(data))?.value().item())
}

/// Fits the classifier on fixed features with batch statistics, then sets
/// the running statistics from one pass over the whole training set.
/// Listed `masked_channels` are zeroed, together with their first-layer
/// weights, so the fitted model cannot depend on them.
pub fn train_classifier(
    cnn_weights: &ModelWeights,
    cnn_cfg: &CnnConfig,
    data: &[LabeledFeatures],
    cfg: &TrainConfig,
    masked_channels: &[usize],
) -> Result<ClassifierOutcome> {
    cfg.validate(Phase::Classifier)?;
    cnn_cfg.check_weights(cnn_weights)?;
    if data.is_empty() {
        return Err(Error::Config("classifier training set is empty".into()));
    }
    if let Some(&c) = masked_channels.iter().find(|&&c| c >= N_CHANNELS) {
        return Err(Error::Config(format!("channel {c} out of range 0..{N_CHANNELS}")));
    }
    let mut weights = cnn_weights.clone();
    let w0 = weights
        .params
        .get_mut(&format!("{}block0.conv.w", cnn::PREFIX))
        .ok_or_else(|| Error::Weight("missing block0 conv".into()))?;
    let [cout, cin, kh, kw] = w0.dims4();
    for o in 0..cout {
        for &c in masked_channels {
            let base = (o * cin + c) * kh * kw;
            w0.data_mut()[base..base + kh * kw].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let all: Vec<&LabeledFeatures> = data.iter().collect();
    let initial_loss = classifier_bce(&weights, cnn_cfg, &all, masked_channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::default();
    let mut guard = DivergenceGuard::default();
    let mut curve = LossCurve::new(Phase::Classifier);
    for (step, batch) in minibatches(&mut rng, data.len(), cfg.batch_size, cfg.steps).into_iter().enumerate() {
        let chosen: Vec<&LabeledFeatures> = batch.iter().map(|&i| &data[i]).collect();
        let tape = Tape::new();
        let p = BoundParams::bind(&tape, &weights, CnnConfig::is_trainable);
        let x = tape.constant(stack(&chosen, masked_channels)?);
        let (logits, stats) = logits_on_tape(&tape, &p, cnn_cfg, &x, BnMode::Train)?;
        let loss = tape.bce_with_logits(&logits, &targets(&chosen))?;
        let g = tape.backward(&loss);
        let grads: BTreeMap<String, Tensor> = p
            .iter()
            .filter(|(k, _)| CnnConfig::is_trainable(k))
            .map(|(k, v)| (k.clone(), g.get_or_zeros(v)))
            .collect();
        let l = loss.value().item();
        guard.observe(step, l)?;
        curve.losses.push(l);
        opt.step(&mut weights, grads, cfg)?;
        update_running_stats(&mut weights, &stats, chosen.len(), BN_MOMENTUM)?;
    }
    // running statistics from the full training set
    let tape = Tape::no_grad();
    let p = BoundParams::bind(&tape, &weights, |_| false);
    let x = tape.constant(stack(&all, masked_channels)?);
    let (_, stats) = logits_on_tape(&tape, &p, cnn_cfg, &x, BnMode::Train)?;
    update_running_stats(&mut weights, &stats, all.len(), 1.0)?;
    let final_loss = classifier_bce(&weights, cnn_cfg, &all, masked_channels)?;
    Ok(ClassifierOutcome {
        outcome: TrainOutcome {
            weights,
            curve,
            initial_loss,
            final_loss,
        },
        masked_channels: masked_channels.to_vec(),
    })
}

/// An item as a magnitude tensor with its BCE target.
struct SteerItem {
    magnitude: Tensor,
    target: f64,
}

fn steer_loss(tape: &Tape, p: &BoundParams, pipeline: &Pipeline, it: &SteerItem) -> Result<Var> {
    let x = tape.constant(it.magnitude.clone());
    let (_, feats) = pipeline.forward_on_tape(tape, p, &x)?;
    let logit = pipeline.logit_on_tape(tape, p, &feats)?;
    tape.bce_with_logits(&logit, &[it.target])
}

fn fit_len(mut samples: Vec<f64>, len: usize) -> Vec<f64> {
    samples.resize(len, 0.0);
    samples
}

fn steer_items(pipeline: &Pipeline, items: &[(Vec<f64>, Label)]) -> Result<Vec<SteerItem>> {
    items
        .par_iter()
        .map(|(s, l)| {
            Ok(SteerItem {
                magnitude: pipeline.magnitude_tensor(s)?,
                target: l.target(),
            })
        })
        .collect()
}

/// Shared loop of the classifier-steered phases: only UNet parameters are
/// bound as trainable and the CNN entries are byte-compared afterwards.
fn steer(
    merged: ModelWeights,
    pipeline: &Pipeline,
    items: &[SteerItem],
    batches: Vec<Vec<usize>>,
    phase: Phase,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let frozen = merged.subset(cnn::PREFIX);
    let eval = |w: &ModelWeights| {
        mean_loss(items, |tape, it| {
            let p = BoundParams::bind(tape, w, |_| false);
            Ok(steer_loss(tape, &p, pipeline, it)?.value().item())
        })
    };
    let mut weights = merged;
    let initial_loss = eval(&weights)?;
    let mut opt = OptimizerState::default();
    let mut guard = DivergenceGuard::default();
    let mut curve = LossCurve::new(phase);
    for (step, batch) in batches.into_iter().enumerate() {
        let chosen: Vec<&SteerItem> = batch.iter().map(|&i| &items[i]).collect();
        let (l, g) = batch_gradients(&weights, &is_unet, &chosen, |tape, p, it| {
            steer_loss(tape, p, pipeline, it)
        })?;
        guard.observe(step, l)?;
        curve.losses.push(l);
        opt.step(&mut weights, g, cfg)?;
    }
    assert_unchanged(&frozen, &weights, cnn::PREFIX)?;
    let final_loss = eval(&weights)?;
    Ok(TrainOutcome {
        weights,
        curve,
        initial_loss,
        final_loss,
    })
}

/// Refines the residual extractor through the frozen classifier with BCE.
/// Returns the merged model; its classifier entries are bit-identical to
/// `frozen_cnn`.
pub fn phase2_steer(
    unet_weights: &ModelWeights,
    frozen_cnn: &ModelWeights,
    pipeline: &Pipeline,
    labeled: &[LabeledItem],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(Phase::Two)?;
    if labeled.is_empty() {
        return Err(Error::Config("phase 2 labeled set is empty".into()));
    }
    let mut merged = unet_weights.subset(unet::PREFIX);
    merged.merge(&frozen_cnn.subset(cnn::PREFIX));
    pipeline.check_weights(&merged)?;
    let len = pipeline.config.segment_len;
    let raw: Vec<(Vec<f64>, Label)> = labeled
        .iter()
        .map(|it| (fit_len(it.samples.clone(), len), it.label))
        .collect();
    let items = steer_items(pipeline, &raw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches = minibatches(&mut rng, items.len(), cfg.batch_size, cfg.steps);
    steer(merged, pipeline, &items, batches, Phase::Two, cfg)
}

/// Track batches for codec-aware training, each track expanded into its
/// four training variants: `batch_size` tracks give `4 × batch_size`
/// items.
pub fn phase3_batch_plan(n_tracks: usize, cfg: &TrainConfig) -> Vec<Vec<(usize, CodecVariant)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    minibatches(&mut rng, n_tracks, cfg.batch_size, cfg.steps)
        .into_iter()
        .map(|b| {
            b.into_iter()
                .flat_map(|t| CodecVariant::TRAINING.map(|v| (t, v)))
                .collect()
        })
        .collect()
}

/// All four training variants of every item, resized to the segment
/// length.
fn render_training_variants(
    pipeline: &Pipeline,
    items: &[LabeledItem],
    bank: &dyn CodecBank,
) -> Result<Vec<[Vec<f64>; 4]>> {
    let len = pipeline.config.segment_len;
    items
        .par_iter()
        .map(|it| {
            let mut out: [Vec<f64>; 4] = Default::default();
            for (slot, v) in out.iter_mut().zip(CodecVariant::TRAINING) {
                let r = bank.render(&it.id, &it.samples, v)?.ok_or_else(|| Error::IncompleteBank {
                    track: it.id.clone(),
                    codec: v.name().to_string(),
                })?;
                *slot = fit_len(r, len);
            }
            Ok(out)
        })
        .collect()
}

/// Largest per-class spread of per-codec mean probabilities over the four
/// training variants of `items`.
pub fn codec_delta(
    pipeline: &Pipeline,
    weights: &ModelWeights,
    items: &[LabeledItem],
    bank: &dyn CodecBank,
) -> Result<f64> {
    pipeline.check_weights(weights)?;
    let rendered = render_training_variants(pipeline, items, bank)?;
    let probs: Vec<[f64; 4]> = rendered
        .par_iter()
        .map(|vars| {
            let mut p = [0.0; 4];
            for (slot, s) in p.iter_mut().zip(vars) {
                *slot = pipeline.score_segment(s, weights)?.probability;
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let mut delta: f64 = 0.0;
    for class in [Label::Ai, Label::Real] {
        let per_codec: BTreeMap<CodecVariant, BTreeMap<String, f64>> = CodecVariant::TRAINING
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let m = items
                    .iter()
                    .zip(&probs)
                    .filter(|(it, _)| it.label == class)
                    .map(|(it, p)| (it.id.clone(), p[k]))
                    .collect();
                (v, m)
            })
            .collect();
        delta = delta.max(cross_codec_delta(&per_codec)?);
    }
    Ok(delta)
}

#[derive(Clone, Debug)]
pub struct Phase3Outcome {
    pub training: TrainOutcome,
    /// Cross-codec spread on the held-out set before and after training.
    pub delta_before: f64,
    pub delta_after: f64,
}

/// Refines the residual extractor on batches that carry every sampled
/// track under all four training codecs, classifier frozen.
pub fn phase3_codec_aware(
    weights: &ModelWeights,
    pipeline: &Pipeline,
    labeled: &[LabeledItem],
    held_out: &[LabeledItem],
    bank: &dyn CodecBank,
    cfg: &TrainConfig,
) -> Result<Phase3Outcome> {
    cfg.validate(Phase::Three)?;
    if labeled.is_empty() {
        return Err(Error::Config("phase 3 labeled set is empty".into()));
    }
    pipeline.check_weights(weights)?;
    let rendered = render_training_variants(pipeline, labeled, bank)?;
    let raw: Vec<(Vec<f64>, Label)> = rendered
        .into_iter()
        .zip(labeled)
        .flat_map(|(vars, it)| vars.into_iter().map(move |s| (s, it.label)))
        .collect();
    let items = steer_items(pipeline, &raw)?;
    let batches = phase3_batch_plan(labeled.len(), cfg)
        .into_iter()
        .map(|b| {
            b.into_iter()
                .map(|(t, v)| {
                    let k = CodecVariant::TRAINING.iter().position(|&x| x == v).expect("training variant");
                    4 * t + k
                })
                .collect()
        })
        .collect();
    let delta_before = codec_delta(pipeline, weights, held_out, bank)?;
    let merged = {
        let mut m = weights.subset(unet::PREFIX);
        m.merge(&weights.subset(cnn::PREFIX));
        m
    };
    let training = steer(merged, pipeline, &items, batches, Phase::Three, cfg)?;
    let delta_after = codec_delta(pipeline, &training.weights, held_out, bank)?;
    Ok(Phase3Outcome {
        training,
        delta_before,
        delta_after,
    })
}

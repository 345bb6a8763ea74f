use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfx_core::bench::Label;
use rfx_core::codecs::{CodecBank, CodecVariant, IdentityBank};
use rfx_core::features::N_CHANNELS;
use rfx_core::nn::{cnn, unet, ModelWeights};
use rfx_core::pipeline::{Pipeline, PipelineConfig};
use rfx_core::training::*;
use rfx_core::Error;

fn toy() -> Pipeline {
    Pipeline::new(PipelineConfig::toy()).unwrap()
}

fn init(p: &Pipeline, seed: u64) -> (ModelWeights, ModelWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (p.config.unet.init(&mut rng), p.config.cnn.init(&mut rng))
}

fn cfg(phase: Phase, steps: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: batch,
        ..TrainConfig::new(phase)
    }
}

fn mean_mask(p: &Pipeline, w: &ModelWeights, pairs: &[TeacherPair]) -> f64 {
    pairs
        .iter()
        .map(|t| unet::unet_mask(&t.mixture_magnitude, w, &p.config.unet).unwrap().mean())
        .sum::<f64>()
        / pairs.len() as f64
}

#[test]
fn config_validation() {
    let c = TrainConfig::new(Phase::One);
    assert!(c.validate(Phase::One).is_ok());
    assert!(matches!(c.validate(Phase::Two), Err(Error::Config(_))));
    for bad in [
        TrainConfig { steps: 0, ..c.clone() },
        TrainConfig { batch_size: 0, ..c.clone() },
        TrainConfig { learning_rate: -0.1, ..c.clone() },
        TrainConfig { learning_rate: f64::NAN, ..c.clone() },
        TrainConfig { grad_clip: Some(0.0), ..c.clone() },
    ] {
        assert!(matches!(bad.validate(Phase::One), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn oracle_respects_energy_bound() {
    let p = toy();
    let bad = TeacherOracle {
        artifact_fraction: 0.3,
        ..TeacherOracle::default()
    };
    assert!(matches!(bad.generate(&p), Err(Error::Config(_))));
    let pairs = TeacherOracle {
        n_pairs: 4,
        ..TeacherOracle::default()
    }
    .generate(&p)
    .unwrap();
    for t in &pairs {
        for (r, x) in t.residual.values.iter().zip(&t.mixture_magnitude.values) {
            assert!(*r <= 0.5 * x + 1e-15);
        }
        assert!(t.residual.energy() <= MAX_ARTIFACT_FRACTION * t.mixture_magnitude.energy());
    }
}

#[test]
fn zero_learning_rate_is_the_identity() {
    let p = toy();
    let (u, _) = init(&p, 1);
    let oracle = TeacherOracle {
        n_pairs: 3,
        ..TeacherOracle::default()
    };
    let c = TrainConfig {
        learning_rate: 0.0,
        ..cfg(Phase::One, 4, 3)
    };
    let out = phase1_distill(&u, &p, &oracle, &c).unwrap();
    assert_eq!(out.weights.to_bytes(), u.to_bytes());
    let first = out.curve.losses[0];
    assert!(out.curve.losses.iter().all(|&l| l.to_bits() == first.to_bits()), "{:?}", out.curve.losses);
    assert_eq!(out.initial_loss, out.final_loss);
}

#[test]
fn zero_teacher_drives_the_mask_down() {
    let p = toy();
    let (u, _) = init(&p, 2);
    let oracle = TeacherOracle {
        n_pairs: 6,
        zero_residual: true,
        ..TeacherOracle::default()
    };
    let pairs = oracle.generate(&p).unwrap();
    let before = mean_mask(&p, &u, &pairs);
    let out = phase1_distill(&u, &p, &oracle, &cfg(Phase::One, 25, 3)).unwrap();
    let after = mean_mask(&p, &out.weights, &pairs);
    assert!(after < 0.5 * before, "mask mean {before} -> {after}");
    assert!(out.final_loss < out.initial_loss);
}

#[test]
fn training_is_reproducible_across_pool_sizes() {
    let p = toy();
    let (u, _) = init(&p, 3);
    let oracle = TeacherOracle {
        n_pairs: 6,
        ..TeacherOracle::default()
    };
    let c = cfg(Phase::One, 3, 3);
    let a = phase1_distill(&u, &p, &oracle, &c).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| phase1_distill(&u, &p, &oracle, &c).unwrap());
    assert_eq!(a.weights.to_bytes(), b.weights.to_bytes());
    assert_eq!(a.curve, b.curve);
    assert_ne!(a.weights.to_bytes(), u.to_bytes());
}

#[test]
fn divergence_is_reported_with_its_step() {
    let p = toy();
    let (u, c) = init(&p, 4);
    let feats = classifier_features(&p, &u, &small_set(&p, 4, 8)).unwrap();
    let bad = TrainConfig {
        learning_rate: 1e4,
        grad_clip: None,
        optimizer: Optimizer::Sgd,
        ..cfg(Phase::Classifier, 60, 4)
    };
    match train_classifier(&c, &p.config.cnn, &feats, &bad, &[]) {
        Err(Error::Divergence { step, .. }) => assert!(step < 60),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.outcome.final_loss)),
    }
}

#[test]
fn loss_curve_lines() {
    let curve = LossCurve {
        phase: Phase::Two,
        losses: vec![0.5, 0.25],
    };
    let text = curve.to_jsonl();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["phase"], "2");
    assert_eq!(lines[1]["step"], 1);
    assert_eq!(lines[1]["loss"], 0.25);
}

fn small_set(p: &Pipeline, n: usize, seed: u64) -> Vec<LabeledItem> {
    toy_labeled_set(p, n, 0.2, &ArtifactSpec::default(), seed)
}

#[test]
fn classifier_fits_separable_features() {
    let p = toy();
    let (u, c) = init(&p, 5);
    let set = small_set(&p, 12, 9);
    let feats = classifier_features(&p, &u, &set).unwrap();
    let out = train_classifier(&c, &p.config.cnn, &feats, &cfg(Phase::Classifier, 30, 6), &[]).unwrap();
    assert!(out.outcome.final_loss < 0.5 * out.outcome.initial_loss);
    assert!(matches!(
        train_classifier(&c, &p.config.cnn, &[], &cfg(Phase::Classifier, 1, 1), &[]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train_classifier(&c, &p.config.cnn, &feats, &cfg(Phase::Classifier, 1, 1), &[7]),
        Err(Error::Config(_))
    ));
}

#[test]
fn steering_never_touches_the_classifier() {
    let p = toy();
    let (u, c) = init(&p, 6);
    let set = small_set(&p, 6, 10);
    let dir = tempfile::tempdir().unwrap();
    let before = dir.path().join("cnn_before.anw");
    let after = dir.path().join("cnn_after.anw");
    rfx_core::nn::save_weights(&c, &before).unwrap();
    let out = phase2_steer(&u, &c, &p, &set, &cfg(Phase::Two, 8, 3)).unwrap();
    rfx_core::nn::save_weights(&out.weights.subset(cnn::PREFIX), &after).unwrap();
    let strip = |w: ModelWeights| ModelWeights {
        params: w.params,
        meta: Default::default(),
    };
    assert_eq!(
        strip(rfx_core::nn::load_weights(&before).unwrap()).to_bytes(),
        strip(rfx_core::nn::load_weights(&after).unwrap()).to_bytes()
    );
    assert_ne!(out.weights.subset(unet::PREFIX).params, u.subset(unet::PREFIX).params);
}

#[test]
fn steering_rejects_an_empty_set() {
    let p = toy();
    let (u, c) = init(&p, 7);
    assert!(matches!(
        phase2_steer(&u, &c, &p, &[], &cfg(Phase::Two, 1, 1)),
        Err(Error::Config(_))
    ));
}

struct NoAac;

impl CodecBank for NoAac {
    fn name(&self) -> &str {
        "no-aac"
    }
    fn render(&self, _: &str, s: &[f64], v: CodecVariant) -> rfx_core::Result<Option<Vec<f64>>> {
        Ok((v != CodecVariant::Aac128).then(|| s.to_vec()))
    }
}

#[test]
fn incomplete_bank_names_track_and_codec() {
    let p = toy();
    let (u, c) = init(&p, 8);
    let mut w = u.clone();
    w.merge(&c);
    let set = small_set(&p, 2, 11);
    match phase3_codec_aware(&w, &p, &set, &[], &NoAac, &cfg(Phase::Three, 1, 1)) {
        Err(Error::IncompleteBank { track, codec }) => {
            assert_eq!(track, set[0].id);
            assert_eq!(codec, "aac-128");
        }
        other => panic!("expected incomplete bank, got {:?}", other.map(|o| o.delta_after)),
    }
}

#[test]
fn identity_bank_has_no_cross_codec_spread() {
    let p = toy();
    let (u, c) = init(&p, 9);
    let mut w = u.clone();
    w.merge(&c);
    let set = small_set(&p, 4, 12);
    let held = small_set(&p, 4, 13);
    let out = phase3_codec_aware(&w, &p, &set, &held, &IdentityBank, &cfg(Phase::Three, 3, 1)).unwrap();
    assert_eq!(out.delta_before, 0.0);
    assert!((out.delta_after - out.delta_before).abs() <= 0.02);
    assert_eq!(
        out.training.weights.subset(cnn::PREFIX).params,
        c.subset(cnn::PREFIX).params
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn phase3_batches_carry_all_four_codecs(n in 1usize..20, batch in 1usize..6, steps in 1usize..8, seed in any::<u64>()) {
        let c = TrainConfig { seed, ..cfg(Phase::Three, steps, batch) };
        let plan = phase3_batch_plan(n, &c);
        prop_assert_eq!(plan.len(), steps);
        for b in plan {
            prop_assert_eq!(b.len(), 4 * batch.min(n));
            let mut per_track: HashMap<usize, Vec<CodecVariant>> = HashMap::new();
            for (t, v) in b {
                per_track.entry(t).or_default().push(v);
            }
            prop_assert_eq!(per_track.len(), batch.min(n));
            for (_, mut vs) in per_track {
                vs.sort();
                prop_assert_eq!(vs, CodecVariant::TRAINING.to_vec());
            }
        }
    }
}

#[test]
fn batch_of_two_tracks_is_eight_items() {
    let plan = phase3_batch_plan(10, &cfg(Phase::Three, 5, 2));
    assert!(plan.iter().all(|b| b.len() == 8));
}

fn toy_features(p: &Pipeline, u: &ModelWeights, n: usize, seed: u64) -> Vec<LabeledFeatures> {
    classifier_features(p, u, &small_set(p, n, seed)).unwrap()
}

#[test]
fn ablation_table_and_controls() {
    let p = toy();
    let (u, c) = init(&p, 10);
    let train = toy_features(&p, &u, 12, 14);
    let eval = toy_features(&p, &u, 8, 15);
    let means = channel_means(&train).unwrap();
    let masked = 3;
    let clf = train_classifier(&c, &p.config.cnn, &train, &cfg(Phase::Classifier, 15, 6), &[masked]).unwrap();
    let w = &clf.outcome.weights;

    let row = ablate_channel(w, &p.config.cnn, &eval, masked, &means, 0.5).unwrap();
    assert_eq!(row.delta_f1, 0.0);
    let base = ablate_channels(w, &p.config.cnn, &eval, &[], &means).unwrap();
    let abl = ablate_channels(w, &p.config.cnn, &eval, &[masked], &means).unwrap();
    assert_eq!(base, abl);

    let all: Vec<usize> = (0..N_CHANNELS).collect();
    let probs = ablate_channels(w, &p.config.cnn, &eval, &all, &means).unwrap();
    assert!(probs.iter().all(|&q| q == probs[0]));

    let table = ablation_table(w, &p.config.cnn, &eval, &means, 0.5).unwrap();
    assert_eq!(table.rows.len(), 1 + N_CHANNELS);
    assert_eq!(table.rows[0].channel, None);
    assert_eq!(table.rows[1 + masked].delta_f1, 0.0);
    assert_eq!(table.to_jsonl().lines().count(), 8);

    assert!(matches!(
        ablate_channel(w, &p.config.cnn, &eval, 7, &means, 0.5),
        Err(Error::Config(_))
    ));
}

#[test]
fn unbounded_mask_ablation_reports_both_variants() {
    let oracle = TeacherOracle {
        n_pairs: 6,
        ..TeacherOracle::default()
    };
    let p = toy();
    let set = small_set(&p, 8, 16);
    let cfg = UnboundedAblationConfig {
        base: PipelineConfig::toy(),
        phase1: cfg(Phase::One, 10, 3),
        classifier: cfg(Phase::Classifier, 5, 4),
        phase2: cfg(Phase::Two, 10, 4),
        init_seed: 17,
    };
    let r = unbounded_mask_ablation(&oracle, &set, &cfg).unwrap();
    assert!(r.bounded.mask_mean < 0.5);
    assert!(r.unbounded.energy_fraction > r.bounded.energy_fraction, "{r:?}");
    let json = serde_json::to_value(&r).unwrap();
    assert!(json["bounded"]["mask_mean"].is_number());
    assert!(json["unbounded"]["mask_mean"].is_number());
}

#[test]
fn labeled_sets_alternate_classes() {
    let p = toy();
    let set = small_set(&p, 4, 1);
    let labels: Vec<Label> = set.iter().map(|i| i.label).collect();
    assert_eq!(labels, [Label::Ai, Label::Real, Label::Ai, Label::Real]);
}

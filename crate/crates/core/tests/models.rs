use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfx_core::features::FeatureTensor;
use rfx_core::nn::cnn::update_running_stats;
use rfx_core::nn::weights::{FORMAT_VERSION, MAGIC};
use rfx_core::nn::{
    bounded_mask, cnn_forward, grad_check, load_weights, save_weights, unet_forward, BoundParams,
    CnnConfig, GradCheckConfig, ModelWeights, Tape, Tensor, UNetConfig,
};
use rfx_core::spectral::{MagnitudeSpectrogram, StftConfig};
use rfx_core::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn identity_kernel_copies_input() {
    let tape = Tape::no_grad();
    let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng(1));
    let mut w = Tensor::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let y = tape
        .conv2d(&tape.constant(x.clone()), &tape.constant(w), &tape.constant(Tensor::zeros(&[3])))
        .unwrap();
    assert_eq!(y.value().data(), x.data());
}

#[test]
fn relu_definition() {
    let tape = Tape::no_grad();
    let y = tape.relu(&tape.constant(Tensor::new(&[2], vec![-3.2, 1.5]).unwrap()));
    assert_eq!(y.value().data(), &[0.0, 1.5]);
}

#[test]
fn conv_shape_mismatch_names_the_layer() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 5, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    match tape.conv2d(&x, &w, &b) {
        Err(e @ Error::Shape { .. }) => assert!(e.to_string().contains("conv2d"), "{e}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn batchnorm_eval_with_batch_statistics_equals_train() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::randn(&[4, 3, 5, 6], 2.0, &mut rng(2)));
    let gamma = tape.constant(Tensor::new(&[3], vec![1.2, 0.5, -0.7]).unwrap());
    let beta = tape.constant(Tensor::new(&[3], vec![0.1, 0.0, 0.3]).unwrap());
    let (train, stats) = tape.batchnorm_train(&x, &gamma, &beta).unwrap();
    let eval = tape.batchnorm_eval(&x, &gamma, &beta, &stats.mean, &stats.var).unwrap();
    for (a, b) in train.value().data().iter().zip(eval.value().data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn running_stats_momentum_one_copies_the_batch() {
    let cfg = CnnConfig::default();
    let mut w = cfg.init(&mut rng(3));
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::randn(&[3, 7, 16, 16], 1.0, &mut rng(4)));
    let p = BoundParams::bind(&tape, &w, |_| false);
    let (_, stats) =
        rfx_core::nn::cnn::logits_on_tape(&tape, &p, &cfg, &x, rfx_core::nn::BnMode::Train).unwrap();
    update_running_stats(&mut w, &stats, 3 * 16 * 16, 1.0).unwrap();
    let rm = w.get("cnn.block0.bn.running_mean").unwrap();
    assert_eq!(rm.data(), stats[0].mean.as_slice());
}

#[test]
fn bounded_mask_values() {
    let m = bounded_mask(&Tensor::new(&[3], vec![0.0, 40.0, -40.0]).unwrap());
    assert_eq!(m.data()[0], 0.25);
    assert!((m.data()[1] - 0.5).abs() <= 1e-15);
    assert!(m.data()[2].abs() <= 1e-15);
}

fn spectrogram(frames: usize, cfg: StftConfig, f: impl FnMut() -> f64) -> MagnitudeSpectrogram {
    let mut m = MagnitudeSpectrogram::zeros(frames, cfg, 16_000);
    let mut f = f;
    m.values.iter_mut().for_each(|v| *v = f());
    m
}

#[test]
fn silent_input_gives_silent_residual() {
    let cfg = UNetConfig::default();
    let w = cfg.init(&mut rng(5));
    let x = MagnitudeSpectrogram::zeros(21, StftConfig::new(64, 16).unwrap(), 16_000);
    let r = unet_forward(&x, &w, &cfg).unwrap();
    assert!(r.values.iter().all(|&v| v == 0.0));
    assert_eq!((r.n_frames, r.n_bins), (21, 33));
}

#[test]
fn unet_rejects_mismatched_weights() {
    let w = UNetConfig::default().init(&mut rng(6));
    let cfg = UNetConfig {
        base_channels: 4,
        ..Default::default()
    };
    let x = MagnitudeSpectrogram::zeros(8, StftConfig::new(64, 16).unwrap(), 16_000);
    assert!(matches!(unet_forward(&x, &w, &cfg), Err(Error::Weight(_))));
}

#[test]
fn cnn_with_zero_weights_is_undecided() {
    let cfg = CnnConfig::default();
    let f = FeatureTensor::from_tensor(&Tensor::randn(&[1, 7, 16, 12], 1.0, &mut rng(7)), "z").unwrap();
    assert_eq!(cnn_forward(&f, &cfg.zeros(), &cfg).unwrap(), 0.5);
}

#[test]
fn cnn_rejects_wrong_channel_count() {
    let cfg = CnnConfig::default();
    let w = cfg.init(&mut rng(8));
    let tape = Tape::no_grad();
    let p = BoundParams::bind(&tape, &w, |_| false);
    let x = tape.constant(Tensor::zeros(&[1, 6, 8, 8]));
    assert!(matches!(
        rfx_core::nn::cnn::logits_on_tape(&tape, &p, &cfg, &x, rfx_core::nn::BnMode::Eval),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn cnn_probabilities_stay_in_unit_interval() {
    let cfg = CnnConfig::default();
    let w = cfg.init(&mut rng(9));
    let mut r = rng(10);
    for i in 0..1000 {
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let f = FeatureTensor::from_tensor(&Tensor::randn(&[1, 7, 8, 8], scale, &mut r), i.to_string())
            .unwrap();
        let p = cnn_forward(&f, &w, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&p), "{p}");
    }
}

#[test]
fn cnn_golden_probability() {
    let cfg = CnnConfig::default();
    let w = cfg.init(&mut rng(42));
    let f = FeatureTensor::from_tensor(&Tensor::randn(&[1, 7, 32, 24], 1.0, &mut rng(43)), "g").unwrap();
    let a = cnn_forward(&f, &w, &cfg).unwrap();
    let b = cnn_forward(&f, &w, &cfg).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!((a - GOLDEN_PROBABILITY).abs() < 1e-12, "{a:.17}");
}

const GOLDEN_PROBABILITY: f64 = 0.999_615_783_375_902_8;

#[test]
fn weight_file_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = UNetConfig::default().init(&mut rng(11)).quantized();
    w.merge(&CnnConfig::default().init(&mut rng(12)).quantized());
    let a = dir.path().join("a.anw");
    let b = dir.path().join("b.anw");
    save_weights(&w, &a).unwrap();
    let loaded = load_weights(&a).unwrap();
    assert_eq!(loaded, w);
    save_weights(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn empty_weight_file_is_valid() {
    let bytes = ModelWeights::new().to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    assert!(ModelWeights::from_bytes(&bytes).unwrap().params.is_empty());
}

fn one_entry() -> Vec<u8> {
    let mut w = ModelWeights::new();
    w.insert("x", Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    w.to_bytes()
}

#[test]
fn tampered_dimension_is_corruption() {
    let mut bytes = one_entry();
    // header: magic, version, meta count (0), entry count, name len, "x", rank
    let dim0 = 4 + 4 + 4 + 4 + 4 + 1 + 4;
    assert_eq!(u32::from_le_bytes(bytes[dim0..dim0 + 4].try_into().unwrap()), 2);
    bytes[dim0] = 9;
    assert!(matches!(ModelWeights::from_bytes(&bytes), Err(Error::Corruption(_))));
}

#[test]
fn truncated_payload_is_corruption() {
    let bytes = one_entry();
    assert!(matches!(
        ModelWeights::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Corruption(_))
    ));
}

#[test]
fn bad_magic_or_version_is_format_error() {
    let mut bytes = one_entry();
    bytes[0] = b'X';
    assert!(matches!(ModelWeights::from_bytes(&bytes), Err(Error::Format(_))));
    let mut bytes = one_entry();
    bytes[4] = 2;
    assert!(matches!(ModelWeights::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn corrupted_backward_rule_is_flagged() {
    let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng(13));
    let report = grad_check(
        &[("x".to_string(), x)],
        |t, v| {
            let y = v[0].value().map(|a| a * a);
            // the true derivative is 2a; this rule returns 3a
            let xv = v[0].value().clone();
            Ok(t.push(y, &[&v[0]], move |g| vec![g.zip_map(&xv, |g, a| 3.0 * a * g)]))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.params[0].flagged.len(), report.params[0].checked);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn residual_is_at_most_half_the_input(
        seed in 0u64..1000,
        frames in 3usize..20,
        amp in 0.001f64..100.0,
    ) {
        let cfg = UNetConfig { depth: 2, base_channels: 4, ..Default::default() };
        let w = cfg.init(&mut rng(seed));
        let mut r = rng(seed + 1);
        let x = spectrogram(frames, StftConfig::new(32, 8).unwrap(), || amp * r.random::<f64>());
        let out = unet_forward(&x, &w, &cfg).unwrap();
        let mask = rfx_core::nn::unet::unet_mask(&x, &w, &cfg).unwrap();
        prop_assert!(mask.data().iter().all(|&m| m > 0.0 && m < 0.5));
        for (ri, xi) in out.values.iter().zip(&x.values) {
            prop_assert!(*ri >= 0.0 && *ri <= 0.5 * xi);
            prop_assert!(ri * ri <= 0.25 * xi * xi);
        }
        let again = unet_forward(&x, &w, &cfg).unwrap();
        prop_assert_eq!(out.values, again.values);
    }
}

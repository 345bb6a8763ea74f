//! The standard gradient-check battery: every differentiable layer on the
//! forward path plus both full models, on seeded inputs.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cnn::{logits_on_tape, BnMode, CnnConfig};
use super::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use super::signal_ops::Axis;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::unet::{residual_on_tape, UNetConfig};
use super::weights::BoundParams;
use crate::error::Result;
use crate::features::{channels_on_tape, FeatureConfig, FeatureExtractor};
use crate::spectral::{MelFilterbank, MultiResConfig, MultiResLoss, StftConfig, StftPlan};

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

type Forward = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<(String, Tensor)>,
    forward: Forward,
    samples: Option<usize>,
}

fn p(name: &str, t: Tensor) -> (String, Tensor) {
    (name.to_string(), t)
}

fn case(name: &'static str, params: Vec<(String, Tensor)>, f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        params,
        forward: Box::new(f),
        samples: None,
    }
}

fn named(w: &super::ModelWeights) -> (Vec<String>, Vec<(String, Tensor)>) {
    let names = w.params.keys().cloned().collect();
    let params = w.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    (names, params)
}

fn bind(names: &[String], vars: &[Var]) -> BoundParams {
    BoundParams::from_vars(names.iter().cloned().zip(vars.iter().cloned()))
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut input = || Tensor::randn(&[2, 3, 4, 5], 1.0, &mut r);
    let (x_conv, x_bn, x_bne, x_relu, x_sig, x_pool, x_gap) =
        (input(), input(), input(), input(), input(), input(), input());
    let positive = input().map(|v| v.abs() + 0.1);
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut out = vec![
        case(
            "conv2d",
            vec![
                p("x", x_conv),
                p("w", Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r)),
                p("b", Tensor::randn(&[4], 0.5, &mut r)),
            ],
            |t, v| t.conv2d(&v[0], &v[1], &v[2]),
        ),
        case(
            "batchnorm_train",
            vec![
                p("x", x_bn),
                p("gamma", Tensor::randn(&[3], 1.0, &mut r)),
                p("beta", Tensor::randn(&[3], 1.0, &mut r)),
            ],
            |t, v| Ok(t.batchnorm_train(&v[0], &v[1], &v[2])?.0),
        ),
        case(
            "batchnorm_eval",
            vec![
                p("x", x_bne),
                p("gamma", Tensor::randn(&[3], 1.0, &mut r)),
                p("beta", Tensor::randn(&[3], 1.0, &mut r)),
            ],
            |t, v| t.batchnorm_eval(&v[0], &v[1], &v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0]),
        ),
        case("relu", vec![p("x", x_relu)], |t, v| Ok(t.relu(&v[0]))),
        case("sigmoid", vec![p("x", x_sig)], |t, v| Ok(t.sigmoid(&v[0]))),
        case("maxpool2", vec![p("x", x_pool)], |t, v| t.maxpool2(&v[0])),
        case("global_avg_pool", vec![p("x", x_gap)], |t, v| Ok(t.global_avg_pool(&v[0]))),
        case(
            "linear",
            vec![
                p("x", Tensor::randn(&[2, 60], 1.0, &mut r)),
                p("w", Tensor::randn(&[5, 60], 0.3, &mut r)),
                p("b", Tensor::randn(&[5], 0.3, &mut r)),
            ],
            |t, v| t.linear(&v[0], &v[1], &v[2]),
        ),
        case("bce_with_logits", vec![p("z", Tensor::randn(&[4, 1], 2.0, &mut r))], |t, v| {
            t.bce_with_logits(&v[0], &[1.0, 0.0, 1.0, 0.0])
        }),
        case("median_time", vec![p("x", positive.clone())], |t, v| t.median_filter(&v[0], Axis::Time, 3)),
        case("median_freq", vec![p("x", positive.clone())], |t, v| t.median_filter(&v[0], Axis::Freq, 3)),
        case("time_diff2", vec![p("x", positive)], |t, v| Ok(t.time_diff2(&v[0]))),
    ];

    let fb = Arc::new(MelFilterbank::new(6, 32, 8000)?);
    let mag = Tensor::randn(&[1, 1, 17, 8], 1.0, &mut r).map(|v| v.abs() + 0.05);
    out.push(case("log_mel", vec![p("mag", mag)], move |t, v| t.log_mel(&v[0], &fb)));

    let plan = Arc::new(StftPlan::new(StftConfig::new(16, 4)?)?);
    let frames = plan.config.n_frames(40);
    let phase = Arc::new((0..9 * frames).map(|i| (i as f64 * 0.37).sin() * 3.0).collect::<Vec<_>>());
    let sig = Tensor::randn(&[40], 1.0, &mut r);
    let mag = Tensor::randn(&[1, 1, 9, frames], 1.0, &mut r).map(f64::abs);
    let pl = plan.clone();
    out.push(case("stft_magnitude", vec![p("x", sig)], move |t, v| t.stft_magnitude(&v[0], &pl)));
    out.push(case("istft", vec![p("m", mag)], move |t, v| t.istft(&v[0], &phase, &plan, 40)));

    let loss = MultiResLoss::new(&MultiResConfig { fft_sizes: vec![16, 32] })?;
    let target = Tensor::randn(&[64], 1.0, &mut r);
    out.push(case("multires_stft_loss", vec![p("a", Tensor::randn(&[64], 1.0, &mut r))], move |t, v| {
        let b = t.constant(target.clone());
        loss.on_tape(t, &v[0], &b)
    }));

    let fx = FeatureExtractor::new(FeatureConfig {
        stft: StftConfig::new(32, 8)?,
        sample_rate: 8000,
        n_mels: 6,
        kernel_time: 3,
        kernel_freq: 3,
    })?;
    let res = Tensor::randn(&[1, 1, 17, 6], 1.0, &mut r).map(|v| v.abs() + 0.1);
    out.push(case("feature_channels", vec![p("r", res)], move |t, v| channels_on_tape(t, &v[0], &fx)));

    let ucfg = UNetConfig {
        depth: 2,
        base_channels: 2,
        ..Default::default()
    };
    let (names, params) = named(&ucfg.init(&mut r));
    let mag = Tensor::randn(&[1, 1, 9, 7], 1.0, &mut r).map(f64::abs);
    out.push(Case {
        name: "unet",
        params,
        forward: Box::new(move |t, v| {
            let m = t.constant(mag.clone());
            let o = residual_on_tape(t, &bind(&names, v), &ucfg, &m)?;
            Ok(t.mean(&o.residual))
        }),
        samples: Some(8),
    });

    let ccfg = CnnConfig {
        widths: [3, 4, 5],
        hidden: 4,
    };
    let (names, params) = named(&ccfg.init(&mut r));
    let x = Tensor::randn(&[2, 7, 8, 8], 1.0, &mut r);
    out.push(Case {
        name: "cnn",
        params,
        forward: Box::new(move |t, v| {
            let xv = t.constant(x.clone());
            Ok(logits_on_tape(t, &bind(&names, v), &ccfg, &xv, BnMode::Train)?.0)
        }),
        samples: Some(8),
    });
    Ok(out)
}

/// Runs every case at the given tolerance; inputs derive from `seed`.
pub fn gradient_suite(seed: u64, tolerance: f64) -> Result<Vec<SuiteCase>> {
    cases(seed)?
        .into_iter()
        .map(|c| {
            let cfg = GradCheckConfig {
                tolerance,
                samples_per_param: c.samples,
                seed,
                ..Default::default()
            };
            Ok(SuiteCase {
                name: c.name.to_string(),
                report: grad_check(&c.params, |t, v| (c.forward)(t, v), &cfg)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_its_default_seed() {
        let suite = gradient_suite(0, 1e-4).unwrap();
        assert!(suite.len() >= 18);
        for c in &suite {
            assert!(c.report.passed(), "{}: {:e}", c.name, c.report.max_rel_error());
        }
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rfx_core::audio_io::{decode_wav, normalize, segment};
use rfx_core::bandwidth::{self, effective_bandwidth, effective_bandwidth_spectrogram, BandwidthResult};
use rfx_core::bench::{
    default_grid, dual_accounting, emit_report, evaluate, roc_sweep, sanity_protocol, write_predictions,
    AccountingPair, BenchReport, Evaluation, Label, Manifest, PredictionRecord, ReportConfig, SanityConfig,
    SanityReport, SanityResult, Status, SubsetRate,
};
use rfx_core::codecs::{self, CodecVariant};
use rfx_core::features::{descriptor_103, FeatureTensor, DESCRIPTOR_VERSION};
use rfx_core::nn::{cnn, gradient_suite, load_weights, unet, unet_forward, ModelWeights};
use rfx_core::pipeline::{Pipeline, PipelineConfig};
use rfx_core::spectral::MagnitudeSpectrogram;
use rfx_core::training::{
    ablate_channel, ablation_table, channel_means, classifier_features, phase1_distill, phase2_steer,
    phase3_codec_aware, toy_labeled_set, train_classifier, ArtifactSpec, LabeledItem, Optimizer, Phase,
    TeacherOracle, TrainConfig, TrainOutcome,
};
use rfx_core::Error;

use crate::args::*;
use crate::data::*;
use crate::EvalFailure;

type Outcome = Result<Option<EvalFailure>>;

fn note(g: &Global, msg: impl AsRef<str>) {
    if !g.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn features(g: &Global, a: &FeaturesArgs) -> Outcome {
    let (pipeline, w) = load_model(&a.weights)?;
    let wave = normalize(&decode_wav(&a.input)?)?;
    let seg = segment(&wave, pipeline.config.segment_seconds())?;
    let outputs = seg
        .segments
        .par_iter()
        .map(|s| pipeline.score_segment(s, &w))
        .collect::<rfx_core::Result<Vec<_>>>()?;
    let mut bytes = Vec::new();
    for o in &outputs {
        bytes.extend_from_slice(&o.features.to_le_bytes());
    }
    fs::write(&a.out, bytes).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.descriptor {
        let id = a.input.display().to_string();
        let feats: Vec<FeatureTensor> = outputs.iter().map(|o| o.features.clone()).collect();
        let track = FeatureTensor::concat_frames(&feats, &id)?;
        let first = &outputs[0].residual;
        let mut residual = MagnitudeSpectrogram::zeros(0, first.config, first.sample_rate);
        for o in &outputs {
            residual.values.extend_from_slice(&o.residual.values);
            residual.n_frames += o.residual.n_frames;
        }
        let d = descriptor_103(&track, &residual, &pipeline.features)?;
        let json = serde_json::json!({ "id": id, "version": DESCRIPTOR_VERSION, "values": d.values });
        write_text(path, &(serde_json::to_string(&json)? + "\n"))?;
    }
    note(g, format!("{} segments written to {}", outputs.len(), a.out.display()));
    Ok(None)
}

fn score_path(pipeline: &Pipeline, w: &ModelWeights, id: &str, path: &Path, tau: f64) -> PredictionRecord {
    let wave = match decode_wav(path) {
        Ok(w) => w,
        Err(e) => return PredictionRecord::failed(id, Status::DecodeError, e.to_string()),
    };
    match pipeline
        .score_waveform(&wave, w)
        .and_then(|p| PredictionRecord::scored(id, p, tau))
    {
        Ok(r) => r,
        Err(e) => PredictionRecord::failed(id, Status::Missing, e.to_string()),
    }
}

pub fn infer(g: &Global, a: &InferArgs) -> Outcome {
    let (pipeline, w) = load_model(&a.weights)?;
    pipeline.check_weights(&w)?;
    let records: Vec<PredictionRecord> = match &a.manifest {
        Some(m) => {
            let manifest = Manifest::read(m)?;
            manifest
                .entries()
                .par_iter()
                .map(|e| score_path(&pipeline, &w, &e.id, Path::new(&e.path), a.tau))
                .collect()
        }
        None => {
            let mut recs = Vec::new();
            for p in &a.inputs {
                let wave = decode_wav(p)?;
                let probs = pipeline.score_waveform(&wave, &w)?;
                recs.push(PredictionRecord::scored(p.display().to_string(), probs, a.tau)?);
            }
            recs
        }
    };
    let mut out = String::new();
    for r in &records {
        match (r.song_prob, r.verdict) {
            (Some(p), Some(v)) => writeln!(out, "{}\tsong_prob={p:.6}\tverdict={}", r.id, v.as_str())?,
            _ => writeln!(out, "{}\tstatus={}", r.id, serde_json::to_string(&r.status)?.trim_matches('"'))?,
        }
    }
    print!("{out}");
    if let Some(path) = &a.out {
        write_predictions(path, &records)?;
    }
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    note(g, format!("{} scored, {failed} failed", records.len() - failed));
    Ok(None)
}

fn default_lr(phase: Phase) -> f64 {
    match phase {
        Phase::One => 0.02,
        Phase::Classifier => 0.005,
        Phase::Two => 0.002,
        Phase::Three => 0.001,
    }
}

fn train_config(g: &Global, a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: a.lr.unwrap_or(default_lr(a.phase)),
        steps: a.steps,
        batch_size: a.batch,
        seed: g.seed,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Momentum => Optimizer::Momentum,
        },
        grad_clip: (a.grad_clip > 0.0).then_some(a.grad_clip),
        ..TrainConfig::new(a.phase)
    }
}

fn require<'a, T>(v: &'a Option<T>, flag: &str, phase: Phase) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("{flag} is required for --phase {phase}")).into())
}

fn training_items(g: &Global, a: &TrainArgs, pipeline: &Pipeline) -> Result<Vec<LabeledItem>> {
    match &a.manifest {
        Some(m) => manifest_items(pipeline, &Manifest::read(m)?, origin(OriginArg::Train)),
        None => Ok(toy_labeled_set(pipeline, a.items, a.artifact_fraction, &ArtifactSpec::default(), g.seed)),
    }
}

fn report_outcome(g: &Global, a: &TrainArgs, o: &TrainOutcome) -> Result<()> {
    if let Some(p) = &a.loss_curve {
        o.curve.write_jsonl(p)?;
    }
    note(
        g,
        format!(
            "phase {}: loss {:.6} -> {:.6} over {} steps",
            a.phase, o.initial_loss, o.final_loss, a.steps
        ),
    );
    Ok(())
}

pub fn train(g: &Global, a: &TrainArgs) -> Outcome {
    let cfg = train_config(g, a);
    match a.phase {
        Phase::One => {
            let (pipeline, start) = match &a.weights {
                Some(p) => load_model(p)?,
                None => {
                    let pc = match a.pipeline {
                        PipelineArg::Toy => PipelineConfig::toy(),
                        PipelineArg::Full => PipelineConfig::default(),
                    };
                    let w = pc.unet.init(&mut ChaCha8Rng::seed_from_u64(g.seed));
                    (Pipeline::new(pc)?, w)
                }
            };
            let oracle = TeacherOracle {
                seed: g.seed,
                n_pairs: a.pairs,
                artifact_fraction: a.artifact_fraction,
                ..TeacherOracle::default()
            };
            let o = phase1_distill(&start.subset(unet::PREFIX), &pipeline, &oracle, &cfg)?;
            report_outcome(g, a, &o)?;
            let mut out = o.weights;
            out.merge(&start.subset(cnn::PREFIX));
            save_model(&pipeline, out, &a.out)?;
        }
        Phase::Classifier => {
            let (pipeline, w) = load_model(require(&a.weights, "--weights", a.phase)?)?;
            let cnn_start = match &a.cnn_weights {
                Some(p) => load_weights(p)?.subset(cnn::PREFIX),
                None => pipeline.config.cnn.init(&mut ChaCha8Rng::seed_from_u64(g.seed)),
            };
            let items = training_items(g, a, &pipeline)?;
            let feats = classifier_features(&pipeline, &w, &items)?;
            let o = train_classifier(&cnn_start, &pipeline.config.cnn, &feats, &cfg, &[])?.outcome;
            report_outcome(g, a, &o)?;
            let mut out = w.subset(unet::PREFIX);
            out.merge(&o.weights);
            save_model(&pipeline, out, &a.out)?;
        }
        Phase::Two => {
            let cnn_path = require(&a.cnn_weights, "--cnn-weights", a.phase)?;
            let (pipeline, w) = load_model(require(&a.weights, "--weights", a.phase)?)?;
            let frozen = load_weights(cnn_path)?;
            let items = training_items(g, a, &pipeline)?;
            let o = phase2_steer(&w, &frozen, &pipeline, &items, &cfg)?;
            report_outcome(g, a, &o)?;
            save_model(&pipeline, o.weights, &a.out)?;
        }
        Phase::Three => {
            let (pipeline, mut w) = load_model(require(&a.weights, "--weights", a.phase)?)?;
            if let Some(p) = &a.cnn_weights {
                w.merge(&load_weights(p)?.subset(cnn::PREFIX));
            }
            let items = training_items(g, a, &pipeline)?;
            let held_out = match &a.manifest {
                Some(m) => manifest_items(&pipeline, &Manifest::read(m)?, origin(OriginArg::Test))?,
                None => toy_labeled_set(
                    &pipeline,
                    a.held_out,
                    a.artifact_fraction,
                    &ArtifactSpec::default(),
                    g.seed.wrapping_add(1),
                ),
            };
            let workdir = Workdir::new(a.workdir.as_ref())?;
            let bank = codec_bank(a.bank, a.templates.as_ref(), &workdir, g.seed)?;
            let o = phase3_codec_aware(&w, &pipeline, &items, &held_out, bank.as_ref(), &cfg)?;
            report_outcome(g, a, &o.training)?;
            note(g, format!("cross-codec spread {:.6} -> {:.6}", o.delta_before, o.delta_after));
            save_model(&pipeline, o.training.weights, &a.out)?;
        }
    }
    Ok(None)
}

struct Loaded {
    manifest: Manifest,
    models: Vec<(String, Vec<PredictionRecord>)>,
    evaluation: Evaluation,
}

fn load_eval(e: &EvalInputs) -> Result<Loaded> {
    let manifest = Manifest::read(&e.manifest)?;
    let models = read_pred_args(&e.preds)?;
    let evaluation = evaluate(&manifest, &models[0].1, e.tau, origin(e.origin))?;
    Ok(Loaded {
        manifest,
        models,
        evaluation,
    })
}

fn sanity_config(s: &SanityGates) -> SanityConfig {
    SanityConfig {
        ai_min_tpr: s.ai_min_tpr,
        hard_ai_min_tpr: s.hard_ai_min_tpr,
        real_max_fpr: s.real_max_fpr,
        hard_patterns: s.hard_patterns.clone(),
    }
}

fn render_sanity(s: &SanityReport) -> String {
    let mut out = String::new();
    for v in &s.verdicts {
        let (what, cmp) = match v.class {
            Label::Ai => ("TPR", ">="),
            Label::Real => ("FPR", "<="),
        };
        let _ = writeln!(
            out,
            "{:<24} {} {:>7.2}% {cmp} {:>6.2}%  {}",
            v.subset,
            what,
            100.0 * v.rate,
            100.0 * v.threshold,
            match v.result {
                SanityResult::Pass => "PASS",
                SanityResult::Fail => "FAIL",
            }
        );
    }
    let _ = writeln!(out, "sanity: {} of {} subsets FAIL", s.fail_count, s.total);
    out
}

fn strict_verdict(strict: bool, s: &SanityReport) -> Option<EvalFailure> {
    (strict && s.fail_count > 0).then(|| EvalFailure(format!("{} sanity check(s) failed", s.fail_count)))
}

fn render_accounting(rows: &[AccountingPair]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} A n={} FPR={:.4}%  B n={} FPR={:.4}%  shift={:+.4} pp ({}){}",
            r.model,
            r.a.n_total,
            100.0 * r.a.metrics.fpr,
            r.b.n_total,
            100.0 * r.b.metrics.fpr,
            r.fpr_shift_pp,
            r.fpr_shift,
            if r.ai_imputation_applied { "  [ai-side imputation]" } else { "" }
        );
    }
    out
}

pub fn bench(g: &Global, a: &BenchArgs) -> Outcome {
    let l = load_eval(&a.inputs)?;
    let o = origin(a.inputs.origin);
    let scfg = sanity_config(&a.gates);
    let sanity = sanity_protocol(&SubsetRate::from_evaluation(&l.evaluation), &scfg)?;
    let by_model: BTreeMap<String, Vec<PredictionRecord>> = l.models.iter().cloned().collect();
    let accounting = dual_accounting(&l.manifest, &by_model, a.inputs.tau, o)?;
    let (scores, labels) = scored_pairs(&l.manifest, &l.models[0].1, o);
    let roc = if scores.is_empty() {
        None
    } else {
        Some(roc_sweep(&scores, &labels, &default_grid())?)
    };

    let m = &l.evaluation.overall;
    let mut out = String::new();
    writeln!(
        out,
        "model {}: n={} precision={:.4} recall={:.4} f1={:.4} fpr={:.4} auc={}",
        l.models[0].0,
        m.n,
        m.precision,
        m.recall,
        m.f1,
        m.fpr,
        m.auc.map_or("n/a".into(), |v| format!("{v:.4}"))
    )?;
    writeln!(out, "missing: {}", l.evaluation.missing.len())?;
    for s in &l.evaluation.subsets {
        writeln!(
            out,
            "subset {:<24} n={} missing={} recall={:.4} fpr={:.4}",
            s.name, s.metrics.n, s.n_missing, s.metrics.recall, s.metrics.fpr
        )?;
    }
    out += &render_sanity(&sanity);
    out += &render_accounting(&accounting);
    print!("{out}");

    if let Some(path) = &a.report {
        let verdict = strict_verdict(a.gates.strict, &sanity);
        let mut report = BenchReport::new(
            ReportConfig {
                tau: a.inputs.tau,
                origin: o,
                manifest_entries: l.manifest.len(),
                sanity: scfg,
                inputs: a.inputs.preds.clone(),
            },
            l.evaluation,
        );
        report.sanity = Some(sanity.clone());
        report.roc = roc;
        report.accounting = accounting;
        let files = emit_report(&report, path)?;
        note(g, format!("report written to {}", files.report.display()));
        return Ok(verdict);
    }
    Ok(strict_verdict(a.gates.strict, &sanity))
}

fn scored_pairs(
    manifest: &Manifest,
    preds: &[PredictionRecord],
    o: Option<rfx_core::bench::BenchOrigin>,
) -> (Vec<f64>, Vec<Label>) {
    let by_id: BTreeMap<&str, &PredictionRecord> = preds.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for e in manifest.filtered(o) {
        if let Some(p) = by_id
            .get(e.id.as_str())
            .filter(|r| r.is_ok())
            .and_then(|r| r.song_probability().ok())
        {
            scores.push(p);
            labels.push(e.label);
        }
    }
    (scores, labels)
}

pub fn roc(g: &Global, a: &RocArgs) -> Outcome {
    let manifest = Manifest::read(&a.inputs.manifest)?;
    let models = read_pred_args(&a.inputs.preds)?;
    let (scores, labels) = scored_pairs(&manifest, &models[0].1, origin(a.inputs.origin));
    let curve = roc_sweep(&scores, &labels, &default_grid())?;
    let mut csv = String::from("tau,tpr,fpr,precision,f1\n");
    for p in &curve.points {
        writeln!(csv, "{},{},{},{},{}", p.tau, p.tpr, p.fpr, p.precision, p.f1)?;
    }
    match &a.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    let mut summary = format!(
        "auc={}",
        curve.auc.map_or("n/a".into(), |v| format!("{v:.6}"))
    );
    if let Some(p) = &curve.operating_point {
        write!(summary, " operating_point tau={} tpr={:.4} fpr={:.4}", p.tau, p.tpr, p.fpr)?;
    }
    if let Some(p) = &curve.best_f1 {
        write!(summary, " best_f1={:.4} at tau={}", p.f1, p.tau)?;
    }
    if a.out.is_some() {
        println!("{summary}");
    } else {
        note(g, summary);
    }
    Ok(None)
}

pub fn sanity(_g: &Global, a: &SanityArgs) -> Outcome {
    let l = load_eval(&a.inputs)?;
    let s = sanity_protocol(&SubsetRate::from_evaluation(&l.evaluation), &sanity_config(&a.gates))?;
    print!("{}", render_sanity(&s));
    Ok(strict_verdict(a.gates.strict, &s))
}

pub fn codec_sweep(g: &Global, a: &CodecSweepArgs) -> Outcome {
    let (pipeline, w) = load_model(&a.weights)?;
    let manifest = Manifest::read(&a.manifest)?;
    let variants = CodecVariant::parse_list(&a.variants)?;
    let workdir = Workdir::new(a.workdir.as_ref())?;
    let bank = codec_bank(a.bank, a.templates.as_ref(), &workdir, g.seed)?;
    let o = origin(a.origin);
    let report = codecs::codec_sweep(&pipeline, &w, &manifest, &variants, bank.as_ref(), a.tau, o)?;
    let mut out = codecs::render_table(&report);
    let (dai, dreal) = match a.delta_level {
        DeltaLevel::Song => (report.delta_ai, report.delta_real),
        DeltaLevel::Segment => (report.delta_ai_segments, report.delta_real_segments),
    };
    writeln!(out, "cross-codec delta: ai={dai:.6} real={dreal:.6}")?;
    for f in &report.failures {
        writeln!(out, "failed {} [{}]: {}", f.track_id, f.variant, f.error)?;
    }
    for n in &report.notes {
        writeln!(out, "note: {n}")?;
    }
    let accounting = dual_accounting(&manifest, &report.predictions_by_model(), a.tau, o)?;
    out += &render_accounting(&accounting);
    print!("{out}");
    if let Some(path) = &a.out {
        report.write_rows_csv(path)?;
    }
    if let Some(dir) = &a.predictions_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (v, recs) in &report.predictions {
            write_predictions(&dir.join(format!("{}.jsonl", v.name())), recs)?;
        }
    }
    note(g, format!("{} failure(s)", report.failures.len()));
    let mut unavailable: Vec<&str> =
        report.failures.iter().filter(|f| f.environment).map(|f| f.variant.name()).collect();
    unavailable.dedup();
    if !unavailable.is_empty() {
        bail!(Error::Environment(format!("encoders unavailable for {}", unavailable.join(", "))));
    }
    Ok(None)
}

fn group_of(e: &rfx_core::bench::ManifestEntry) -> String {
    match e.label {
        Label::Real => bandwidth::HUMAN_GROUP.to_string(),
        Label::Ai if !e.generator.is_empty() => e.generator.clone(),
        Label::Ai => e.source_group.clone(),
    }
}

fn model_residual(pipeline: &Pipeline, w: &ModelWeights, path: &Path) -> rfx_core::Result<MagnitudeSpectrogram> {
    let wave = normalize(&decode_wav(path)?)?;
    let seg = segment(&wave, pipeline.config.segment_seconds())?;
    let parts = seg
        .segments
        .par_iter()
        .map(|s| unet_forward(&pipeline.spectrum(s)?.magnitude, w, &pipeline.config.unet))
        .collect::<rfx_core::Result<Vec<_>>>()?;
    let mut r = MagnitudeSpectrogram::zeros(0, pipeline.config.stft, pipeline.config.sample_rate);
    for p in parts {
        r.values.extend_from_slice(&p.values);
        r.n_frames += p.n_frames;
    }
    Ok(r)
}

pub fn bandwidth(g: &Global, a: &BandwidthArgs) -> Outcome {
    let manifest = Manifest::read(&a.manifest)?;
    let model = match (&a.weights, a.residual_audio) {
        (_, true) => None,
        (Some(p), false) => Some(load_model(p)?),
        (None, false) => bail!(Error::Config("--weights is required unless --residual-audio is set".into())),
    };
    let entries = manifest.filtered(origin(a.origin));
    let outcomes: Vec<(String, rfx_core::Result<BandwidthResult>)> = entries
        .par_iter()
        .map(|e| {
            let group = group_of(e);
            let r = match &model {
                None => decode_wav(Path::new(&e.path))
                    .and_then(|w| normalize(&w))
                    .and_then(|w| effective_bandwidth(&w.samples, w.sample_rate, &e.id, &group)),
                Some((pipeline, w)) => model_residual(pipeline, w, Path::new(&e.path))
                    .and_then(|r| effective_bandwidth_spectrogram(&r, &e.id, &group)),
            };
            (e.id.clone(), r)
        })
        .collect();
    let mut results = Vec::new();
    let mut out = String::new();
    for (id, r) in outcomes {
        match r {
            Ok(r) => results.push(r),
            Err(e) => writeln!(out, "skipped {id}: {e}")?,
        }
    }
    let mut expected: Vec<String> = entries.iter().map(|e| group_of(e)).collect();
    expected.sort();
    expected.dedup();
    let report = bandwidth::bandwidth_report(&results, &expected);
    out.insert_str(0, &bandwidth::render_table(&report.rows));
    for w in &report.warnings {
        writeln!(out, "warning: {w}")?;
    }
    print!("{out}");
    if let Some(p) = &a.out {
        bandwidth::write_results_csv(p, &results)?;
    }
    if let Some(p) = &a.report {
        bandwidth::write_report_csv(p, &report)?;
    }
    note(g, format!("{} of {} tracks measured", results.len(), entries.len()));
    Ok(None)
}

pub fn ablate(g: &Global, a: &AblateArgs) -> Outcome {
    let (pipeline, w) = load_model(&a.weights)?;
    pipeline.check_weights(&w)?;
    let (train, eval) = match &a.manifest {
        Some(m) => {
            let m = Manifest::read(m)?;
            (
                manifest_items(&pipeline, &m, origin(OriginArg::Train))?,
                manifest_items(&pipeline, &m, origin(OriginArg::Test))?,
            )
        }
        None => {
            let spec = ArtifactSpec::default();
            (
                toy_labeled_set(&pipeline, a.items, a.artifact_fraction, &spec, g.seed),
                toy_labeled_set(&pipeline, a.items, a.artifact_fraction, &spec, g.seed.wrapping_add(1)),
            )
        }
    };
    let means = channel_means(&classifier_features(&pipeline, &w, &train)?)?;
    let eval = classifier_features(&pipeline, &w, &eval)?;
    let cnn_w = w.subset(cnn::PREFIX);
    let table = match a.channel {
        Some(c) => {
            let row = ablate_channel(&cnn_w, &pipeline.config.cnn, &eval, c, &means, a.tau)?;
            rfx_core::training::AblationTable { tau: a.tau, rows: vec![row] }
        }
        None => ablation_table(&cnn_w, &pipeline.config.cnn, &eval, &means, a.tau)?,
    };
    print!("{}", table.render());
    if let Some(p) = &a.out {
        write_text(p, &table.to_jsonl())?;
    }
    note(g, format!("{} evaluation items", eval.len()));
    Ok(None)
}

pub fn gradcheck(g: &Global, a: &GradcheckArgs) -> Outcome {
    if !(a.tolerance > 0.0) {
        bail!(Error::Config(format!("tolerance must be positive, got {}", a.tolerance)));
    }
    let suite = gradient_suite(g.seed, a.tolerance)?;
    let mut failed = Vec::new();
    for c in &suite {
        let ok = c.report.passed();
        println!(
            "{:<20} max_rel_error={:.3e}  {}",
            c.name,
            c.report.max_rel_error(),
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.name.clone());
        }
    }
    Ok((!failed.is_empty()).then(|| EvalFailure(format!("gradient check failed for {}", failed.join(", ")))))
}

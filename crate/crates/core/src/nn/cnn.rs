//! Compact segment classifier: three Conv-BN-ReLU-Pool blocks, global
//! average pooling and a two-layer head producing one logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::BatchStats;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::weights::{BoundParams, ModelWeights};
use crate::error::{Error, Result};
use crate::features::{FeatureTensor, N_CHANNELS};

pub const PREFIX: &str = "cnn.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub widths: [usize; 3],
    pub hidden: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            hidden: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with stored running statistics.
    Eval,
}

impl CnnConfig {
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = N_CHANNELS;
        for (i, &w) in self.widths.iter().enumerate() {
            let p = format!("{PREFIX}block{i}");
            out.push((format!("{p}.conv.w"), vec![w, cin, 3, 3]));
            out.push((format!("{p}.conv.b"), vec![w]));
            for s in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((format!("{p}.bn.{s}"), vec![w]));
            }
            cin = w;
        }
        out.push((format!("{PREFIX}fc1.w"), vec![self.hidden, cin]));
        out.push((format!("{PREFIX}fc1.b"), vec![self.hidden]));
        out.push((format!("{PREFIX}fc2.w"), vec![1, self.hidden]));
        out.push((format!("{PREFIX}fc2.b"), vec![1]));
        out
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelWeights {
        let mut w = ModelWeights::new();
        for (name, shape) in self.parameter_shapes() {
            let t = if name.ends_with(".w") {
                let fan_in: usize = shape[1..].iter().product();
                Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), rng)
            } else if name.ends_with("gamma") || name.ends_with("running_var") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            w.insert(name, t);
        }
        w.meta.insert(
            "cnn.config".into(),
            serde_json::to_string(self).expect("serializable"),
        );
        w
    }

    /// All-zero weights (unit running variance), whose output is exactly 0.5.
    pub fn zeros(&self) -> ModelWeights {
        let mut w = ModelWeights::new();
        for (name, shape) in self.parameter_shapes() {
            let v = if name.ends_with("running_var") { 1.0 } else { 0.0 };
            w.insert(name, Tensor::full(&shape, v));
        }
        w
    }

    pub fn check_weights(&self, w: &ModelWeights) -> Result<()> {
        for (name, shape) in self.parameter_shapes() {
            let t = w.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Weight(format!(
                    "`{}` has shape {:?}, config expects {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Trainable parameter names (running statistics excluded).
    pub fn is_trainable(name: &str) -> bool {
        name.starts_with(PREFIX) && !name.contains("running_")
    }
}

/// Logits `[n, 1]` for a `[n, 7, mels, frames]` batch.
pub fn logits_on_tape(
    tape: &Tape,
    p: &BoundParams,
    cfg: &CnnConfig,
    x: &Var,
    mode: BnMode,
) -> Result<(Var, Vec<BatchStats>)> {
    let [_, c, _, _] = x.value().dims4();
    if c != N_CHANNELS {
        return Err(Error::shape(
            "cnn input",
            format!("expected {} channels, got {}", N_CHANNELS, c),
        ));
    }
    let mut cur = x.clone();
    let mut stats = Vec::with_capacity(3);
    for i in 0..cfg.widths.len() {
        let pre = format!("{PREFIX}block{i}");
        let y = tape.conv2d(
            &cur,
            p.get(&format!("{pre}.conv.w"))?,
            p.get(&format!("{pre}.conv.b"))?,
        )?;
        let gamma = p.get(&format!("{pre}.bn.gamma"))?;
        let beta = p.get(&format!("{pre}.bn.beta"))?;
        let y = match mode {
            BnMode::Train => {
                let (y, s) = tape.batchnorm_train(&y, gamma, beta)?;
                stats.push(s);
                y
            }
            BnMode::Eval => tape.batchnorm_eval(
                &y,
                gamma,
                beta,
                p.get(&format!("{pre}.bn.running_mean"))?.value().data(),
                p.get(&format!("{pre}.bn.running_var"))?.value().data(),
            )?,
        };
        cur = tape.maxpool2(&tape.relu(&y))?;
    }
    let pooled = tape.global_avg_pool(&cur);
    let h = tape.relu(&tape.linear(
        &pooled,
        p.get(&format!("{PREFIX}fc1.w"))?,
        p.get(&format!("{PREFIX}fc1.b"))?,
    )?);
    let logit = tape.linear(
        &h,
        p.get(&format!("{PREFIX}fc2.w"))?,
        p.get(&format!("{PREFIX}fc2.b"))?,
    )?;
    Ok((logit, stats))
}

/// Updates running statistics with momentum `momentum` (weight on the new
/// batch), using the unbiased batch variance.
pub fn update_running_stats(
    w: &mut ModelWeights,
    stats: &[BatchStats],
    batch_count: usize,
    momentum: f64,
) -> Result<()> {
    for (i, s) in stats.iter().enumerate() {
        let pre = format!("{PREFIX}block{i}.bn");
        let unbias = if batch_count > 1 {
            batch_count as f64 / (batch_count as f64 - 1.0)
        } else {
            1.0
        };
        let rm = w
            .params
            .get_mut(&format!("{pre}.running_mean"))
            .ok_or_else(|| Error::Weight(format!("missing {pre}.running_mean")))?;
        for (r, m) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = w
            .params
            .get_mut(&format!("{pre}.running_var"))
            .ok_or_else(|| Error::Weight(format!("missing {pre}.running_var")))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbias;
        }
    }
    Ok(())
}

/// Segment probability `P(AI)` in eval mode.
pub fn cnn_forward(f: &FeatureTensor, w: &ModelWeights, cfg: &CnnConfig) -> Result<f64> {
    cfg.check_weights(w)?;
    let tape = Tape::no_grad();
    let p = BoundParams::bind(&tape, w, |_| false);
    let x = tape.constant(f.to_tensor());
    let (logit, _) = logits_on_tape(&tape, &p, cfg, &x, BnMode::Eval)?;
    Ok(super::ops::sigmoid(logit.value().item()))
}

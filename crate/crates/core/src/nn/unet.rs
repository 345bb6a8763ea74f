//! Bounded-mask U-Net residual extractor.
//!
//! The network maps a magnitude spectrogram `X` to mask logits `z`; the
//! residual is `r = m ⊙ X` with `m = 0.5·σ(z)`, so every residual cell is
//! at most half of its input cell. The input is divided by its maximum
//! before entering the network and the mask is applied to the original
//! magnitudes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::weights::{BoundParams, ModelWeights};
use crate::error::{Error, Result};
use crate::spectral::MagnitudeSpectrogram;

pub const PREFIX: &str = "unet.";

/// Upper bound of the mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskBound {
    /// `m = 0.5·σ(z)`
    Half,
    /// `m = σ(z)`, used only by the unbounded-mask ablation.
    Unit,
}

impl MaskBound {
    pub fn scale(self) -> f64 {
        match self {
            MaskBound::Half => 0.5,
            MaskBound::Unit => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub gated_bottleneck: bool,
    pub mask: MaskBound,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            gated_bottleneck: true,
            mask: MaskBound::Half,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("UNet depth and channels must be >= 1".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every parameter name with its shape.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize| {
            out.push((format!("{PREFIX}{name}.w"), vec![cout, cin, 3, 3]));
            out.push((format!("{PREFIX}{name}.b"), vec![cout]));
        };
        let mut cin = 1;
        for i in 0..self.depth {
            conv(format!("enc{i}"), cin, self.channels(i));
            cin = self.channels(i);
        }
        let cb = self.channels(self.depth);
        conv("proj".into(), cin, cb);
        if self.gated_bottleneck {
            conv("gate.conv1".into(), cb, cb);
            conv("gate.conv2".into(), cb, 2 * cb);
        }
        for i in (0..self.depth).rev() {
            conv(format!("dec{i}"), self.channels(i + 1) + self.channels(i), self.channels(i));
        }
        conv("out".into(), self.channels(0), 1);
        out
    }

    /// He-normal convolution weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelWeights {
        let mut w = ModelWeights::new();
        for (name, shape) in self.parameter_shapes() {
            let t = if name.ends_with(".w") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let gain = if name.contains(".out.") || name.contains("gate.conv2") {
                    0.5
                } else {
                    2.0
                };
                Tensor::randn(&shape, (gain / fan_in).sqrt(), rng)
            } else {
                Tensor::zeros(&shape)
            };
            w.insert(name, t);
        }
        w.meta.insert(
            "unet.config".into(),
            serde_json::to_string(self).expect("serializable"),
        );
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
}

fn conv_relu(tape: &Tape, p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
    let y = conv(tape, p, name, x)?;
    Ok(tape.relu(&y))
}

fn conv(tape: &Tape, p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
    let w = p.get(&format!("{PREFIX}{name}.w"))?;
    let b = p.get(&format!("{PREFIX}{name}.b"))?;
    tape.conv2d(x, w, b)
}

/// `[1, 1, H, W]` logits for a `[1, 1, H, W]` normalised input.
pub fn mask_logits(tape: &Tape, p: &BoundParams, cfg: &UNetConfig, x: &Var) -> Result<Var> {
    cfg.validate()?;
    let [_, _, h, w] = x.value().dims4();
    let unit = 1usize << cfg.depth;
    let (ph, pw) = (h.div_ceil(unit) * unit - h, w.div_ceil(unit) * unit - w);
    let mut cur = if ph > 0 || pw > 0 {
        tape.pad_reflect(x, ph, pw)
    } else {
        x.clone()
    };
    let mut skips = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let e = conv_relu(tape, p, &format!("enc{i}"), &cur)?;
        cur = tape.maxpool2(&e)?;
        skips.push(e);
    }
    let mut y = conv_relu(tape, p, "proj", &cur)?;
    if cfg.gated_bottleneck {
        let c = cfg.channels(cfg.depth);
        let u = conv_relu(tape, p, "gate.conv1", &y)?;
        let v = conv(tape, p, "gate.conv2", &u)?;
        let value = tape.slice_channels(&v, 0, c)?;
        let gate = tape.sigmoid(&tape.slice_channels(&v, c, c)?);
        y = tape.add(&y, &tape.mul(&value, &gate)?)?;
    }
    for i in (0..cfg.depth).rev() {
        let skip = &skips[i];
        let [_, _, sh, sw] = skip.value().dims4();
        let up = tape.upsample2_to(&y, sh, sw)?;
        let cat = tape.concat_channels(&[&up, skip])?;
        y = conv_relu(tape, p, &format!("dec{i}"), &cat)?;
    }
    let z = conv(tape, p, "out", &y)?;
    tape.crop(&z, h, w)
}

/// `m = scale · σ(z)` elementwise.
pub fn bounded_mask_on_tape(tape: &Tape, z: &Var, bound: MaskBound) -> Var {
    tape.scale(&tape.sigmoid(z), bound.scale())
}

/// `0.5 · σ(z)` on a plain tensor.
pub fn bounded_mask(z: &Tensor) -> Tensor {
    z.map(|v| 0.5 * super::ops::sigmoid(v))
}

/// Mask and residual for an input magnitude tensor `[1, 1, bins, frames]`.
pub struct UNetOutput {
    pub mask: Var,
    pub residual: Var,
    /// Maximum of the input used for normalisation (0 for silent input).
    pub scale: f64,
}

pub fn residual_on_tape(
    tape: &Tape,
    p: &BoundParams,
    cfg: &UNetConfig,
    magnitude: &Var,
) -> Result<UNetOutput> {
    let scale = magnitude.value().max_abs();
    let norm = if scale > 0.0 { 1.0 / scale } else { 0.0 };
    let x = tape.constant(magnitude.value().map(|v| v * norm));
    let z = mask_logits(tape, p, cfg, &x)?;
    let mask = bounded_mask_on_tape(tape, &z, cfg.mask);
    let residual = tape.mul(&mask, magnitude)?;
    Ok(UNetOutput {
        mask,
        residual,
        scale,
    })
}

/// Extracts the forensic residual of one spectrogram in inference mode.
pub fn unet_forward(
    x: &MagnitudeSpectrogram,
    w: &ModelWeights,
    cfg: &UNetConfig,
) -> Result<MagnitudeSpectrogram> {
    cfg.check_weights(w)?;
    let tape = Tape::no_grad();
    let p = BoundParams::bind(&tape, w, |_| false);
    let mag = tape.constant(x.to_tensor());
    let out = residual_on_tape(&tape, &p, cfg, &mag)?;
    MagnitudeSpectrogram::from_tensor(out.residual.value(), x.config, x.sample_rate)
}

/// Mask values for one spectrogram in inference mode.
pub fn unet_mask(x: &MagnitudeSpectrogram, w: &ModelWeights, cfg: &UNetConfig) -> Result<Tensor> {
    cfg.check_weights(w)?;
    let tape = Tape::no_grad();
    let p = BoundParams::bind(&tape, w, |_| false);
    let mag = tape.constant(x.to_tensor());
    let out = residual_on_tape(&tape, &p, cfg, &mag)?;
    Ok(out.mask.value().clone())
}

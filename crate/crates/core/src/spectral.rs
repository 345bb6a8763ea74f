//! STFT, mel projection and the multi-resolution spectral loss.
//!
//! Spectrograms are stored frame-major (`frames × bins`). On the autodiff
//! tape they are laid out as `[1, 1, bins, frames]` so that frequency is the
//! image height and time the width.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};

/// Floor inside the log of mel features.
pub const MEL_LOG_EPS: f64 = 1e-6;
/// Floor inside the log-magnitude term of the multi-resolution loss.
pub const LOSS_LOG_EPS: f64 = 1e-5;
pub const DEFAULT_N_MELS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 2048,
            hop: 512,
        }
    }
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        let cfg = Self { n_fft, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() || self.n_fft < 2 {
            return Err(Error::Config(format!("n_fft {} is not a power of two", self.n_fft)));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop {} must be in 1..={}",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of centred frames for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn bin_hz(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.n_fft as f64
    }
}

/// Non-negative magnitudes, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub values: Vec<f64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl MagnitudeSpectrogram {
    pub fn zeros(n_frames: usize, config: StftConfig, sample_rate: u32) -> Self {
        let n_bins = config.n_bins();
        Self {
            n_frames,
            n_bins,
            values: vec![0.0; n_frames * n_bins],
            config,
            sample_rate,
        }
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.n_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `[1, 1, bins, frames]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![0.0; self.values.len()];
        for t in 0..self.n_frames {
            for k in 0..self.n_bins {
                data[k * self.n_frames + t] = self.values[t * self.n_bins + k];
            }
        }
        Tensor::new(&[1, 1, self.n_bins, self.n_frames], data).expect("consistent")
    }

    pub fn from_tensor(t: &Tensor, config: StftConfig, sample_rate: u32) -> Result<Self> {
        let [_, c, bins, frames] = t.dims4();
        if c != 1 || bins != config.n_bins() || t.len() != bins * frames {
            return Err(Error::shape(
                "spectrogram",
                format!("tensor {:?} for {} bins", t.shape(), config.n_bins()),
            ));
        }
        let mut values = vec![0.0; t.len()];
        for k in 0..bins {
            for f in 0..frames {
                values[f * bins + k] = t.data()[k * frames + f];
            }
        }
        Ok(Self {
            n_frames: frames,
            n_bins: bins,
            values,
            config,
            sample_rate,
        })
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Log-compressed mel spectrogram, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn get(&self, frame: usize, mel: usize) -> f64 {
        self.values[frame * self.n_mels + mel]
    }
}

/// Complex STFT: magnitudes plus the phase needed for reconstruction.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub magnitude: MagnitudeSpectrogram,
    /// Phase in radians, same layout as `magnitude.values`.
    pub phase: Vec<f64>,
    /// Length of the analysed signal.
    pub signal_len: usize,
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable FFT plans and window for one [`StftConfig`].
pub struct StftPlan {
    pub config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("config", &self.config).finish()
    }
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: hann(config.n_fft),
            forward: planner.plan_fft_forward(config.n_fft),
            inverse: planner.plan_fft_inverse(config.n_fft),
        })
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.config.n_fft {
            return Err(Error::TooShort {
                what: "stft samples",
                have: len as f64,
                need: self.config.n_fft as f64,
            });
        }
        Ok(())
    }

    /// Index into the signal for padded position `j` (reflect padding of
    /// `n_fft / 2` on both sides).
    fn source_index(&self, j: usize, len: usize) -> usize {
        crate::nn::ops::reflect_index(j as isize - (self.config.n_fft / 2) as isize, len)
    }

    /// Complex half-spectra, frame-major `frames × bins`.
    pub fn complex(&self, samples: &[f64]) -> Result<Vec<Complex64>> {
        self.check_len(samples.len())?;
        let n = self.config.n_fft;
        let bins = self.config.n_bins();
        let frames = self.config.n_frames(samples.len());
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            for (i, b) in buf.iter_mut().enumerate() {
                let s = samples[self.source_index(t * self.config.hop + i, samples.len())];
                *b = Complex64::new(s * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok(out)
    }

    pub fn analyze(&self, samples: &[f64], sample_rate: u32) -> Result<Spectrum> {
        let spec = self.complex(samples)?;
        let frames = self.config.n_frames(samples.len());
        Ok(Spectrum {
            magnitude: MagnitudeSpectrogram {
                n_frames: frames,
                n_bins: self.config.n_bins(),
                values: spec.iter().map(|c| c.norm()).collect(),
                config: self.config,
                sample_rate,
            },
            phase: spec.iter().map(|c| c.arg()).collect(),
            signal_len: samples.len(),
        })
    }

    /// Squared-window overlap envelope over the padded timeline.
    fn envelope(&self, frames: usize) -> Vec<f64> {
        let n = self.config.n_fft;
        let mut env = vec![0.0; n + self.config.hop * (frames - 1)];
        for t in 0..frames {
            for i in 0..n {
                env[t * self.config.hop + i] += self.window[i] * self.window[i];
            }
        }
        env
    }

    /// Weighted overlap-add inverse of [`StftPlan::analyze`].
    pub fn synthesize(&self, magnitude: &[f64], phase: &[f64], frames: usize, len: usize) -> Vec<f64> {
        let n = self.config.n_fft;
        let bins = self.config.n_bins();
        let env = self.envelope(frames);
        let mut acc = vec![0.0; env.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            self.fill_hermitian(&mut buf, &magnitude[t * bins..(t + 1) * bins], &phase[t * bins..(t + 1) * bins]);
            self.inverse.process(&mut buf);
            for i in 0..n {
                acc[t * self.config.hop + i] += buf[i].re / n as f64 * self.window[i];
            }
        }
        (0..len)
            .map(|i| {
                let j = i + n / 2;
                if j < acc.len() && env[j] > 1e-10 {
                    acc[j] / env[j]
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn fill_hermitian(&self, buf: &mut [Complex64], mag: &[f64], phase: &[f64]) {
        let n = self.config.n_fft;
        for k in 0..=n / 2 {
            buf[k] = Complex64::from_polar(mag[k], phase[k]);
        }
        for k in 1..n / 2 {
            buf[n - k] = buf[k].conj();
        }
    }
}

pub fn stft(samples: &[f64], cfg: StftConfig, sample_rate: u32) -> Result<Spectrum> {
    StftPlan::new(cfg)?.analyze(samples, sample_rate)
}

pub fn istft(spectrum: &Spectrum) -> Result<Vec<f64>> {
    let m = &spectrum.magnitude;
    let plan = StftPlan::new(m.config)?;
    Ok(plan.synthesize(&m.values, &spectrum.phase, m.n_frames, spectrum.signal_len))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank spanning 0 Hz to Nyquist.
///
/// Rows are stored sparsely as `(first_bin, weights)` since each triangle
/// touches a contiguous run of bins.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<Self> {
        let n_bins = n_fft / 2 + 1;
        if n_mels == 0 || n_mels > n_bins {
            return Err(Error::Config(format!(
                "n_mels {} must be in 1..={} for n_fft {}",
                n_mels, n_bins, n_fft
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut rows = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0);
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            rows.push((first.unwrap_or(0), weights));
        }
        Ok(Self { n_mels, n_bins, rows })
    }

    pub fn row(&self, m: usize) -> (usize, &[f64]) {
        (self.rows[m].0, &self.rows[m].1)
    }

    pub fn weight(&self, m: usize, k: usize) -> f64 {
        let (start, w) = self.row(m);
        if k >= start && k < start + w.len() {
            w[k - start]
        } else {
            0.0
        }
    }

    /// Linear projection of one magnitude frame.
    pub fn apply(&self, frame: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let (start, w) = self.row(m);
            *o = w.iter().zip(&frame[start..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Mel projection followed by `ln(x + 1e-6)`.
pub fn mel_project(mag: &MagnitudeSpectrogram, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    if fb.n_bins != mag.n_bins {
        return Err(Error::Config(format!(
            "filterbank for {} bins applied to {} bins",
            fb.n_bins, mag.n_bins
        )));
    }
    let mut values = vec![0.0; mag.n_frames * fb.n_mels];
    for t in 0..mag.n_frames {
        let out = &mut values[t * fb.n_mels..(t + 1) * fb.n_mels];
        fb.apply(mag.frame(t), out);
        out.iter_mut().for_each(|v| *v = (*v + MEL_LOG_EPS).ln());
    }
    Ok(MelSpectrogram {
        n_frames: mag.n_frames,
        n_mels: fb.n_mels,
        values,
    })
}

impl Tape {
    /// Projects the height (frequency) axis of `[n, c, bins, frames]` through
    /// the filterbank, giving `[n, c, n_mels, frames]`.
    pub fn mel_filter(&self, x: &Var, fb: &Arc<MelFilterbank>) -> Result<Var> {
        let [n, c, h, w] = x.value().dims4();
        if h != fb.n_bins {
            return Err(Error::shape(
                "mel_filter",
                format!("{} bins vs filterbank {}", h, fb.n_bins),
            ));
        }
        let m = fb.n_mels;
        let xd = x.value().data();
        let mut out = vec![0.0; n * c * m * w];
        for nc in 0..n * c {
            for mi in 0..m {
                let (start, wts) = fb.row(mi);
                let dst = &mut out[(nc * m + mi) * w..(nc * m + mi + 1) * w];
                for (j, &wt) in wts.iter().enumerate() {
                    let src = &xd[(nc * h + start + j) * w..(nc * h + start + j + 1) * w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, m, w], out)?;
        let fb = Arc::clone(fb);
        Ok(self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                for mi in 0..m {
                    let (start, wts) = fb.row(mi);
                    let src = &g.data()[(nc * m + mi) * w..(nc * m + mi + 1) * w];
                    for (j, &wt) in wts.iter().enumerate() {
                        let dst = &mut gx[(nc * h + start + j) * w..(nc * h + start + j + 1) * w];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
            vec![Tensor::new(&[n, c, h, w], gx).expect("consistent")]
        }))
    }

    /// Differentiable mel projection with log compression.
    pub fn log_mel(&self, x: &Var, fb: &Arc<MelFilterbank>) -> Result<Var> {
        let mel = self.mel_filter(x, fb)?;
        Ok(self.log_eps(&mel, MEL_LOG_EPS))
    }

    /// STFT magnitude of a 1-D signal as `[1, 1, bins, frames]`.
    pub fn stft_magnitude(&self, signal: &Var, plan: &Arc<StftPlan>) -> Result<Var> {
        let samples = signal.value().data();
        let spec = plan.complex(samples)?;
        let cfg = plan.config;
        let (bins, frames, len) = (cfg.n_bins(), cfg.n_frames(samples.len()), samples.len());
        let mut mag = vec![0.0; bins * frames];
        for t in 0..frames {
            for k in 0..bins {
                mag[k * frames + t] = spec[t * bins + k].norm();
            }
        }
        let out = Tensor::new(&[1, 1, bins, frames], mag)?;
        let plan = Arc::clone(plan);
        let in_shape = signal.shape().to_vec();
        Ok(self.push(out, &[signal], move |g| {
            let n = cfg.n_fft;
            let mut gx = vec![0.0; len];
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            for t in 0..frames {
                buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
                for k in 0..bins {
                    let z = spec[t * bins + k];
                    let r = z.norm();
                    if r > 0.0 {
                        buf[k] = z.conj() * (g.data()[k * frames + t] / r);
                    }
                }
                plan.forward.process(&mut buf);
                for i in 0..n {
                    let src = plan.source_index(t * cfg.hop + i, len);
                    gx[src] += plan.window[i] * buf[i].re;
                }
            }
            vec![Tensor::new(&in_shape, gx).expect("consistent")]
        }))
    }

    /// Inverse STFT of `[1, 1, bins, frames]` magnitudes with a fixed phase
    /// (frame-major, as in [`Spectrum::phase`]).
    pub fn istft(
        &self,
        magnitude: &Var,
        phase: &Arc<Vec<f64>>,
        plan: &Arc<StftPlan>,
        len: usize,
    ) -> Result<Var> {
        let cfg = plan.config;
        let [_, _, bins, frames] = magnitude.value().dims4();
        if bins != cfg.n_bins() || phase.len() != bins * frames {
            return Err(Error::shape(
                "istft",
                format!("magnitude {:?}, phase {}", magnitude.shape(), phase.len()),
            ));
        }
        let md = magnitude.value().data();
        let mut frame_major = vec![0.0; bins * frames];
        for k in 0..bins {
            for t in 0..frames {
                frame_major[t * bins + k] = md[k * frames + t];
            }
        }
        let out = plan.synthesize(&frame_major, phase, frames, len);
        let out = Tensor::new(&[len], out)?;
        let plan = Arc::clone(plan);
        let phase = Arc::clone(phase);
        Ok(self.push(out, &[magnitude], move |g| {
            let n = cfg.n_fft;
            let env = plan.envelope(frames);
            let mut gp = vec![0.0; env.len()];
            for (i, gv) in g.data().iter().enumerate() {
                let j = i + n / 2;
                if j < env.len() && env[j] > 1e-10 {
                    gp[j] = gv / env[j];
                }
            }
            let mut gm = vec![0.0; bins * frames];
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            for t in 0..frames {
                for i in 0..n {
                    buf[i] = Complex64::new(gp[t * cfg.hop + i] * plan.window[i], 0.0);
                }
                plan.forward.process(&mut buf);
                for k in 0..bins {
                    let c = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                    let rot = Complex64::from_polar(1.0, phase[t * bins + k]);
                    gm[k * frames + t] = c / n as f64 * (rot * buf[k].conj()).re;
                }
            }
            vec![Tensor::new(&[1, 1, bins, frames], gm).expect("consistent")]
        }))
    }
}

/// Resolutions and floors of the multi-resolution STFT loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiResConfig {
    pub fft_sizes: Vec<usize>,
}

impl Default for MultiResConfig {
    fn default() -> Self {
        Self {
            fft_sizes: vec![512, 1024, 2048],
        }
    }
}

/// Precomputed plans for [`multires_stft_loss`].
#[derive(Debug)]
pub struct MultiResLoss {
    plans: Vec<Arc<StftPlan>>,
}

impl MultiResLoss {
    pub fn new(cfg: &MultiResConfig) -> Result<Self> {
        let plans = cfg
            .fft_sizes
            .iter()
            .map(|&n| StftPlan::new(StftConfig::new(n, (n / 4).max(1))?).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { plans })
    }

    /// Differentiable loss: for each resolution, spectral convergence plus
    /// mean log-magnitude distance, then the mean absolute sample error.
    ///
    /// The spectral-convergence denominator is the RMS of both Frobenius
    /// norms so that the whole loss is symmetric in its arguments.
    pub fn on_tape(&self, tape: &Tape, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "multires_stft_loss",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let diff = tape.sub(a, b)?;
        let mut total = tape.mean(&tape.abs(&diff));
        for plan in &self.plans {
            let ma = tape.stft_magnitude(a, plan)?;
            let mb = tape.stft_magnitude(b, plan)?;
            let d = tape.sub(&ma, &mb)?;
            let num = tape.sqrt(&tape.sum(&tape.square(&d)));
            let ea = tape.sum(&tape.square(&ma));
            let eb = tape.sum(&tape.square(&mb));
            let den = tape.sqrt(&tape.scale(&tape.add(&ea, &eb)?, 0.5));
            let sc = tape.div(&num, &den)?;
            let la = tape.log_eps(&ma, LOSS_LOG_EPS);
            let lb = tape.log_eps(&mb, LOSS_LOG_EPS);
            let lm = tape.mean(&tape.abs(&tape.sub(&la, &lb)?));
            total = tape.add(&total, &tape.add(&sc, &lm)?)?;
        }
        Ok(total)
    }
}

/// Multi-resolution STFT loss over `{512, 1024, 2048}` with hop `n / 4`.
pub fn multires_stft_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "multires_stft_loss",
            format!("lengths {} vs {}", a.len(), b.len()),
        ));
    }
    let loss = MultiResLoss::new(&MultiResConfig::default())?;
    let tape = Tape::no_grad();
    let va = tape.constant(Tensor::new(&[a.len()], a.to_vec())?);
    let vb = tape.constant(Tensor::new(&[b.len()], b.to_vec())?);
    Ok(loss.on_tape(&tape, &va, &vb)?.value().item())
}

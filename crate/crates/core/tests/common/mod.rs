//! Straight-line reference implementations used as test oracles. They share
//! no code with the library and favour obviousness over speed.

#![allow(dead_code)]

use std::f64::consts::PI;

pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// One-sided DFT magnitude of a real frame, evaluated term by term.
pub fn dft_magnitude(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * i % n) as f64 / n as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let mut i = i;
    while i < 0 || i >= n as isize {
        if i < 0 {
            i = -i;
        }
        if i >= n as isize {
            i = 2 * (n as isize - 1) - i;
        }
    }
    i as usize
}

/// Centred, reflect-padded, Hann-windowed STFT magnitudes, `frames × bins`.
pub fn stft_magnitude(x: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<f64>> {
    let w = hann(n_fft);
    let frames = 1 + x.len() / hop;
    (0..frames)
        .map(|t| {
            let frame: Vec<f64> = (0..n_fft)
                .map(|i| {
                    let j = (t * hop + i) as isize - (n_fft / 2) as isize;
                    x[reflect(j, x.len())] * w[i]
                })
                .collect();
            dft_magnitude(&frame)
        })
        .collect()
}

pub fn multires_loss(a: &[f64], b: &[f64], sizes: &[usize]) -> f64 {
    let mut total = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    for &n in sizes {
        let ma = stft_magnitude(a, n, n / 4);
        let mb = stft_magnitude(b, n, n / 4);
        let (mut num, mut ea, mut eb, mut logd, mut count) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (ra, rb) in ma.iter().zip(&mb) {
            for (&x, &y) in ra.iter().zip(rb) {
                num += (x - y) * (x - y);
                ea += x * x;
                eb += y * y;
                logd += ((x + 1e-5).ln() - (y + 1e-5).ln()).abs();
                count += 1.0;
            }
        }
        let den = ((ea + eb) / 2.0).sqrt();
        let sc = if den > 0.0 { num.sqrt() / den } else { 0.0 };
        total += sc + logd / count;
    }
    total
}

/// HTK mel filterbank, `n_mels × bins`, triangles evaluated piecewise.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sr: f64) -> Vec<Vec<f64>> {
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = to_mel(sr / 2.0);
    let pts: Vec<f64> = (0..n_mels + 2).map(|i| to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    (0..n_mels)
        .map(|m| {
            (0..=n_fft / 2)
                .map(|k| {
                    let f = k as f64 * sr / n_fft as f64;
                    if f > pts[m] && f <= pts[m + 1] {
                        (f - pts[m]) / (pts[m + 1] - pts[m])
                    } else if f > pts[m + 1] && f < pts[m + 2] {
                        (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1])
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// `mag[bin][frame]` -> `out[mel][frame]` with `ln(x + 1e-6)`.
pub fn log_mel(mag: &[Vec<f64>], fb: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let frames = mag[0].len();
    fb.iter()
        .map(|row| {
            (0..frames)
                .map(|t| (row.iter().zip(mag).map(|(w, m)| w * m[t]).sum::<f64>() + 1e-6).ln())
                .collect()
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn mirror(i: isize, n: usize) -> usize {
    // half-sample symmetric: -1 -> 0, n -> n - 1
    if i < 0 {
        mirror(-i - 1, n)
    } else if i >= n as isize {
        mirror(2 * n as isize - 1 - i, n)
    } else {
        i as usize
    }
}

/// Returns `(H, P)` for `mag[bin][frame]`.
pub fn hpss(mag: &[Vec<f64>], kt: usize, kf: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let bins = mag.len();
    let frames = mag[0].len();
    let mut h = vec![vec![0.0; frames]; bins];
    let mut p = vec![vec![0.0; frames]; bins];
    for k in 0..bins {
        for t in 0..frames {
            let ht = median(
                (0..kt as isize)
                    .map(|j| mag[k][mirror(t as isize + j - (kt / 2) as isize, frames)])
                    .collect(),
            );
            let pf = median(
                (0..kf as isize)
                    .map(|j| mag[mirror(k as isize + j - (kf / 2) as isize, bins)][t])
                    .collect(),
            );
            let d = ht * ht + pf * pf;
            let mask = if d > 0.0 { ht * ht / d } else { 0.0 };
            h[k][t] = mask * mag[k][t];
            p[k][t] = (1.0 - mask) * mag[k][t];
        }
    }
    (h, p)
}

/// Seven channels `[c][mel][frame]` for `mag[bin][frame]`.
pub fn channels(mag: &[Vec<f64>], fb: &[Vec<f64>], kt: usize, kf: usize) -> Vec<Vec<Vec<f64>>> {
    let frames = mag[0].len();
    let mels = fb.len();
    let (h, p) = hpss(mag, kt, kf);
    let mel_res = log_mel(mag, fb);
    let mel_h = log_mel(&h, fb);
    let mel_p = log_mel(&p, fb);
    let mut d1 = vec![vec![0.0; frames]; mels];
    let mut d2 = vec![vec![0.0; frames]; mels];
    for m in 0..mels {
        for t in 1..frames {
            d1[m][t] = mel_res[m][t] - mel_res[m][t - 1];
        }
        for t in 1..frames - 1 {
            d2[m][t] = mel_res[m][t + 1] - 2.0 * mel_res[m][t] + mel_res[m][t - 1];
        }
    }
    let mut ratio = vec![vec![0.0; frames]; mels];
    let mut flux = vec![vec![0.0; frames]; mels];
    for t in 0..frames {
        let sh: f64 = h.iter().map(|r| r[t]).sum();
        let sp: f64 = p.iter().map(|r| r[t]).sum();
        let fl: f64 = (0..mels).map(|m| d1[m][t].max(0.0).powi(2)).sum::<f64>().sqrt();
        for m in 0..mels {
            ratio[m][t] = (sh + 1e-6).ln() - (sp + 1e-6).ln();
            flux[m][t] = fl;
        }
    }
    vec![mel_res, mel_h, mel_p, d1, d2, ratio, flux]
}

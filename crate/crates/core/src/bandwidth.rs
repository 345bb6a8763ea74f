//! Effective bandwidth of a residual: the frequency below which 95% of its
//! track-averaged spectral energy lies, and per-generator aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{stft, MagnitudeSpectrogram, StftConfig};

pub const ENERGY_FRACTION: f64 = 0.95;
pub const HUMAN_GROUP: &str = "human";
/// Human residuals below this bandwidth are flagged as likely low-passed
/// or heavily mastered.
pub const HUMAN_WARNING_HZ: f64 = 800.0;

pub fn analysis_config() -> StftConfig {
    StftConfig { n_fft: 2048, hop: 512 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthResult {
    pub track_id: String,
    pub group: String,
    pub f_star: f64,
    /// Energy fraction up to the upper edge of the crossing bin (≥ 0.95).
    pub cumulative_fraction: f64,
}

/// Mean of `|X|²` over frames, per bin.
pub fn mean_energy_spectrum(mag: &MagnitudeSpectrogram) -> Vec<f64> {
    let mut e = vec![0.0; mag.n_bins];
    for t in 0..mag.n_frames {
        for (acc, v) in e.iter_mut().zip(mag.frame(t)) {
            *acc += v * v;
        }
    }
    let n = mag.n_frames.max(1) as f64;
    e.iter_mut().for_each(|v| *v /= n);
    e
}

/// `(f*, fraction)` for a per-bin energy spectrum of an `n_fft`-point
/// transform. Bin `k` covers `[(k - ½)Δf, (k + ½)Δf]` clipped to
/// `[0, Nyquist]`; within the crossing bin energy is taken as uniform.
pub fn crossing_frequency(energy: &[f64], n_fft: usize, sample_rate: u32) -> Result<(f64, f64)> {
    let total: f64 = energy.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedBandwidth);
    }
    let df = sample_rate as f64 / n_fft as f64;
    let nyquist = sample_rate as f64 / 2.0;
    let target = ENERGY_FRACTION * total;
    let mut below = 0.0;
    for (k, &e) in energy.iter().enumerate() {
        let cum = below + e;
        if cum >= target && e > 0.0 {
            let lo = ((k as f64 - 0.5) * df).max(0.0);
            let hi = ((k as f64 + 0.5) * df).min(nyquist);
            let t = ((target - below) / e).clamp(0.0, 1.0);
            return Ok((lo + t * (hi - lo), cum / total));
        }
        below = cum;
    }
    // rounding left the running sum a hair short of the target
    Ok((nyquist, 1.0))
}

pub fn effective_bandwidth_spectrogram(
    mag: &MagnitudeSpectrogram,
    track_id: impl Into<String>,
    group: impl Into<String>,
) -> Result<BandwidthResult> {
    let e = mean_energy_spectrum(mag);
    let (f_star, cumulative_fraction) = crossing_frequency(&e, mag.config.n_fft, mag.sample_rate)?;
    Ok(BandwidthResult {
        track_id: track_id.into(),
        group: group.into(),
        f_star,
        cumulative_fraction,
    })
}

/// Effective bandwidth of residual audio with the 2048/512 analysis.
pub fn effective_bandwidth(
    samples: &[f64],
    sample_rate: u32,
    track_id: impl Into<String>,
    group: impl Into<String>,
) -> Result<BandwidthResult> {
    if samples.iter().all(|&s| s == 0.0) {
        return Err(Error::UndefinedBandwidth);
    }
    let spec = stft(samples, analysis_config(), sample_rate)?;
    effective_bandwidth_spectrogram(&spec.magnitude, track_id, group)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Generator,
    AiAverage,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRow {
    pub label: String,
    pub kind: RowKind,
    pub n: usize,
    pub mean_f_star: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub rows: Vec<BandwidthRow>,
    pub warnings: Vec<String>,
}

fn is_human(group: &str) -> bool {
    group.eq_ignore_ascii_case(HUMAN_GROUP)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Generator rows sorted by bandwidth, then the AI average over all AI
/// tracks and the human row. Groups listed in `expected_groups` without
/// results are omitted with a warning.
pub fn bandwidth_report(results: &[BandwidthResult], expected_groups: &[String]) -> BandwidthReport {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for r in results {
        groups.entry(r.group.as_str()).or_default().push(r.f_star);
        if is_human(&r.group) && r.f_star < HUMAN_WARNING_HZ {
            warnings.push(format!(
                "human track `{}` has f* = {:.1} Hz < {HUMAN_WARNING_HZ} Hz; check for low-pass or mastering confounders",
                r.track_id, r.f_star
            ));
        }
    }
    for g in expected_groups {
        if !groups.contains_key(g.as_str()) {
            warnings.push(format!("group `{g}` has no results and is omitted"));
        }
    }
    let mut rows: Vec<BandwidthRow> = groups
        .iter()
        .filter(|(g, _)| !is_human(g))
        .map(|(g, v)| BandwidthRow {
            label: g.to_string(),
            kind: RowKind::Generator,
            n: v.len(),
            mean_f_star: mean(v),
        })
        .collect();
    rows.sort_by(|a, b| a.mean_f_star.total_cmp(&b.mean_f_star).then(a.label.cmp(&b.label)));
    let ai: Vec<f64> = results.iter().filter(|r| !is_human(&r.group)).map(|r| r.f_star).collect();
    if !ai.is_empty() {
        rows.push(BandwidthRow {
            label: format!("AI avg (n={}, {} gen.)", ai.len(), rows.len()),
            kind: RowKind::AiAverage,
            n: ai.len(),
            mean_f_star: mean(&ai),
        });
    }
    let human: Vec<f64> = results.iter().filter(|r| is_human(&r.group)).map(|r| r.f_star).collect();
    if !human.is_empty() {
        rows.push(BandwidthRow {
            label: "Human music".into(),
            kind: RowKind::Human,
            n: human.len(),
            mean_f_star: mean(&human),
        });
    }
    BandwidthReport { rows, warnings }
}

/// Published reference rows, for layout checks and side-by-side output.
pub fn reference_rows() -> Vec<BandwidthRow> {
    let g = |label: &str, hz: f64| BandwidthRow {
        label: label.into(),
        kind: RowKind::Generator,
        n: 0,
        mean_f_star: hz,
    };
    vec![
        g("Suno v3.5", 170.0),
        g("Riffusion", 219.0),
        g("Stable Audio", 237.0),
        g("Udio", 245.0),
        g("MusicGen", 255.0),
        BandwidthRow {
            label: "AI avg (n=50, 22 gen.)".into(),
            kind: RowKind::AiAverage,
            n: 50,
            mean_f_star: 291.0,
        },
        BandwidthRow {
            label: "Human music".into(),
            kind: RowKind::Human,
            n: 44,
            mean_f_star: 1996.0,
        },
    ]
}

/// Plain-text table: label and bandwidth rounded to whole hertz.
pub fn render_table(rows: &[BandwidthRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Generator".len());
    let mut s = format!("{:<w$}  {:>17}\n", "Generator", "Effective BW (Hz)");
    for r in rows {
        let _ = writeln!(s, "{:<w$}  {:>17.0}", r.label, r.mean_f_star);
    }
    s
}

pub fn write_results_csv(path: &Path, results: &[BandwidthResult]) -> Result<()> {
    write_csv(path, results)
}

pub fn write_report_csv(path: &Path, report: &BandwidthReport) -> Result<()> {
    write_csv(path, &report.rows)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("csv: {e}")))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

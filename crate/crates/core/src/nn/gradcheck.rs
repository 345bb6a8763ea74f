//! Finite-difference verification of backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Entries checked per parameter; `None` checks every entry.
    pub samples_per_param: Option<usize>,
    /// Denominator floor of the relative error, so that two gradients that
    /// are both numerically zero compare as equal.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_param: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entries whose relative error exceeds the tolerance.
    pub flagged: Vec<EntryCheck>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares reverse-mode gradients of `forward` against central
/// differences.
///
/// `forward` maps leaf variables (one per entry of `params`, in order) to an
/// output of any shape; the output is contracted with a fixed random
/// projection so that every output cell contributes to the checked scalar.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    forward: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = forward(&tape, &leaves)?;
    let projection = Tensor::randn(out.shape(), 1.0, &mut rng);
    let proj = tape.constant(projection.clone());
    let loss = tape.sum(&tape.mul(&out, &proj)?);
    let grads = tape.backward(&loss);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let t = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = forward(&t, &vars)?;
        Ok(out
            .value()
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(&leaves[pi]);
        let indices: Vec<usize> = match cfg.samples_per_param {
            Some(k) if k < tensor.len() => {
                let mut idx = sample(&mut rng, tensor.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..tensor.len()).collect(),
        };
        let mut max_rel = 0.0f64;
        let mut flagged = Vec::new();
        for &i in &indices {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + cfg.step;
            let plus = eval(&values)?;
            values[pi].data_mut()[i] = orig - cfg.step;
            let minus = eval(&values)?;
            values[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric, cfg.floor);
            max_rel = max_rel.max(rel);
            if rel > cfg.tolerance {
                flagged.push(EntryCheck {
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        reports.push(ParamReport {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: max_rel,
            flagged,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params: reports,
    })
}

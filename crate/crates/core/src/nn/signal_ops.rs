//! Tape operations over spectrogram-shaped `[n, c, freq, time]` tensors.

use super::ops::symmetric_index;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Freq,
    Time,
}

impl Tape {
    /// Sliding median of odd width `k` along `axis`, with half-sample
    /// symmetric extension at the edges. The gradient flows to the element
    /// selected as the median.
    pub fn median_filter(&self, x: &Var, axis: Axis, k: usize) -> Result<Var> {
        if k % 2 == 0 || k < 3 {
            return Err(Error::Config(format!("median kernel {} must be odd and >= 3", k)));
        }
        let [n, c, h, w] = x.value().dims4();
        let xd = x.value().data();
        let half = (k / 2) as isize;
        let mut out = vec![0.0; xd.len()];
        let mut arg = vec![0u32; xd.len()];
        let mut window: Vec<(f64, u32)> = Vec::with_capacity(k);
        for nc in 0..n * c {
            let base = nc * h * w;
            for y in 0..h {
                for t in 0..w {
                    window.clear();
                    for d in -half..=half {
                        let idx = match axis {
                            Axis::Time => y * w + symmetric_index(t as isize + d, w),
                            Axis::Freq => symmetric_index(y as isize + d, h) * w + t,
                        };
                        window.push((xd[base + idx], (base + idx) as u32));
                    }
                    let (_, med, _) =
                        window.select_nth_unstable_by(k / 2, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    out[base + y * w + t] = med.0;
                    arg[base + y * w + t] = med.1;
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&shape);
            let d = gx.data_mut();
            for (o, &i) in arg.iter().enumerate() {
                d[i as usize] += g.data()[o];
            }
            vec![gx]
        }))
    }

    /// First temporal difference `x[t] - x[t-1]`, zero at `t = 0`.
    pub fn time_diff(&self, x: &Var) -> Var {
        let [n, c, h, w] = x.value().dims4();
        let xd = x.value().data();
        let mut out = vec![0.0; xd.len()];
        for row in 0..n * c * h {
            for t in 1..w {
                out[row * w + t] = xd[row * w + t] - xd[row * w + t - 1];
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(&shape, out).expect("consistent");
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; g.len()];
            for row in 0..n * c * h {
                for t in 1..w {
                    let gv = g.data()[row * w + t];
                    gx[row * w + t] += gv;
                    gx[row * w + t - 1] -= gv;
                }
            }
            vec![Tensor::new(&shape, gx).expect("consistent")]
        })
    }

    /// Centred second difference `x[t+1] - 2x[t] + x[t-1]`, zero at both ends.
    pub fn time_diff2(&self, x: &Var) -> Var {
        let [n, c, h, w] = x.value().dims4();
        let xd = x.value().data();
        let mut out = vec![0.0; xd.len()];
        for row in 0..n * c * h {
            for t in 1..w.saturating_sub(1) {
                let i = row * w + t;
                out[i] = xd[i + 1] - 2.0 * xd[i] + xd[i - 1];
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(&shape, out).expect("consistent");
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; g.len()];
            for row in 0..n * c * h {
                for t in 1..w.saturating_sub(1) {
                    let i = row * w + t;
                    let gv = g.data()[i];
                    gx[i + 1] += gv;
                    gx[i] -= 2.0 * gv;
                    gx[i - 1] += gv;
                }
            }
            vec![Tensor::new(&shape, gx).expect("consistent")]
        })
    }

    /// Sum over the frequency axis: `[n, c, h, w] -> [n, c, 1, w]`.
    pub fn sum_freq(&self, x: &Var) -> Var {
        let [n, c, h, w] = x.value().dims4();
        let xd = x.value().data();
        let mut out = vec![0.0; n * c * w];
        for nc in 0..n * c {
            for y in 0..h {
                for t in 0..w {
                    out[nc * w + t] += xd[(nc * h + y) * w + t];
                }
            }
        }
        let out = Tensor::new(&[n, c, 1, w], out).expect("consistent");
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                for y in 0..h {
                    gx[(nc * h + y) * w..(nc * h + y + 1) * w]
                        .copy_from_slice(&g.data()[nc * w..(nc + 1) * w]);
                }
            }
            vec![Tensor::new(&[n, c, h, w], gx).expect("consistent")]
        })
    }

    /// Repeats a `[n, c, 1, w]` row across `h` frequency rows.
    pub fn broadcast_freq(&self, x: &Var, h: usize) -> Result<Var> {
        let [n, c, one, w] = x.value().dims4();
        if one != 1 {
            return Err(Error::shape("broadcast_freq", format!("{:?}", x.shape())));
        }
        let xd = x.value().data();
        let mut out = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            for y in 0..h {
                out[(nc * h + y) * w..(nc * h + y + 1) * w].copy_from_slice(&xd[nc * w..(nc + 1) * w]);
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; n * c * w];
            for nc in 0..n * c {
                for y in 0..h {
                    for t in 0..w {
                        gx[nc * w + t] += g.data()[(nc * h + y) * w + t];
                    }
                }
            }
            vec![Tensor::new(&[n, c, 1, w], gx).expect("consistent")]
        }))
    }
}

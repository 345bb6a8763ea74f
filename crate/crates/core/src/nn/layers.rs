//! Convolutional building blocks with hand-written backward rules.

use std::rc::Rc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Output index range `[lo, hi)` whose input partner `i + d` lies inside an
/// axis of length `len`.
#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [n, c, h, wd] = x.dims4();
    let [o, _, k, _] = w.dims4();
    let p = (k / 2) as isize;
    let plane = h * wd;
    let mut out = vec![0.0; n * o * plane];
    let xd = x.data();
    let wdat = w.data();
    for bi in 0..n {
        for oc in 0..o {
            let dst = &mut out[(bi * o + oc) * plane..(bi * o + oc + 1) * plane];
            dst.fill(b.data()[oc]);
            for ic in 0..c {
                let src = &xd[(bi * c + ic) * plane..(bi * c + ic + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let wv = wdat[((oc * c + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = tap_range(wd, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * wd + x0..y * wd + x1];
                            let srow = &src[sy * wd + (x0 as isize + dx) as usize
                                ..sy * wd + (x1 as isize + dx) as usize];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, o, h, wd], out).expect("consistent")
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, wd] = x.dims4();
    let [o, _, k, _] = w.dims4();
    let p = (k / 2) as isize;
    let plane = h * wd;
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdat.len()];
    let mut gb = vec![0.0; o];
    for bi in 0..n {
        for oc in 0..o {
            let gsrc = &gd[(bi * o + oc) * plane..(bi * o + oc + 1) * plane];
            gb[oc] += gsrc.iter().sum::<f64>();
            for ic in 0..c {
                let xsrc = &xd[(bi * c + ic) * plane..(bi * c + ic + 1) * plane];
                let gxdst = &mut gx[(bi * c + ic) * plane..(bi * c + ic + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let widx = ((oc * c + ic) * k + ky) * k + kx;
                        let wv = wdat[widx];
                        let (x0, x1) = tap_range(wd, dx);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gsrc[y * wd + x0..y * wd + x1];
                            let s0 = sy * wd + (x0 as isize + dx) as usize;
                            let s1 = sy * wd + (x1 as isize + dx) as usize;
                            let xrow = &xsrc[s0..s1];
                            acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            let gxrow = &mut gxdst[s0..s1];
                            for (d, gv) in gxrow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), gx).expect("consistent"),
        Tensor::new(w.shape(), gw).expect("consistent"),
        Tensor::new(&[o], gb).expect("consistent"),
    )
}

impl Tape {
    /// Stride-1 "same" convolution with an odd square kernel and zero padding.
    pub fn conv2d(&self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let [_, c, _, _] = x.value().dims4();
        let ws = w.shape();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} incompatible with kernel {:?}", x.shape(), ws),
            ));
        }
        if b.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} outputs", b.shape(), ws[0]),
            ));
        }
        let out = conv_forward(x.value(), w.value(), b.value());
        let (xv, wv) = (x.rc(), w.rc());
        Ok(self.push(out, &[x, w, b], move |g| {
            let (gx, gw, gb) = conv_backward(&xv, &wv, g);
            vec![gx, gw, gb]
        }))
    }

    /// Batch normalisation over (batch, height, width) using the statistics
    /// of the current batch.
    pub fn batchnorm_train(&self, x: &Var, gamma: &Var, beta: &Var) -> Result<(Var, BatchStats)> {
        let [n, c, h, w] = x.value().dims4();
        check_affine("batchnorm", c, gamma, beta)?;
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = x.value().data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
            }
            let mu = s / m;
            let mut v = 0.0;
            for b in 0..n {
                v += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter()
                    .map(|x| (x - mu) * (x - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        let xhat = Rc::new(xhat);
        let gv = gamma.rc();
        let y = self.push(out, &[x, gamma, beta], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; gd.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let (mut sg, mut sgx) = (0.0, 0.0);
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        sg += gd[i];
                        sgx += gd[i] * xhat[i];
                    }
                }
                ggamma[ch] = sgx;
                gbeta[ch] = sg;
                let k = gv.data()[ch] * inv_std[ch] / m;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        gx[i] = k * (m * gd[i] - sg - xhat[i] * sgx);
                    }
                }
            }
            vec![
                Tensor::new(&shape, gx).expect("consistent"),
                Tensor::new(&[c], ggamma).expect("consistent"),
                Tensor::new(&[c], gbeta).expect("consistent"),
            ]
        });
        Ok((y, BatchStats { mean, var }))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batchnorm_eval(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let [n, c, h, w] = x.value().dims4();
        check_affine("batchnorm", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm", "running statistics length"));
        }
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xd = x.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    out[i] = gd[ch] * (xd[i] - running_mean[ch]) * inv_std[ch] + bd[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        let (xv, gv) = (x.rc(), gamma.rc());
        let mean = running_mean.to_vec();
        Ok(self.push(out, &[x, gamma, beta], move |g| {
            let gdat = g.data();
            let mut gx = vec![0.0; gdat.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        let xhat = (xv.data()[i] - mean[ch]) * inv_std[ch];
                        gx[i] = gdat[i] * gv.data()[ch] * inv_std[ch];
                        ggamma[ch] += gdat[i] * xhat;
                        gbeta[ch] += gdat[i];
                    }
                }
            }
            vec![
                Tensor::new(&shape, gx).expect("consistent"),
                Tensor::new(&[c], ggamma).expect("consistent"),
                Tensor::new(&[c], gbeta).expect("consistent"),
            ]
        }))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2(&self, x: &Var) -> Result<Var> {
        let [n, c, h, w] = x.value().dims4();
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape("maxpool2", format!("{}x{} too small", h, w)));
        }
        let xd = x.value().data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for nc in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (nc * h + 2 * y + dy) * w + 2 * xx + dx;
                        if xd[i] > best {
                            best = xd[i];
                            bi = i;
                        }
                    }
                    let o = (nc * oh + y) * ow + xx;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.push(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            let d = gx.data_mut();
            for (o, &i) in arg.iter().enumerate() {
                d[i] += g.data()[o];
            }
            vec![gx]
        }))
    }

    /// Adaptive average pooling to a 1×1 output: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&self, x: &Var) -> Var {
        let [n, c, h, w] = x.value().dims4();
        let plane = h * w;
        let out: Vec<f64> = x
            .value()
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(&[n, c], out).expect("consistent");
        let in_shape = x.shape().to_vec();
        self.push(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            for (chunk, gv) in gx.data_mut().chunks_mut(plane).zip(g.data()) {
                chunk.fill(gv / plane as f64);
            }
            vec![gx]
        })
    }

    /// Fully connected layer: `[n, in] × [out, in]ᵀ + [out] -> [n, out]`.
    pub fn linear(&self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || b.shape() != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", xs, ws, b.shape()),
            ));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (x.value().data(), w.value().data(), b.value().data());
        let mut out = vec![0.0; n * fout];
        for i in 0..n {
            for o in 0..fout {
                out[i * fout + o] = bd[o]
                    + xd[i * fin..(i + 1) * fin]
                        .iter()
                        .zip(&wd[o * fin..(o + 1) * fin])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
        }
        let out = Tensor::new(&[n, fout], out)?;
        let (xv, wv) = (x.rc(), w.rc());
        Ok(self.push(out, &[x, w, b], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; n * fin];
            let mut gw = vec![0.0; fout * fin];
            let mut gb = vec![0.0; fout];
            for i in 0..n {
                for o in 0..fout {
                    let gv = gd[i * fout + o];
                    gb[o] += gv;
                    for f in 0..fin {
                        gx[i * fin + f] += gv * wv.data()[o * fin + f];
                        gw[o * fin + f] += gv * xv.data()[i * fin + f];
                    }
                }
            }
            vec![
                Tensor::new(&[n, fin], gx).expect("consistent"),
                Tensor::new(&[fout, fin], gw).expect("consistent"),
                Tensor::new(&[fout], gb).expect("consistent"),
            ]
        }))
    }
}

fn check_affine(layer: &str, c: usize, gamma: &Var, beta: &Var) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            layer,
            format!(
                "{} channels but gamma {:?}, beta {:?}",
                c,
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

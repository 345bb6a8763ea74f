//! Elementwise, reduction and shape operations on the tape.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x + y);
        Ok(self.push(out, &[a, b], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x - y);
        Ok(self.push(out, &[a, b], |g| vec![g.clone(), g.map(|v| -v)]))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x * y);
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.push(out, &[a, b], move |g| {
            vec![g.zip_map(&bv, |g, y| g * y), g.zip_map(&av, |g, x| g * x)]
        }))
    }

    /// `a / b`, with cells where `b == 0` producing 0 and no gradient.
    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("div", a, b)?;
        let out = a
            .value()
            .zip_map(b.value(), |x, y| if y == 0.0 { 0.0 } else { x / y });
        let (bv, ov) = (b.rc(), std::rc::Rc::new(out.clone()));
        Ok(self.push(out, &[a, b], move |g| {
            let ga = g.zip_map(&bv, |g, y| if y == 0.0 { 0.0 } else { g / y });
            let mut gb = Tensor::zeros(bv.shape());
            for (i, v) in gb.data_mut().iter_mut().enumerate() {
                let y = bv.data()[i];
                if y != 0.0 {
                    *v = -g.data()[i] * ov.data()[i] / y;
                }
            }
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let out = a.value().map(|x| x * c);
        self.push(out, &[a], move |g| vec![g.map(|v| v * c)])
    }

    pub fn add_scalar(&self, a: &Var, c: f64) -> Var {
        let out = a.value().map(|x| x + c);
        self.push(out, &[a], |g| vec![g.clone()])
    }

    /// `1 - a`
    pub fn one_minus(&self, a: &Var) -> Var {
        let out = a.value().map(|x| 1.0 - x);
        self.push(out, &[a], |g| vec![g.map(|v| -v)])
    }

    pub fn square(&self, a: &Var) -> Var {
        let out = a.value().map(|x| x * x);
        let av = a.rc();
        self.push(out, &[a], move |g| vec![g.zip_map(&av, |g, x| 2.0 * g * x)])
    }

    /// Square root with a zero gradient at 0.
    pub fn sqrt(&self, a: &Var) -> Var {
        let out = a.value().map(|x| x.max(0.0).sqrt());
        let ov = std::rc::Rc::new(out.clone());
        self.push(out, &[a], move |g| {
            vec![g.zip_map(&ov, |g, s| if s > 0.0 { 0.5 * g / s } else { 0.0 })]
        })
    }

    pub fn abs(&self, a: &Var) -> Var {
        let out = a.value().map(f64::abs);
        let av = a.rc();
        self.push(out, &[a], move |g| {
            vec![g.zip_map(&av, |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })]
        })
    }

    /// `ln(a + eps)`
    pub fn log_eps(&self, a: &Var, eps: f64) -> Var {
        let out = a.value().map(|x| (x + eps).ln());
        let av = a.rc();
        self.push(out, &[a], move |g| vec![g.zip_map(&av, |g, x| g / (x + eps))])
    }

    pub fn relu(&self, a: &Var) -> Var {
        let out = a.value().map(|x| x.max(0.0));
        let av = a.rc();
        self.push(out, &[a], move |g| {
            vec![g.zip_map(&av, |g, x| if x > 0.0 { g } else { 0.0 })]
        })
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let out = a.value().map(sigmoid);
        let ov = std::rc::Rc::new(out.clone());
        self.push(out, &[a], move |g| {
            vec![g.zip_map(&ov, |g, s| g * s * (1.0 - s))]
        })
    }

    pub fn sum(&self, a: &Var) -> Var {
        let out = Tensor::scalar(a.value().sum());
        let shape = a.shape().to_vec();
        self.push(out, &[a], move |g| vec![Tensor::full(&shape, g.item())])
    }

    pub fn mean(&self, a: &Var) -> Var {
        let n = a.value().len() as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        let out = a.value().clone().reshape(shape)?;
        let orig = a.shape().to_vec();
        Ok(self.push(out, &[a], move |g| {
            vec![g.clone().reshape(&orig).expect("same element count")]
        }))
    }

    /// Mean binary cross-entropy between `logits` and 0/1 `targets`,
    /// computed in the numerically stable softplus form.
    pub fn bce_with_logits(&self, logits: &Var, targets: &[f64]) -> Result<Var> {
        if logits.value().len() != targets.len() {
            return Err(Error::shape(
                "bce",
                format!("{} logits vs {} targets", logits.value().len(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let loss: f64 = logits
            .value()
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let lv = logits.rc();
        let ts = targets.to_vec();
        Ok(self.push(Tensor::scalar(loss), &[logits], move |g| {
            let scale = g.item() / n;
            let mut out = Tensor::zeros(lv.shape());
            for ((o, &z), &y) in out.data_mut().iter_mut().zip(lv.data()).zip(&ts) {
                *o = scale * (sigmoid(z) - y);
            }
            vec![out]
        }))
    }

    /// Concatenates 4-axis tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[&Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?
            .value()
            .dims4();
        let [n, _, h, w] = first;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let [pn, pc, ph, pw] = p.value().dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", p.shape(), first),
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = vec![0.0; n * total * plane];
        for b in 0..n {
            let mut c0 = 0;
            for (p, &pc) in parts.iter().zip(&channels) {
                let src = &p.value().data()[b * pc * plane..(b + 1) * pc * plane];
                let dst = (b * total + c0) * plane;
                out[dst..dst + pc * plane].copy_from_slice(src);
                c0 += pc;
            }
        }
        let out = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push(out, parts, move |g| {
            let mut grads = Vec::with_capacity(channels.len());
            let mut c0 = 0;
            for &pc in &channels {
                let mut d = vec![0.0; n * pc * plane];
                for b in 0..n {
                    let src = (b * total + c0) * plane;
                    d[b * pc * plane..(b + 1) * pc * plane]
                        .copy_from_slice(&g.data()[src..src + pc * plane]);
                }
                grads.push(Tensor::new(&[n, pc, h, w], d).expect("consistent"));
                c0 += pc;
            }
            grads
        }))
    }

    /// Channels `start..start + count` of a 4-axis tensor.
    pub fn slice_channels(&self, a: &Var, start: usize, count: usize) -> Result<Var> {
        let [n, c, h, w] = a.value().dims4();
        if start + count > c {
            return Err(Error::shape(
                "slice_channels",
                format!("{}..{} of {}", start, start + count, c),
            ));
        }
        let plane = h * w;
        let mut out = vec![0.0; n * count * plane];
        for b in 0..n {
            let src = (b * c + start) * plane;
            out[b * count * plane..(b + 1) * count * plane]
                .copy_from_slice(&a.value().data()[src..src + count * plane]);
        }
        let out = Tensor::new(&[n, count, h, w], out)?;
        Ok(self.push(out, &[a], move |g| {
            let mut d = vec![0.0; n * c * plane];
            for b in 0..n {
                let dst = (b * c + start) * plane;
                d[dst..dst + count * plane]
                    .copy_from_slice(&g.data()[b * count * plane..(b + 1) * count * plane]);
            }
            vec![Tensor::new(&[n, c, h, w], d).expect("consistent")]
        }))
    }
}

/// Reflect index without repeating the edge sample (`d c b | a b c d | c b a`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Half-sample symmetric index (`c b a | a b c | c b a`).
pub(crate) fn symmetric_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - 1 - j;
    }
    j as usize
}

impl Tape {
    /// Reflect-pads the two spatial axes at their far end.
    pub fn pad_reflect(&self, a: &Var, pad_h: usize, pad_w: usize) -> Var {
        let [n, c, h, w] = a.value().dims4();
        let (oh, ow) = (h + pad_h, w + pad_w);
        let rows: Vec<usize> = (0..oh).map(|y| reflect_index(y as isize, h)).collect();
        let cols: Vec<usize> = (0..ow).map(|x| reflect_index(x as isize, w)).collect();
        let src = a.value().data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for (y, &sy) in rows.iter().enumerate() {
                let srow = &src[(nc * h + sy) * w..(nc * h + sy + 1) * w];
                let drow = &mut out[(nc * oh + y) * ow..(nc * oh + y + 1) * ow];
                for (d, &sx) in drow.iter_mut().zip(&cols) {
                    *d = srow[sx];
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out).expect("consistent");
        self.push(out, &[a], move |g| {
            let mut d = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                for (y, &sy) in rows.iter().enumerate() {
                    for (x, &sx) in cols.iter().enumerate() {
                        d[(nc * h + sy) * w + sx] += g.data()[(nc * oh + y) * ow + x];
                    }
                }
            }
            vec![Tensor::new(&[n, c, h, w], d).expect("consistent")]
        })
    }

    /// Keeps the top-left `h × w` window of the spatial axes.
    pub fn crop(&self, a: &Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, ih, iw] = a.value().dims4();
        if h > ih || w > iw {
            return Err(Error::shape("crop", format!("{}x{} from {}x{}", h, w, ih, iw)));
        }
        let src = a.value().data();
        let mut out = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            for y in 0..h {
                out[(nc * h + y) * w..(nc * h + y + 1) * w]
                    .copy_from_slice(&src[(nc * ih + y) * iw..(nc * ih + y) * iw + w]);
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, &[a], move |g| {
            let mut d = vec![0.0; n * c * ih * iw];
            for nc in 0..n * c {
                for y in 0..h {
                    d[(nc * ih + y) * iw..(nc * ih + y) * iw + w]
                        .copy_from_slice(&g.data()[(nc * h + y) * w..(nc * h + y + 1) * w]);
                }
            }
            vec![Tensor::new(&[n, c, ih, iw], d).expect("consistent")]
        }))
    }

    /// Nearest-neighbour ×2 upsampling, cropped to `h × w`.
    pub fn upsample2_to(&self, a: &Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, ih, iw] = a.value().dims4();
        if h > 2 * ih || w > 2 * iw {
            return Err(Error::shape(
                "upsample",
                format!("{}x{} exceeds 2x of {}x{}", h, w, ih, iw),
            ));
        }
        let src = a.value().data();
        let mut out = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            for y in 0..h {
                let srow = &src[(nc * ih + y / 2) * iw..(nc * ih + y / 2 + 1) * iw];
                for x in 0..w {
                    out[(nc * h + y) * w + x] = srow[x / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, &[a], move |g| {
            let mut d = vec![0.0; n * c * ih * iw];
            for nc in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        d[(nc * ih + y / 2) * iw + x / 2] += g.data()[(nc * h + y) * w + x];
                    }
                }
            }
            vec![Tensor::new(&[n, c, ih, iw], d).expect("consistent")]
        }))
    }
}

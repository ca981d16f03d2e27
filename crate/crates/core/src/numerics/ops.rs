//! Differentiable operations recorded on a [`Tape`].
//!
//! Feature maps are `[C, H, W]`; vectors are `[N]`; scalars are `[1]`.

use std::sync::Arc;

use super::conv::{conv_backward, conv_forward, SamplingPlan};
use super::tape::{BatchStat, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Argmax switches remembered by a max-pool for the matching unpool.
#[derive(Clone, Debug)]
pub struct PoolSwitches {
    input_shape: [usize; 3],
    argmax: Arc<Vec<usize>>,
}

impl PoolSwitches {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }
}

/// Fixed linear resampling between ERP grids: every output pixel is a
/// weighted sum of (at most four) input pixels.
#[derive(Clone, Debug)]
pub struct ResampleTable {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    // four (input index, weight) pairs per output pixel
    taps: Vec<(u32, f64)>,
}

impl ResampleTable {
    /// Nearest pixel centre; sizes need not be integer multiples.
    pub fn nearest(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let (h, w) = in_hw;
        let (oh, ow) = out_hw;
        let mut taps = Vec::with_capacity(oh * ow * 4);
        for r in 0..oh {
            let sr = (r * h / oh).min(h - 1);
            for c in 0..ow {
                let sc = (c * w / ow).min(w - 1);
                taps.push(((sr * w + sc) as u32, 1.0));
                taps.extend([(0, 0.0); 3]);
            }
        }
        ResampleTable { in_hw, out_hw, taps }
    }

    /// Bilinear interpolation with pixel centres aligned; rows clamp,
    /// columns wrap.
    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let (h, w) = in_hw;
        let (oh, ow) = out_hw;
        let mut taps = Vec::with_capacity(oh * ow * 4);
        for r in 0..oh {
            let y = (r as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            for c in 0..ow {
                let x = (c as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                for (row, col, wt) in super::conv::bilinear_corners(y, x, h) {
                    let col = col.rem_euclid(w as i64) as usize;
                    taps.push(((row * w + col) as u32, wt));
                }
            }
        }
        ResampleTable { in_hw, out_hw, taps }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }
}

#[derive(Clone, Debug)]
pub enum NormMode {
    /// Normalise with statistics of the current sample; the observed
    /// statistics are recorded on the tape under `name`.
    Train { name: String },
    /// Normalise with fixed running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary(
    tape: &mut Tape,
    a: Var,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Var {
    let out = tape.value(a).map(f);
    tape.push(out, vec![a], move |g, p, y| {
        let d: Vec<f64> = g
            .data()
            .iter()
            .zip(p[0].data())
            .zip(y.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        Ok(vec![Tensor::new(g.shape(), d)?])
    })
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, vec![a, b], |g, _, _| Ok(vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, vec![a, b], |g, _, _| Ok(vec![g.clone(), g.scale(-1.0)])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, vec![a, b], |g, p, _| {
            Ok(vec![
                g.zip_map(p[1], |g, y| g * y)?,
                g.zip_map(p[0], |g, x| g * x)?,
            ])
        }))
    }

    /// `s * a + c`, elementwise.
    pub fn affine(&mut self, a: Var, s: f64, c: f64) -> Var {
        let out = self.value(a).map(|x| s * x + c);
        self.push(out, vec![a], move |g, _, _| Ok(vec![g.scale(s)]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        unary(self, a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        unary(self, a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        unary(self, a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let mut lead = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != first[1..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", t.shape(), first),
                ));
            }
            lead.push(t.shape()[0]);
            data.extend_from_slice(t.data());
        }
        let mut shape = first.clone();
        shape[0] = lead.iter().sum();
        let inner: usize = first[1..].iter().product();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, parts.to_vec(), move |g, p, _| {
            let mut off = 0;
            p.iter()
                .zip(&lead)
                .map(|(pt, &l)| {
                    let n = l * inner;
                    let t = Tensor::new(pt.shape(), g.data()[off..off + n].to_vec());
                    off += n;
                    t
                })
                .collect()
        }))
    }

    /// Rows `start .. start + len` of the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if start + len > shape[0] {
            return Err(Error::shape(
                "slice",
                format!("{start}+{len} exceeds {}", shape[0]),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = Tensor::new(
            &out_shape,
            t.data()[start * inner..(start + len) * inner].to_vec(),
        )?;
        Ok(self.push(out, vec![a], move |g, _, _| {
            let mut d = vec![0.0; shape.iter().product()];
            d[start * inner..(start + len) * inner].copy_from_slice(g.data());
            Ok(vec![Tensor::new(&shape, d)?])
        }))
    }

    /// `x[c, h, w] * a[c]`.
    pub fn scale_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(a).len() != c {
            return Err(Error::shape("scale_channels", "attention length != channels"));
        }
        let plane = h * w;
        let xs = self.value(x);
        let av = self.value(a).data();
        let mut out = xs.clone();
        for (ci, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= av[ci]);
        }
        Ok(self.push(out, vec![x, a], move |g, p, _| {
            let (xv, av) = (p[0], p[1]);
            let mut dx = g.clone();
            let mut da = vec![0.0; c];
            for ci in 0..c {
                let gs = &g.data()[ci * plane..(ci + 1) * plane];
                let xsl = xv.channel(ci);
                da[ci] = gs.iter().zip(xsl).map(|(g, x)| g * x).sum();
                dx.data_mut()[ci * plane..(ci + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v *= av.data()[ci]);
            }
            Ok(vec![dx, Tensor::new(av.shape(), da)?])
        }))
    }

    /// `x[c, h, w] * m[0, h, w]`.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(m).shape() != [1, h, w] {
            return Err(Error::shape(
                "scale_spatial",
                format!("mask {:?} for map {:?}", self.value(m).shape(), [c, h, w]),
            ));
        }
        let plane = h * w;
        let mv = self.value(m).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(plane) {
            chunk.iter_mut().zip(&mv).for_each(|(v, m)| *v *= m);
        }
        Ok(self.push(out, vec![x, m], move |g, p, _| {
            let (xv, mv) = (p[0], p[1]);
            let mut dx = g.clone();
            let mut dm = vec![0.0; plane];
            for ci in 0..c {
                let gs = &g.data()[ci * plane..(ci + 1) * plane];
                for ((d, g), x) in dm.iter_mut().zip(gs).zip(xv.channel(ci)) {
                    *d += g * x;
                }
                dx.data_mut()[ci * plane..(ci + 1) * plane]
                    .iter_mut()
                    .zip(mv.data())
                    .for_each(|(v, m)| *v *= m);
            }
            Ok(vec![dx, Tensor::new(mv.shape(), dm)?])
        }))
    }

    /// Per-channel spatial average, `[C, H, W] -> [C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let plane = h * w;
        let t = self.value(x);
        let out: Vec<f64> = (0..c)
            .map(|ci| t.channel(ci).iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(Tensor::new(&[c], out)?, vec![x], move |g, _, _| {
            let mut d = Vec::with_capacity(c * plane);
            for ci in 0..c {
                d.extend(std::iter::repeat_n(g.data()[ci] / plane as f64, plane));
            }
            Ok(vec![Tensor::new(&[c, h, w], d)?])
        }))
    }

    /// Per-channel spatial maximum, `[C, H, W] -> [C]`.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let plane = h * w;
        let t = self.value(x);
        let arg: Vec<usize> = (0..c).map(|ci| argmax(t.channel(ci)) + ci * plane).collect();
        let out: Vec<f64> = arg.iter().map(|&i| t.data()[i]).collect();
        Ok(self.push(Tensor::new(&[c], out)?, vec![x], move |g, _, _| {
            let mut d = vec![0.0; c * plane];
            for (ci, &i) in arg.iter().enumerate() {
                d[i] = g.data()[ci];
            }
            Ok(vec![Tensor::new(&[c, h, w], d)?])
        }))
    }

    /// Average across channels, `[C, H, W] -> [1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let plane = h * w;
        let t = self.value(x);
        let mut out = vec![0.0; plane];
        for ci in 0..c {
            out.iter_mut().zip(t.channel(ci)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= c as f64);
        Ok(self.push(Tensor::new(&[1, h, w], out)?, vec![x], move |g, _, _| {
            let per: Vec<f64> = g.data().iter().map(|v| v / c as f64).collect();
            let d: Vec<f64> = per.iter().copied().cycle().take(c * plane).collect();
            Ok(vec![Tensor::new(&[c, h, w], d)?])
        }))
    }

    /// Maximum across channels, `[C, H, W] -> [1, H, W]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let plane = h * w;
        let t = self.value(x);
        let mut arg = vec![0usize; plane];
        let mut out = t.channel(0).to_vec();
        for ci in 1..c {
            for (i, &v) in t.channel(ci).iter().enumerate() {
                if v > out[i] {
                    out[i] = v;
                    arg[i] = ci;
                }
            }
        }
        Ok(self.push(Tensor::new(&[1, h, w], out)?, vec![x], move |g, _, _| {
            let mut d = vec![0.0; c * plane];
            for (i, &ci) in arg.iter().enumerate() {
                d[ci * plane + i] = g.data()[i];
            }
            Ok(vec![Tensor::new(&[c, h, w], d)?])
        }))
    }

    /// Dense layer `w x + b` with `w: [M, N]`, `x: [N]`, `b: [M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.value(w);
        let (m, n) = match wt.shape() {
            &[m, n] => (m, n),
            s => return Err(Error::shape("linear", format!("weight {s:?}"))),
        };
        if self.value(x).len() != n || self.value(b).len() != m {
            return Err(Error::shape(
                "linear",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.value(x).shape(),
                    wt.shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = (0..m)
            .map(|i| bv[i] + (0..n).map(|j| wt.data()[i * n + j] * xv[j]).sum::<f64>())
            .collect();
        Ok(self.push(Tensor::new(&[m], out)?, vec![x, w, b], move |g, p, _| {
            let (xv, wv) = (p[0].data(), p[1].data());
            let gv = g.data();
            let dx: Vec<f64> = (0..n)
                .map(|j| (0..m).map(|i| wv[i * n + j] * gv[i]).sum())
                .collect();
            let dw: Vec<f64> = (0..m * n).map(|k| gv[k / n] * xv[k % n]).collect();
            Ok(vec![
                Tensor::new(p[0].shape(), dx)?,
                Tensor::new(&[m, n], dw)?,
                g.clone(),
            ])
        }))
    }

    /// Convolution following `plan`; `weight: [C_out, C_in, k, k]` with
    /// `k * k == plan.taps()`, optional `bias: [C_out]`.
    pub fn conv(&mut self, x: Var, weight: Var, bias: Option<Var>, plan: &Arc<SamplingPlan>) -> Result<Var> {
        let (c_in, h, w) = self.value(x).chw()?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 4 || ws[1] != c_in || ws[2] * ws[3] != plan.taps() {
            return Err(Error::shape(
                "conv",
                format!("weight {ws:?} for input {:?} and {} taps", [c_in, h, w], plan.taps()),
            ));
        }
        if plan.in_hw() != (h, w) {
            return Err(Error::shape(
                "conv",
                format!("plan built for {:?}, input is {:?}", plan.in_hw(), (h, w)),
            ));
        }
        let c_out = ws[0];
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(Error::shape("conv", "bias length != output channels"));
            }
        }
        let out = conv_forward(
            plan,
            self.value(x).data(),
            c_in,
            self.value(weight).data(),
            c_out,
            bias.map(|b| self.value(b).data()),
        );
        let (oh, ow) = plan.out_hw();
        let out = Tensor::new(&[c_out, oh, ow], out)?;
        let plan = Arc::clone(plan);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(out, parents, move |g, p, _| {
            let bw = conv_backward(&plan, p[0].data(), c_in, p[1].data(), c_out, g.data());
            let mut grads = vec![
                Tensor::new(p[0].shape(), bw.d_input)?,
                Tensor::new(p[1].shape(), bw.d_weight)?,
            ];
            if p.len() == 3 {
                grads.push(Tensor::new(p[2].shape(), bw.d_bias)?);
            }
            Ok(grads)
        }))
    }

    /// 2x2 max-pool with stride 2; returns the switches for [`Tape::unpool`].
    pub fn max_pool2(&mut self, x: Var) -> Result<(Var, PoolSwitches)> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::domain(format!("max_pool2 needs even sizes, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let t = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let base = ci * h * w;
                    let cands = [
                        base + 2 * r * w + 2 * col,
                        base + 2 * r * w + 2 * col + 1,
                        base + (2 * r + 1) * w + 2 * col,
                        base + (2 * r + 1) * w + 2 * col + 1,
                    ];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if t[i] > t[best] {
                            best = i;
                        }
                    }
                    out.push(t[best]);
                    arg.push(best);
                }
            }
        }
        let switches = PoolSwitches {
            input_shape: [c, h, w],
            argmax: Arc::new(arg),
        };
        let sw = switches.argmax.clone();
        let v = self.push(Tensor::new(&[c, oh, ow], out)?, vec![x], move |g, p, _| {
            let mut d = vec![0.0; p[0].len()];
            for (gv, &i) in g.data().iter().zip(sw.iter()) {
                d[i] += gv;
            }
            Ok(vec![Tensor::new(p[0].shape(), d)?])
        });
        Ok((v, switches))
    }

    /// Switch unpooling: each value returns to the position its pool drew it
    /// from; every other position is zero.
    pub fn unpool(&mut self, x: Var, switches: &PoolSwitches) -> Result<Var> {
        let [c, h, w] = switches.input_shape;
        if self.value(x).shape() != [c, h / 2, w / 2] {
            return Err(Error::shape(
                "unpool",
                format!("{:?} for switches of {:?}", self.value(x).shape(), [c, h, w]),
            ));
        }
        let sw = switches.argmax.clone();
        let mut out = vec![0.0; c * h * w];
        for (v, &i) in self.value(x).data().iter().zip(sw.iter()) {
            out[i] = *v;
        }
        Ok(self.push(Tensor::new(&[c, h, w], out)?, vec![x], move |g, p, _| {
            let d: Vec<f64> = sw.iter().map(|&i| g.data()[i]).collect();
            Ok(vec![Tensor::new(p[0].shape(), d)?])
        }))
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (oh, ow) = (h * fh, w * fw);
        let t = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    out.push(t[ci * h * w + (r / fh) * w + col / fw]);
                }
            }
        }
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, vec![x], move |g, _, _| {
            let mut d = vec![0.0; c * h * w];
            for ci in 0..c {
                for r in 0..oh {
                    for col in 0..ow {
                        d[ci * h * w + (r / fh) * w + col / fw] += g.data()[ci * oh * ow + r * ow + col];
                    }
                }
            }
            Ok(vec![Tensor::new(&[c, h, w], d)?])
        }))
    }

    /// Resamples every channel through `table`.
    pub fn resample(&mut self, x: Var, table: &Arc<ResampleTable>) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if (h, w) != table.in_hw {
            return Err(Error::shape(
                "resample",
                format!("input {h}x{w}, table expects {:?}", table.in_hw),
            ));
        }
        let (oh, ow) = table.out_hw;
        let n = oh * ow;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for (o, taps) in out[ci * n..(ci + 1) * n].iter_mut().zip(table.taps.chunks(4)) {
                *o = taps.iter().map(|&(i, wt)| wt * plane[i as usize]).sum();
            }
        }
        let table = Arc::clone(table);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, vec![x], move |g, _, _| {
            let mut d = vec![0.0; c * h * w];
            for ci in 0..c {
                let plane = &mut d[ci * h * w..(ci + 1) * h * w];
                for (gv, taps) in g.data()[ci * n..(ci + 1) * n].iter().zip(table.taps.chunks(4)) {
                    for &(i, wt) in taps {
                        plane[i as usize] += wt * gv;
                    }
                }
            }
            Ok(vec![Tensor::new(&[c, h, w], d)?])
        }))
    }

    /// Per-channel batch normalisation over spatial positions.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", "affine parameters != channels"));
        }
        let plane = (h * w) as f64;
        let t = self.value(x);
        let (mean, var, record) = match mode {
            NormMode::Train { name } => {
                let mean: Vec<f64> = (0..c).map(|ci| t.channel(ci).iter().sum::<f64>() / plane).collect();
                let var: Vec<f64> = (0..c)
                    .map(|ci| t.channel(ci).iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>() / plane)
                    .collect();
                (mean, var, Some(name))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics != channels"));
                }
                (mean, var, None)
            }
        };
        let train = record.is_some();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(t.len());
        let mut out = Vec::with_capacity(t.len());
        for ci in 0..c {
            for &v in t.channel(ci) {
                let n = (v - mean[ci]) * inv_std[ci];
                xhat.push(n);
                out.push(g[ci] * n + b[ci]);
            }
        }
        if let Some(name) = record {
            self.batch_stats.push(BatchStat {
                name,
                mean: mean.clone(),
                var: var.clone(),
            });
        }
        let shape = [c, h, w];
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, vec![x, gamma, beta], move |gr, p, _| {
            let n = plane;
            let gam = p[1].data();
            let mut dx = vec![0.0; c * (n as usize)];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let pl = n as usize;
            for ci in 0..c {
                let gs = &gr.data()[ci * pl..(ci + 1) * pl];
                let xs = &xhat[ci * pl..(ci + 1) * pl];
                let sum_g: f64 = gs.iter().sum();
                let sum_gx: f64 = gs.iter().zip(xs).map(|(g, x)| g * x).sum();
                dbeta[ci] = sum_g;
                dgamma[ci] = sum_gx;
                let k = gam[ci] * inv_std[ci];
                for i in 0..pl {
                    dx[ci * pl + i] = if train {
                        k * (gs[i] - sum_g / n - xs[i] * sum_gx / n)
                    } else {
                        k * gs[i]
                    };
                }
            }
            Ok(vec![
                Tensor::new(&shape, dx)?,
                Tensor::new(&[c], dgamma)?,
                Tensor::new(&[c], dbeta)?,
            ])
        }))
    }

    /// Solid-angle weighted squared error `sum w (p - g)^2 / sum w`; `weights`
    /// has one entry per pixel and broadcasts over leading channels.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: &Arc<Vec<f64>>) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape(t, "weighted_mse")?;
        let n = weights.len();
        if n == 0 || p.len() % n != 0 {
            return Err(Error::shape(
                "weighted_mse",
                format!("{} weights for {:?}", n, p.shape()),
            ));
        }
        let wsum: f64 = weights.iter().sum::<f64>() * (p.len() / n) as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .enumerate()
            .map(|(i, (a, b))| weights[i % n] * (a - b).powi(2))
            .sum::<f64>()
            / wsum;
        let w = Arc::clone(weights);
        Ok(self.push(Tensor::scalar(loss), vec![pred, target], move |g, p, _| {
            let s = g.data()[0] * 2.0 / wsum;
            let d: Vec<f64> = p[0]
                .data()
                .iter()
                .zip(p[1].data())
                .enumerate()
                .map(|(i, (a, b))| s * w[i % n] * (a - b))
                .collect();
            let dp = Tensor::new(p[0].shape(), d)?;
            let dt = dp.scale(-1.0);
            Ok(vec![dp, dt])
        }))
    }

    /// `sum(x * r)` against a fixed tensor `r`.
    pub fn dot_const(&mut self, x: Var, r: &Tensor) -> Result<Var> {
        let v: f64 = self.value(x).zip_map(r, |a, b| a * b)?.sum();
        let r = r.clone();
        Ok(self.push(Tensor::scalar(v), vec![x], move |g, _, _| Ok(vec![r.scale(g.data()[0])])))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::domain("mean of zero terms"));
        }
        for &x in xs {
            if self.value(x).len() != 1 {
                return Err(Error::shape("mean_of", "terms must be scalars"));
            }
        }
        let k = xs.len() as f64;
        let v = xs.iter().map(|&x| self.value(x).data()[0]).sum::<f64>() / k;
        Ok(self.push(Tensor::scalar(v), xs.to_vec(), move |g, p, _| {
            Ok(p.iter().map(|_| Tensor::scalar(g.data()[0] / k)).collect())
        }))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

//! Convolution as "sample, then multiply".
//!
//! Every convolution in the crate (planar, spherical, 1x1 projections) is
//! expressed as a [`SamplingPlan`]: for each output row and each kernel tap,
//! a short list of weighted input locations. Columns follow the row pattern
//! shifted by `col_stride` per output column. Planar convolution is the
//! special case with a single unit-weight corner per tap; spherical
//! convolution uses up to four bilinear corners.

use crate::error::{Error, Result};
use crate::par;

/// Border handling for planar convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero outside the image in both axes.
    Zero,
    /// Zero above/below, periodic in the column (longitude) axis.
    LongitudeWrap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Corner {
    pub row: u32,
    pub col_off: i32,
    pub weight: f64,
}

/// Precomputed input sampling pattern for one convolution geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    taps: usize,
    col_stride: usize,
    wrap: bool,
    corners: Vec<Corner>,
    // (start, len) into `corners` per (out_row, tap)
    spans: Vec<(u32, u32)>,
}

impl SamplingPlan {
    /// Planar cross-correlation geometry with `k/2` padding.
    pub fn planar(in_h: usize, in_w: usize, k: usize, stride: usize, padding: Padding) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::domain(format!("kernel size must be odd, got {k}")));
        }
        if stride == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::domain("stride and input size must be positive"));
        }
        let half = (k / 2) as i64;
        let out_h = (in_h - 1) / stride + 1;
        let out_w = (in_w - 1) / stride + 1;
        let taps = k * k;
        let mut corners = Vec::new();
        let mut spans = Vec::with_capacity(out_h * taps);
        for r in 0..out_h {
            for t in 0..taps {
                let di = (t / k) as i64 - half;
                let dj = (t % k) as i64 - half;
                let row = (r * stride) as i64 + di;
                let start = corners.len() as u32;
                if (0..in_h as i64).contains(&row) {
                    corners.push(Corner {
                        row: row as u32,
                        col_off: dj as i32,
                        weight: 1.0,
                    });
                }
                spans.push((start, corners.len() as u32 - start));
            }
        }
        Ok(SamplingPlan {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
            col_stride: stride,
            wrap: padding == Padding::LongitudeWrap,
            corners,
            spans,
        })
    }

    /// Builds a bilinear plan from fractional locations.
    ///
    /// `loc(out_row, tap)` returns `(row, col_offset)` in input pixel units
    /// where pixel centres sit on integers; the absolute column for output
    /// column `c` is `c * col_stride + col_offset`. Rows clamp to the image,
    /// columns wrap.
    pub fn bilinear(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        col_stride: usize,
        taps: usize,
        loc: impl Fn(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut corners = Vec::new();
        let mut spans = Vec::with_capacity(out_h * taps);
        for r in 0..out_h {
            for t in 0..taps {
                let (y, x) = loc(r, t);
                let start = corners.len() as u32;
                for (row, col_off, weight) in bilinear_corners(y, x, in_h) {
                    if weight != 0.0 {
                        corners.push(Corner {
                            row: row as u32,
                            col_off: col_off as i32,
                            weight,
                        });
                    }
                }
                spans.push((start, corners.len() as u32 - start));
            }
        }
        SamplingPlan {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
            col_stride,
            wrap: true,
            corners,
            spans,
        }
    }

    pub fn in_hw(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn col_stride(&self) -> usize {
        self.col_stride
    }

    pub(crate) fn corners(&self, out_row: usize, tap: usize) -> &[Corner] {
        let (s, l) = self.spans[out_row * self.taps + tap];
        &self.corners[s as usize..(s + l) as usize]
    }

    /// Calls `f(out_col_start, in_col_start, len)` for maximal runs of
    /// output columns whose sampled input columns (at offset `off`) are
    /// consecutive. Only used for `col_stride == 1`.
    #[inline]
    fn unit_stride_runs(&self, off: i32, mut f: impl FnMut(usize, usize, usize)) {
        let w = self.in_w as i64;
        let n = self.out_w as i64;
        if self.wrap {
            let start = (off as i64).rem_euclid(w);
            let first = (w - start).min(n);
            f(0, start as usize, first as usize);
            let mut done = first;
            while done < n {
                let len = (n - done).min(w);
                f(done as usize, 0, len as usize);
                done += len;
            }
        } else {
            let lo = (-(off as i64)).max(0);
            let hi = (w - off as i64).min(n);
            if hi > lo {
                f(lo as usize, (lo + off as i64) as usize, (hi - lo) as usize);
            }
        }
    }

    /// Calls `f(out_col, in_col)` for every valid output column.
    #[inline]
    fn strided_cols(&self, off: i32, mut f: impl FnMut(usize, usize)) {
        let w = self.in_w as i64;
        let s = self.col_stride as i64;
        if self.wrap {
            let mut col = (off as i64).rem_euclid(w);
            let step = s.rem_euclid(w);
            for oc in 0..self.out_w {
                f(oc, col as usize);
                col += step;
                if col >= w {
                    col -= w;
                }
            }
        } else {
            for oc in 0..self.out_w {
                let c = oc as i64 * s + off as i64;
                if (0..w).contains(&c) {
                    f(oc, c as usize);
                }
            }
        }
    }

    /// Gathers `[C*taps, out_h*out_w]` columns from a `[C, in_h, in_w]` buffer.
    pub(crate) fn im2col(&self, input: &[f64], channels: usize) -> Vec<f64> {
        self.im2col_rows(input, channels, 0, self.out_h)
    }

    /// Columns for output rows `r0..r1` only: `[C*taps, (r1-r0)*out_w]`.
    pub(crate) fn im2col_rows(&self, input: &[f64], channels: usize, r0: usize, r1: usize) -> Vec<f64> {
        let plane_in = self.in_h * self.in_w;
        let n = (r1 - r0) * self.out_w;
        let mut cols = vec![0.0; channels * self.taps * n];
        if n == 0 {
            return cols;
        }
        for (row_idx, out) in cols.chunks_mut(n).enumerate() {
            let c = row_idx / self.taps;
            let t = row_idx % self.taps;
            let src = &input[c * plane_in..(c + 1) * plane_in];
            for r in r0..r1 {
                let dst = &mut out[(r - r0) * self.out_w..][..self.out_w];
                for corner in self.corners(r, t) {
                    let line = &src[corner.row as usize * self.in_w..][..self.in_w];
                    let wt = corner.weight;
                    if self.col_stride == 1 {
                        self.unit_stride_runs(corner.col_off, |o, i, n| {
                            for (d, v) in dst[o..o + n].iter_mut().zip(&line[i..i + n]) {
                                *d += wt * v;
                            }
                        });
                    } else {
                        self.strided_cols(corner.col_off, |oc, col| dst[oc] += wt * line[col]);
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back to the input.
    #[cfg(test)]
    pub(crate) fn col2im(&self, cols: &[f64], channels: usize) -> Vec<f64> {
        let mut grad = vec![0.0; channels * self.in_h * self.in_w];
        self.col2im_rows(cols, channels, 0, self.out_h, &mut grad, 0, self.in_h);
        grad
    }

    /// Input rows `lo..hi` read by output rows `r0..r1`; empty if none.
    pub(crate) fn input_rows(&self, r0: usize, r1: usize) -> (usize, usize) {
        let rows = (r0..r1).flat_map(|r| (0..self.taps).flat_map(move |t| self.corners(r, t)));
        let (lo, hi) = rows.fold((usize::MAX, 0), |(lo, hi), c| {
            (lo.min(c.row as usize), hi.max(c.row as usize + 1))
        });
        if lo >= hi {
            (0, 0)
        } else {
            (lo, hi)
        }
    }

    /// Adjoint of [`Self::im2col_rows`], accumulating into `dst: [C, hi-lo, in_w]`
    /// which holds input rows `lo..hi`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn col2im_rows(
        &self,
        cols: &[f64],
        channels: usize,
        r0: usize,
        r1: usize,
        dst: &mut [f64],
        lo: usize,
        hi: usize,
    ) {
        let n = (r1 - r0) * self.out_w;
        let plane = (hi - lo) * self.in_w;
        if n == 0 || plane == 0 {
            return;
        }
        for (c, dst) in dst.chunks_mut(plane).take(channels).enumerate() {
            for t in 0..self.taps {
                let src = &cols[(c * self.taps + t) * n..][..n];
                for r in r0..r1 {
                    let g = &src[(r - r0) * self.out_w..][..self.out_w];
                    for corner in self.corners(r, t) {
                        let line = &mut dst[(corner.row as usize - lo) * self.in_w..][..self.in_w];
                        let wt = corner.weight;
                        if self.col_stride == 1 {
                            self.unit_stride_runs(corner.col_off, |o, i, n| {
                                for (d, v) in line[i..i + n].iter_mut().zip(&g[o..o + n]) {
                                    *d += wt * v;
                                }
                            });
                        } else {
                            self.strided_cols(corner.col_off, |oc, col| line[col] += wt * g[oc]);
                        }
                    }
                }
            }
        }
    }

    /// Fixed partition of output rows into blocks of roughly
    /// [`BLOCK_PIXELS`] outputs, independent of the thread count.
    fn row_blocks(&self) -> Vec<(usize, usize)> {
        let step = (BLOCK_PIXELS / self.out_w.max(1)).max(1);
        (0..self.out_h)
            .step_by(step)
            .map(|r| (r, (r + step).min(self.out_h)))
            .collect()
    }
}

const BLOCK_PIXELS: usize = 2048;

/// Bilinear corners of a fractional location, rows clamped to `[0, h-1]`.
/// Column offsets are returned unwrapped.
pub(crate) fn bilinear_corners(y: f64, x: f64, h: usize) -> [(usize, i64, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let y0 = y.floor();
    let fy = y - y0;
    let y0 = y0 as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x0 = x.floor();
    let fx = x - x0;
    let x0 = x0 as i64;
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x0 + 1, fy * fx),
    ]
}

const ROW_BLOCK: usize = 32;

/// Row-major `m x n` product of strided operands, parallel over fixed row
/// blocks of the result.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    par::for_each_chunk_mut(&mut c, ROW_BLOCK * n, |blk, out| {
        let rows = out.len() / n;
        let a_off = blk * ROW_BLOCK * rsa;
        // SAFETY: the asserts above bound every index the kernel touches
        // for rows `blk*ROW_BLOCK .. blk*ROW_BLOCK + rows`, and `out` holds
        // exactly `rows * n` elements with row stride `n`.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    c
}

pub(crate) fn transpose(m: usize, n: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// `out[co, p] = sum_k weight[co, k] * cols[k, p] + bias[co]`, computed in
/// fixed row blocks so the full column matrix is never materialised.
pub(crate) fn conv_forward(
    plan: &SamplingPlan,
    input: &[f64],
    c_in: usize,
    weight: &[f64],
    c_out: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let kk = c_in * plan.taps();
    let p = plan.out_h * plan.out_w;
    let blocks = plan.row_blocks();
    let parts = par::map_indexed(blocks.len(), |b| {
        let (r0, r1) = blocks[b];
        let n = (r1 - r0) * plan.out_w;
        let cols = plan.im2col_rows(input, c_in, r0, r1);
        // [n, c_out] = cols^T [n, kk] x weight^T [kk, c_out]
        gemm(n, kk, c_out, &cols, (1, n), weight, (1, kk))
    });
    let mut out = vec![0.0; c_out * p];
    for (&(r0, r1), part) in blocks.iter().zip(&parts) {
        let base = r0 * plan.out_w;
        let n = (r1 - r0) * plan.out_w;
        for co in 0..c_out {
            let b = bias.map_or(0.0, |b| b[co]);
            let row = &mut out[co * p + base..][..n];
            for (j, v) in row.iter_mut().enumerate() {
                *v = part[j * c_out + co] + b;
            }
        }
    }
    out
}

pub(crate) struct ConvBackward {
    pub d_input: Vec<f64>,
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

/// Gradients of [`conv_forward`]. Columns are regathered per block and the
/// partial sums are reduced in block order.
pub(crate) fn conv_backward(
    plan: &SamplingPlan,
    input: &[f64],
    c_in: usize,
    weight: &[f64],
    c_out: usize,
    d_out: &[f64],
) -> ConvBackward {
    let kk = c_in * plan.taps();
    let p = plan.out_h * plan.out_w;
    let blocks = plan.row_blocks();
    let parts = par::map_indexed(blocks.len(), |b| {
        let (r0, r1) = blocks[b];
        let n = (r1 - r0) * plan.out_w;
        let g = &d_out[r0 * plan.out_w..];
        let cols = plan.im2col_rows(input, c_in, r0, r1);
        // d_weight^T [kk, c_out] = cols [kk, n] x d_out^T [n, c_out]
        let dw_t = gemm(kk, n, c_out, &cols, (n, 1), g, (1, p));
        // d_cols [kk, n] = weight^T [kk, c_out] x d_out [c_out, n]
        let d_cols = gemm(kk, c_out, n, weight, (1, kk), g, (p, 1));
        let (lo, hi) = plan.input_rows(r0, r1);
        let mut dx = vec![0.0; c_in * (hi - lo) * plan.in_w];
        plan.col2im_rows(&d_cols, c_in, r0, r1, &mut dx, lo, hi);
        (dw_t, lo, hi, dx)
    });
    let plane_in = plan.in_h * plan.in_w;
    let mut d_input = vec![0.0; c_in * plane_in];
    let mut dw_t = vec![0.0; kk * c_out];
    for (part_dw, lo, hi, dx) in &parts {
        for (a, b) in dw_t.iter_mut().zip(part_dw) {
            *a += b;
        }
        let span = (hi - lo) * plan.in_w;
        if span == 0 {
            continue;
        }
        for (c, src) in dx.chunks(span).enumerate() {
            let dst = &mut d_input[c * plane_in + lo * plan.in_w..][..span];
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    let d_weight = transpose(kk, c_out, &dw_t);
    let d_bias = d_out.chunks(p).map(|r| r.iter().sum()).collect();
    ConvBackward {
        d_input,
        d_weight,
        d_bias,
    }
}

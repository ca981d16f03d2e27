//! Spherical convolution on ERP grids.
//!
//! A kernel is defined once as a `k x k` patch of directions around the point
//! `(lambda, psi) = (0, 0)`, spaced one input pixel apart. For every output
//! row the patch is rotated on the sphere to that row's latitude and
//! reprojected to fractional ERP coordinates; every column reuses the row's
//! pattern shifted in longitude. Input values are read with bilinear
//! interpolation (rows clamp, columns wrap). All output locations share one
//! weight tensor, laid out exactly like a planar `[C_out, C_in, k, k]` kernel,
//! and at the equator the pattern is the planar `k x k` neighbourhood.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{SamplingPlan, Tape, Tensor, Var};
use crate::params::{init_uniform, ParamStore, BN_EPS};
use crate::sphere::{pixel_center, ErpMap, LatLon};

/// Fractional ERP sampling locations for every output row of a spherical
/// convolution, plus the plan that executes them.
#[derive(Clone, Debug)]
pub struct SphericalGrid {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    k: usize,
    stride: usize,
    // per (out_row, tap): (absolute input row, column offset from out_col * stride)
    locations: Vec<(f64, f64)>,
    plan: Arc<SamplingPlan>,
}

impl SphericalGrid {
    pub fn in_hw(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// The `k * k` locations of output row `row`, taps in row-major kernel
    /// order.
    pub fn row(&self, row: usize) -> &[(f64, f64)] {
        let t = self.k * self.k;
        &self.locations[row * t..(row + 1) * t]
    }

    pub fn plan(&self) -> &Arc<SamplingPlan> {
        &self.plan
    }
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// `(d_row, d_col)` input-pixel offsets of the canonical patch rotated from the
/// equator to latitude `psi`, for an `in_h x in_w` grid. Taps are row-major.
pub fn patch_offsets(psi: f64, k: usize, in_h: usize, in_w: usize) -> Vec<(f64, f64)> {
    let half = (k / 2) as i64;
    let d_lambda = TAU / in_w as f64;
    let d_psi = PI / in_h as f64;
    let (s, c) = psi.sin_cos();
    let mut out = Vec::with_capacity(k * k);
    for i in -half..=half {
        for j in -half..=half {
            let (l0, p0) = (j as f64 * d_lambda, i as f64 * d_psi);
            let (x, y, z) = (p0.cos() * l0.cos(), p0.cos() * l0.sin(), p0.sin());
            // rotation about the y axis carrying (0, 0) to (0, psi)
            let (xr, zr) = (x * c - z * s, x * s + z * c);
            let lambda = y.atan2(xr);
            let phi = zr.clamp(-1.0, 1.0).asin();
            let d_row = (phi - psi) / PI * in_h as f64;
            let d_col = lambda / TAU * in_w as f64;
            out.push((snap(d_row), snap(d_col)));
        }
    }
    out
}

/// Builds the rotated sampling grid for an `in_h x in_w` input.
///
/// Output row `r` of `ceil(in_h / stride)` rows is centred at the ERP
/// latitude of that row on the coarser grid, so stride 2 samples every second
/// latitude ring and the output is itself an ERP map. The width must be a
/// multiple of the stride so columns stay longitude shifts of one pattern.
pub fn build_sampling_grid(in_hw: (usize, usize), k: usize, stride: usize) -> Result<SphericalGrid> {
    let (in_h, in_w) = in_hw;
    if k % 2 == 0 {
        return Err(Error::domain(format!("kernel size must be odd, got {k}")));
    }
    if stride == 0 || in_h == 0 || in_w == 0 || in_w % stride != 0 {
        return Err(Error::domain(format!(
            "{in_h}x{in_w} input does not fit stride {stride}"
        )));
    }
    // rows are independent latitude rings, so an odd height just rounds up
    let (out_h, out_w) = (in_h.div_ceil(stride), in_w / stride);
    let taps = k * k;
    let centre_shift = (stride as f64 - 1.0) / 2.0;
    let mut locations = Vec::with_capacity(out_h * taps);
    for r in 0..out_h {
        let psi = ((r as f64 + 0.5) / out_h as f64 - 0.5) * PI;
        let centre_row = (psi / PI + 0.5) * in_h as f64 - 0.5;
        for (dr, dc) in patch_offsets(psi, k, in_h, in_w) {
            locations.push((snap(centre_row + dr), centre_shift + dc));
        }
    }
    let locs = locations.clone();
    let plan = SamplingPlan::bilinear(in_h, in_w, out_h, out_w, stride, taps, |r, t| locs[r * taps + t]);
    Ok(SphericalGrid {
        in_hw,
        out_hw: (out_h, out_w),
        k,
        stride,
        locations,
        plan: Arc::new(plan),
    })
}

/// Spherical convolution of `input: [C_in, H, W]` with
/// `weights: [C_out, C_in, k, k]` over a prebuilt grid.
pub fn spconv2d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, grid: &SphericalGrid) -> Result<Tensor> {
    if weights.shape().len() != 4 || weights.shape()[2] != grid.k || weights.shape()[3] != grid.k {
        return Err(Error::shape(
            "spconv2d",
            format!("weights {:?} for a k={} grid", weights.shape(), grid.k),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let w = tape.leaf(weights.clone());
    let b = bias.map(|b| tape.leaf(b.clone()));
    let y = tape.conv(x, w, b, grid.plan())?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceReport {
    pub shift: i64,
    pub max_abs_diff: f64,
}

/// Compares `spconv(shift(x))` with `shift(spconv(x))` for a stride-1 grid.
pub fn longitude_shift_equivariance(
    input: &Tensor,
    weights: &Tensor,
    grid: &SphericalGrid,
    shift: i64,
) -> Result<EquivarianceReport> {
    if grid.stride != 1 {
        return Err(Error::domain("shift equivariance is defined for stride 1"));
    }
    let shifted_in = shift_tensor_columns(input, shift)?;
    let a = spconv2d(&shifted_in, weights, None, grid)?;
    let b = shift_tensor_columns(&spconv2d(input, weights, None, grid)?, shift)?;
    let max_abs_diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    Ok(EquivarianceReport {
        shift,
        max_abs_diff,
    })
}

/// Rolls every channel of `[C, H, W]` by `shift` columns.
pub fn shift_tensor_columns(t: &Tensor, shift: i64) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let mut out = Vec::with_capacity(t.len());
    for ci in 0..c {
        let m = ErpMap::new(h, w, t.channel(ci).to_vec())?.shift_columns(shift);
        out.extend_from_slice(m.values());
    }
    Tensor::new(&[c, h, w], out)
}

/// Resamples `[C, H, W]` so that content at `(0, 0)` moves to latitude
/// `angle`: `out(p) = in(R^-1 p)` with `R` the rotation about the axis
/// through `lambda = +-pi/2`.
pub fn rotate_latitude(t: &Tensor, angle: f64) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let (s, co) = (-angle).sin_cos();
    let mut locs = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let p = pixel_center(r, col, w, h);
            let (x, y, z) = (p.psi.cos() * p.lambda.cos(), p.psi.cos() * p.lambda.sin(), p.psi.sin());
            let (xr, zr) = (x * co - z * s, x * s + z * co);
            let src = LatLon::new(y.atan2(xr), zr.clamp(-1.0, 1.0).asin());
            let row = (src.psi / PI + 0.5) * h as f64 - 0.5;
            let colf = (src.lambda / TAU + 0.5) * w as f64 - 0.5;
            locs.push((row, colf));
        }
    }
    let sampled = crate::numerics::bilinear_sample(t, &locs)?;
    Tensor::new(&[c, h, w], sampled.into_data())
}

/// Unit vector of a pixel-mapping direction.
pub fn direction(p: LatLon) -> [f64; 3] {
    [p.psi.cos() * p.lambda.cos(), p.psi.cos() * p.lambda.sin(), p.psi.sin()]
}

/// Activation applied after a layer's (optional) batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// A spherical convolution layer with optional bias, batch norm and
/// activation. Parameters live in a [`ParamStore`] under `name.*`.
#[derive(Clone, Debug)]
pub struct SpConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub grid: Arc<SphericalGrid>,
    pub bias: bool,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl SpConvLayer {
    pub fn new(name: &str, in_hw: (usize, usize), c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(SpConvLayer {
            name: name.to_string(),
            c_in,
            c_out,
            grid: Arc::new(build_sampling_grid(in_hw, k, stride)?),
            bias: true,
            batch_norm: false,
            activation: Activation::Identity,
        })
    }

    pub fn with_batch_norm(mut self) -> Self {
        self.batch_norm = true;
        self.bias = false;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.grid.out_hw()
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn norm_name(&self) -> String {
        format!("{}.bn", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, gain: f64, rng: &mut R) {
        let k = self.grid.k();
        let fan_in = self.c_in * k * k;
        store.insert(
            &self.weight_name(),
            init_uniform(&[self.c_out, self.c_in, k, k], fan_in, gain, rng),
        );
        if self.bias {
            store.insert(&self.bias_name(), Tensor::zeros(&[self.c_out]));
        }
        if self.batch_norm {
            store.add_batch_norm(&self.norm_name(), self.c_out);
        }
    }

    /// Convolution, then batch norm, then activation.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, train: bool, x: Var) -> Result<Var> {
        let y = self.conv_only(tape, store, x)?;
        let y = if self.batch_norm {
            let bn = self.norm_name();
            let g = store.bind(tape, &format!("{bn}.gamma"))?;
            let b = store.bind(tape, &format!("{bn}.beta"))?;
            tape.batch_norm(y, g, b, store.norm_mode(&bn, train)?, BN_EPS)?
        } else {
            y
        };
        Ok(self.activation.apply(tape, y))
    }

    /// The bare convolution (plus bias), no normalisation or activation.
    pub fn conv_only(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(tape, &self.weight_name())?;
        let b = if self.bias {
            Some(store.bind(tape, &self.bias_name())?)
        } else {
            None
        };
        tape.conv(x, w, b, self.grid.plan())
    }
}

/// Outcome of the rotated-blob comparison between spherical and planar
/// convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationReport {
    pub spherical_corr: f64,
    pub planar_corr: f64,
}

/// Pearson correlation of two equally sized slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Gaussian blob of angular width `sigma` (radians) centred on `centre`.
pub fn spherical_blob(h: usize, w: usize, centre: LatLon, sigma: f64) -> Result<Tensor> {
    let c = direction(centre);
    let m = ErpMap::from_fn(h, w, |r, col| {
        let d = direction(pixel_center(r, col, w, h));
        let cosang = (c[0] * d[0] + c[1] * d[1] + c[2] * d[2]).clamp(-1.0, 1.0);
        let ang = cosang.acos();
        (-0.5 * (ang / sigma).powi(2)).exp()
    })?;
    Ok(m.to_tensor())
}

/// Five-point Laplacian, the centre-surround kernel used by the rotation
/// comparison. Being isotropic it is unaffected by the in-plane twist between
/// a north-aligned kernel and a rotated frame off the central meridian.
pub fn laplacian_kernel() -> Tensor {
    Tensor::new(&[1, 1, 3, 3], vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]).expect("static shape")
}

/// Convolves a blob at the equator and the same blob rotated to latitude
/// `angle` (sampled analytically), rotates the second response back and
/// correlates it with the first, for both the spherical and the planar
/// (longitude-wrapped) convolution with the same kernel.
pub fn latitude_rotation_test(h: usize, w: usize, angle: f64, sigma: f64, kernel: &Tensor) -> Result<RotationReport> {
    let k = kernel.shape()[2];
    let at_equator = spherical_blob(h, w, LatLon::new(0.0, 0.0), sigma)?;
    let rotated = spherical_blob(h, w, LatLon::new(0.0, angle), sigma)?;
    let grid = build_sampling_grid((h, w), k, 1)?;
    let s0 = spconv2d(&at_equator, kernel, None, &grid)?;
    let s1 = rotate_latitude(&spconv2d(&rotated, kernel, None, &grid)?, -angle)?;
    let p0 = crate::numerics::conv2d(&at_equator, kernel, 1, crate::numerics::Padding::LongitudeWrap)?;
    let p1 = rotate_latitude(
        &crate::numerics::conv2d(&rotated, kernel, 1, crate::numerics::Padding::LongitudeWrap)?,
        -angle,
    )?;
    Ok(RotationReport {
        spherical_corr: pearson(s0.data(), s1.data()),
        planar_corr: pearson(p0.data(), p1.data()),
    })
}

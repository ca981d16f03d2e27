//! Equirectangular (ERP) geometry.
//!
//! Pixel convention used throughout the crate: an ERP grid has `V` rows and
//! `U` columns. Longitude `lambda` maps to the horizontal axis via
//! `u = (lambda / 2pi + 0.5) U` and latitude `psi` to the vertical axis via
//! `v = (psi / pi + 0.5) V`, so row 0 touches `psi = -pi/2` and pixel
//! `(r, c)` is centred at `psi = ((r + 0.5) / V - 0.5) pi`,
//! `lambda = ((c + 0.5) / U - 0.5) 2pi`. The grid is periodic in longitude
//! only.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Head orientation as reported by an HMD (radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EulerOrientation {
    /// Cross-roll.
    pub alpha: f64,
    /// Pitch.
    pub beta: f64,
    /// Yaw.
    pub gamma: f64,
}

/// A viewing direction in the ERP pixel-mapping convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatLon {
    /// Horizontal coordinate, radians.
    pub lambda: f64,
    /// Vertical coordinate, radians.
    pub psi: f64,
}

impl LatLon {
    pub fn new(lambda: f64, psi: f64) -> Self {
        LatLon { lambda, psi }
    }

    pub fn from_degrees(lambda_deg: f64, psi_deg: f64) -> Self {
        LatLon::new(lambda_deg.to_radians(), psi_deg.to_radians())
    }
}

/// Converts an orientation to pixel-mapping coordinates:
/// `lambda = asin(beta / |o|)` and `psi` the arctangent of `-gamma / alpha`.
///
/// The arctangent is taken quadrant-aware on `(-gamma, alpha)` so that
/// `alpha = 0` is well defined, then reduced into `(-pi/2, pi/2]`, the range
/// the vertical pixel mapping accepts.
pub fn euler_to_latlon(o: EulerOrientation) -> Result<LatLon> {
    let norm = (o.alpha * o.alpha + o.beta * o.beta + o.gamma * o.gamma).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::domain(format!("orientation {o:?} has no direction")));
    }
    let lambda = (o.beta / norm).clamp(-1.0, 1.0).asin();
    let mut psi = (-o.gamma).atan2(o.alpha);
    if psi > FRAC_PI_2 {
        psi -= PI;
    } else if psi <= -FRAC_PI_2 {
        psi += PI;
    }
    Ok(LatLon { lambda, psi })
}

/// Unit-norm orientation that [`euler_to_latlon`] maps back to `p`.
///
/// Exact for `|lambda| < pi/2` and `|psi| < pi/2`, the image of the forward
/// map.
pub fn latlon_to_euler(p: LatLon) -> EulerOrientation {
    EulerOrientation {
        alpha: p.lambda.cos() * p.psi.cos(),
        beta: p.lambda.sin(),
        gamma: -p.lambda.cos() * p.psi.sin(),
    }
}

/// Pixel `(u, v)` containing direction `p` on a `width x height` grid.
///
/// Longitudes outside `[-pi, pi]` wrap; the boundary itself and any vertical
/// overshoot clamp to the last column/row.
pub fn latlon_to_pixel(p: LatLon, width: usize, height: usize) -> (usize, usize) {
    let mut lambda = p.lambda;
    if !(-PI..=PI).contains(&lambda) {
        lambda = (lambda + PI).rem_euclid(TAU) - PI;
    }
    let u = ((lambda / TAU + 0.5) * width as f64).floor();
    let v = ((p.psi / PI + 0.5) * height as f64).floor();
    let clamp = |x: f64, n: usize| x.max(0.0).min((n.max(1) - 1) as f64) as usize;
    (clamp(u, width), clamp(v, height))
}

/// Direction at the centre of pixel `(row, col)`.
pub fn pixel_center(row: usize, col: usize, width: usize, height: usize) -> LatLon {
    LatLon {
        lambda: ((col as f64 + 0.5) / width as f64 - 0.5) * TAU,
        psi: ((row as f64 + 0.5) / height as f64 - 0.5) * PI,
    }
}

/// Scalar field on an ERP grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ErpMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ErpMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::domain("ERP grid must be at least 1x1"));
        }
        if values.len() != height * width {
            return Err(Error::shape(
                "ErpMap::new",
                format!("{height}x{width} grid with {} values", values.len()),
            ));
        }
        Ok(ErpMap {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// First `(row, col)` holding the maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn same_grid(&self, other: &ErpMap, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }

    /// Min-max normalisation to `[0, 1]`.
    ///
    /// A map whose range is negligible relative to its magnitude carries no
    /// spatial information and normalises to all zeros.
    pub fn normalized(&self) -> ErpMap {
        let (lo, hi) = (self.min(), self.max());
        let scale = hi.abs().max(lo.abs());
        let values = if !(hi - lo > 1e-9 * scale) {
            vec![0.0; self.values.len()]
        } else {
            self.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
        };
        ErpMap { values, ..*self }
    }

    /// Elementwise maximum with `other`.
    pub fn max_with(&self, other: &ErpMap) -> Result<ErpMap> {
        self.same_grid(other, "max_with")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max(*b))
            .collect();
        Ok(ErpMap { values, ..*self })
    }

    /// Rolls the map by `cols` columns towards larger longitude.
    pub fn shift_columns(&self, cols: i64) -> ErpMap {
        let w = self.width as i64;
        let values = (0..self.values.len())
            .map(|i| {
                let (r, c) = (i / self.width, (i % self.width) as i64);
                self.values[r * self.width + (c - cols).rem_euclid(w) as usize]
            })
            .collect();
        ErpMap { values, ..*self }
    }

    /// `[1, V, U]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.values.clone()).expect("consistent dims")
    }

    /// Map from a single-channel `[1, V, U]` (or `[V, U]`) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [1, h, w] | [h, w] => Self::new(h, w, t.data().to_vec()),
            ref s => Err(Error::shape("ErpMap::from_tensor", format!("{s:?}"))),
        }
    }
}

/// Per-pixel solid angle over `4pi`; sums to one over the grid.
///
/// Uses the exact cell area `(2pi / U) |sin psi_bottom - sin psi_top|`.
pub fn solid_angle_weights(height: usize, width: usize) -> Result<ErpMap> {
    if height == 0 || width == 0 {
        return Err(Error::domain("ERP grid must be at least 1x1"));
    }
    let row_weights: Vec<f64> = (0..height)
        .map(|r| {
            let lo = (r as f64 / height as f64 - 0.5) * PI;
            let hi = ((r + 1) as f64 / height as f64 - 0.5) * PI;
            (TAU / width as f64) * (hi.sin() - lo.sin()).abs() / (4.0 * PI)
        })
        .collect();
    ErpMap::from_fn(height, width, |r, _| row_weights[r])
}

/// Viewport rectangle centred on a gaze direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FovRect {
    pub center: LatLon,
    pub width_deg: f64,
    pub height_deg: f64,
}

impl FovRect {
    /// Typical HMD viewport extent in degrees.
    pub const DEFAULT_EXTENT: (f64, f64) = (110.0, 90.0);

    pub fn new(center: LatLon) -> Self {
        let (width_deg, height_deg) = Self::DEFAULT_EXTENT;
        FovRect {
            center,
            width_deg,
            height_deg,
        }
    }

    pub fn with_extent(center: LatLon, width_deg: f64, height_deg: f64) -> Self {
        FovRect {
            center,
            width_deg,
            height_deg,
        }
    }
}

/// Axis-aligned Gaussian (sigma = extent / 4 per axis) centred on the gaze
/// pixel, truncated to the viewport rectangle and zero outside it. The
/// rectangle wraps across the longitude seam and is cut at the poles.
pub fn gaussian_fov_heatmap(rect: &FovRect, height: usize, width: usize) -> Result<ErpMap> {
    if height == 0 || width == 0 {
        return Err(Error::domain("ERP grid must be at least 1x1"));
    }
    if !(rect.width_deg > 0.0 && rect.height_deg > 0.0) {
        return Err(Error::domain(format!("degenerate viewport {rect:?}")));
    }
    let (u, v) = latlon_to_pixel(rect.center, width, height);
    let px_per_deg_x = width as f64 / 360.0;
    let px_per_deg_y = height as f64 / 180.0;
    let half_w = 0.5 * rect.width_deg * px_per_deg_x;
    let half_h = 0.5 * rect.height_deg * px_per_deg_y;
    let sigma_x = rect.width_deg / 4.0 * px_per_deg_x;
    let sigma_y = rect.height_deg / 4.0 * px_per_deg_y;
    let w = width as i64;
    ErpMap::from_fn(height, width, |r, c| {
        let mut dx = (c as i64 - u as i64).rem_euclid(w);
        if dx > w / 2 {
            dx -= w;
        }
        let dx = dx as f64;
        let dy = r as f64 - v as f64;
        if dx.abs() > half_w || dy.abs() > half_h {
            return 0.0;
        }
        (-0.5 * (dx / sigma_x).powi(2) - 0.5 * (dy / sigma_y).powi(2)).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn euler_examples() {
        let p = euler_to_latlon(EulerOrientation { alpha: 1.0, beta: 0.0, gamma: 0.0 }).unwrap();
        assert_eq!((p.lambda, p.psi), (0.0, 0.0));
        let p = euler_to_latlon(EulerOrientation { alpha: 1.0, beta: 1.0, gamma: 0.0 }).unwrap();
        assert!(close(p.lambda, FRAC_PI_4, 1e-15) && p.psi == 0.0);
        let p = euler_to_latlon(EulerOrientation { alpha: 1.0, beta: 0.0, gamma: -1.0 }).unwrap();
        assert!(close(p.psi, FRAC_PI_4, 1e-15) && p.lambda == 0.0);
    }

    #[test]
    fn euler_zero_is_domain_error() {
        let o = EulerOrientation { alpha: 0.0, beta: 0.0, gamma: 0.0 };
        assert!(matches!(euler_to_latlon(o), Err(Error::Domain(_))));
    }

    #[test]
    fn euler_alpha_zero_is_defined() {
        let p = euler_to_latlon(EulerOrientation { alpha: 0.0, beta: 0.0, gamma: -1.0 }).unwrap();
        assert!(close(p.psi, FRAC_PI_2, 1e-15));
    }

    #[test]
    fn pixel_examples() {
        assert_eq!(latlon_to_pixel(LatLon::new(0.0, 0.0), 200, 100), (100, 50));
        assert_eq!(latlon_to_pixel(LatLon::new(PI, FRAC_PI_2), 200, 100), (199, 99));
        assert_eq!(latlon_to_pixel(LatLon::new(FRAC_PI_2, -FRAC_PI_4), 400, 200), (300, 50));
    }

    #[test]
    fn pixel_wraps_longitude_overshoot() {
        let (u, _) = latlon_to_pixel(LatLon::new(PI + 0.5 * TAU / 200.0 + 1e-9, 0.0), 200, 100);
        assert_eq!(u, 0);
    }

    #[test]
    fn solid_angle_examples() {
        let w = solid_angle_weights(2, 1).unwrap();
        assert!(close(w.values()[0], 0.5, 1e-15) && close(w.values()[1], 0.5, 1e-15));
        let w = solid_angle_weights(4, 1).unwrap();
        let want = [0.146447, 0.353553, 0.353553, 0.146447];
        for (a, b) in w.values().iter().zip(want) {
            assert!(close(*a, b, 1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn heatmap_peak_and_support() {
        let rect = FovRect::new(LatLon::from_degrees(30.0, -10.0));
        let m = gaussian_fov_heatmap(&rect, 64, 128).unwrap();
        let (u, v) = latlon_to_pixel(rect.center, 128, 64);
        assert_eq!(m.get(v, u), 1.0);
        assert_eq!(m.max(), 1.0);
        // 110 degrees wide is about 39 px: 30 px to the side is outside
        assert_eq!(m.get(v, (u + 30) % 128), 0.0);
        assert!(gaussian_fov_heatmap(&rect, 0, 128).is_err());
    }

    #[test]
    fn heatmap_wraps_across_seam() {
        let rect = FovRect::new(LatLon::from_degrees(178.0, 0.0));
        let m = gaussian_fov_heatmap(&rect, 64, 128).unwrap();
        // brute-force membership: every row inside the rectangle must touch
        // both image edges
        let mid = 32;
        assert!(m.get(mid, 0) > 0.0 && m.get(mid, 127) > 0.0);
        let left: f64 = (0..64).map(|r| m.get(r, 0)).sum();
        let right: f64 = (0..64).map(|r| m.get(r, 127)).sum();
        assert!(left > 0.0 && right > 0.0);
    }

    #[test]
    fn row_weights_grow_towards_equator() {
        for v in 3..40 {
            let w = solid_angle_weights(v, 1).unwrap();
            for r in 0..(v - 1) / 2 {
                assert!(w.values()[r] < w.values()[r + 1]);
            }
        }
    }

    #[test]
    fn latlon_euler_round_trip() {
        for &(l, p) in &[(0.3, -0.2), (-1.2, 1.1), (1.5, -1.5), (0.0, 0.0)] {
            let back = euler_to_latlon(latlon_to_euler(LatLon::new(l, p))).unwrap();
            assert!(close(back.lambda, l, 1e-12) && close(back.psi, p, 1e-12));
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(v in 1usize..=64, u in 1usize..=64) {
            let w = solid_angle_weights(v, u).unwrap();
            prop_assert!((w.sum() - 1.0).abs() < 1e-9);
            for r in 0..v {
                let row = &w.values()[r * u..(r + 1) * u];
                prop_assert!(row.iter().all(|&x| x == row[0]));
            }
        }

        #[test]
        fn pixel_mapping_is_monotone(a in -3.1f64..3.1, b in -3.1f64..3.1, p in -1.5f64..1.5, q in -1.5f64..1.5) {
            let (lo_l, hi_l) = (a.min(b), a.max(b));
            let (lo_p, hi_p) = (p.min(q), p.max(q));
            let (u0, v0) = latlon_to_pixel(LatLon::new(lo_l, lo_p), 360, 180);
            let (u1, v1) = latlon_to_pixel(LatLon::new(hi_l, hi_p), 360, 180);
            prop_assert!(u0 <= u1 && v0 <= v1);
        }

        #[test]
        fn heatmap_mass_invariant_under_longitude_shift(lon in -180.0f64..180.0, lat in -60.0f64..60.0, shift in -180.0f64..180.0) {
            let a = gaussian_fov_heatmap(&FovRect::new(LatLon::from_degrees(lon, lat)), 32, 64).unwrap();
            let b = gaussian_fov_heatmap(&FovRect::new(LatLon::from_degrees(lon + shift, lat)), 32, 64).unwrap();
            prop_assert!((a.sum() - b.sum()).abs() <= 1e-6 * a.sum());
        }

        #[test]
        fn euler_scale_invariance(a in -2.0f64..2.0, b in -2.0f64..2.0, g in -2.0f64..2.0, s in 0.01f64..100.0) {
            prop_assume!(a.abs() + b.abs() + g.abs() > 1e-3);
            let p = euler_to_latlon(EulerOrientation { alpha: a, beta: b, gamma: g }).unwrap();
            let q = euler_to_latlon(EulerOrientation { alpha: s * a, beta: s * b, gamma: s * g }).unwrap();
            prop_assert!((p.lambda - q.lambda).abs() < 1e-12 && (p.psi - q.psi).abs() < 1e-12);
        }
    }
}

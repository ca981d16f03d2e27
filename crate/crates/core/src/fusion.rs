//! Global/regional disparity fusion of a saliency map and a predicted FoV map.
//!
//! Each map is weighted by `(M - m_bar)^2`, where `M` is its global maximum and
//! `m_bar` the mean of its per-region maxima. A map with one dominant peak gets
//! a large weight; a map with many comparable local peaks (or a flat map) gets
//! little or none.

use crate::error::{Error, Result};
use crate::sphere::ErpMap;

pub const DEFAULT_REGIONS: (usize, usize) = (8, 8);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisparityStats {
    pub global_max: f64,
    pub mean_regional_max: f64,
    pub regions: (usize, usize),
}

impl DisparityStats {
    /// `(M - m_bar)^2`.
    pub fn weight(&self) -> f64 {
        (self.global_max - self.mean_regional_max).powi(2)
    }
}

/// Bounds `[start, end)` of band `i` of `n` over `len` cells; the last band
/// absorbs the remainder.
fn band(i: usize, n: usize, len: usize) -> (usize, usize) {
    let size = len / n;
    let end = if i + 1 == n { len } else { (i + 1) * size };
    (i * size, end)
}

pub fn regional_stats(map: &ErpMap, regions: (usize, usize)) -> Result<DisparityStats> {
    let (h, w) = map.dims();
    let (rr, rc) = regions;
    if rr == 0 || rc == 0 || rr > h || rc > w {
        return Err(Error::domain(format!(
            "{rr}x{rc} regions do not partition a {h}x{w} map"
        )));
    }
    let mut maxima = Vec::with_capacity(rr * rc);
    for i in 0..rr {
        let (r0, r1) = band(i, rr, h);
        for j in 0..rc {
            let (c0, c1) = band(j, rc, w);
            let mut m = f64::NEG_INFINITY;
            for r in r0..r1 {
                for c in c0..c1 {
                    m = m.max(map.get(r, c));
                }
            }
            maxima.push(m);
        }
    }
    let global_max = maxima.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean_regional_max = maxima.iter().sum::<f64>() / maxima.len() as f64;
    Ok(DisparityStats {
        global_max,
        mean_regional_max,
        regions,
    })
}

/// `P = P_s (M_s - m_s)^2 + P_v (M_v - m_v)^2`, min-max renormalised.
///
/// When both weights vanish the result is the elementwise mean of the inputs.
pub fn fuse(saliency: &ErpMap, fov: &ErpMap, regions: (usize, usize)) -> Result<ErpMap> {
    saliency.same_grid(fov, "fuse")?;
    let ws = regional_stats(saliency, regions)?.weight();
    let wv = regional_stats(fov, regions)?.weight();
    let (a, b) = if ws == 0.0 && wv == 0.0 { (0.5, 0.5) } else { (ws, wv) };
    let values = saliency
        .values()
        .iter()
        .zip(fov.values())
        .map(|(s, v)| a * s + b * v)
        .collect();
    Ok(ErpMap::new(saliency.height(), saliency.width(), values)?.normalized())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ErpMap {
        ErpMap::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_map_stats() {
        let m = ErpMap::new(4, 8, vec![0.3; 32]).unwrap();
        let s = regional_stats(&m, (2, 2)).unwrap();
        assert_eq!(s.global_max, 0.3);
        assert!((s.mean_regional_max - 0.3).abs() < 1e-15);
    }

    #[test]
    fn single_peak_stats() {
        let mut m = ErpMap::zeros(4, 4).unwrap();
        m.values_mut()[5] = 1.0;
        let s = regional_stats(&m, (2, 2)).unwrap();
        assert_eq!((s.global_max, s.mean_regional_max), (1.0, 0.25));
    }

    #[test]
    fn oversized_region_grid_is_rejected() {
        let m = ErpMap::zeros(4, 4).unwrap();
        assert!(regional_stats(&m, (5, 2)).is_err());
        assert!(regional_stats(&m, (0, 2)).is_err());
    }

    #[test]
    fn remainder_goes_to_last_region() {
        // 5 rows into 2 bands: rows 0..2 and 2..5
        let mut m = ErpMap::zeros(5, 2).unwrap();
        m.values_mut()[4 * 2] = 1.0;
        let s = regional_stats(&m, (2, 1)).unwrap();
        assert_eq!(s.mean_regional_max, 0.5);
    }

    #[test]
    fn uniform_saliency_is_suppressed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ErpMap::new(8, 16, vec![0.7; 128]).unwrap();
        let v = random_map(8, 16, &mut rng).normalized();
        let p = fuse(&s, &v, (4, 4)).unwrap();
        for (a, b) in p.values().iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let q = fuse(&v, &s, (4, 4)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn both_uniform_gives_mean() {
        let s = ErpMap::new(2, 4, vec![0.2; 8]).unwrap();
        let v = ErpMap::new(2, 4, vec![0.6; 8]).unwrap();
        // the mean is itself uniform, which normalises to zeros
        let p = fuse(&s, &v, (2, 2)).unwrap();
        assert!(p.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, v) = (random_map(16, 32, &mut rng), random_map(16, 32, &mut rng));
        let p = fuse(&s, &v, (4, 4)).unwrap();
        // oracle: regional maxima by explicit 4x8 blocks
        let w = |m: &ErpMap| {
            let mut maxima = vec![f64::MIN; 16];
            for r in 0..16 {
                for c in 0..32 {
                    let k = (r / 4) * 4 + c / 8;
                    maxima[k] = maxima[k].max(m.get(r, c));
                }
            }
            let gmax = maxima.iter().cloned().fold(f64::MIN, f64::max);
            let mean = maxima.iter().sum::<f64>() / 16.0;
            (gmax - mean) * (gmax - mean)
        };
        let (ws, wv) = (w(&s), w(&v));
        let raw: Vec<f64> = (0..512).map(|i| ws * s.values()[i] + wv * v.values()[i]).collect();
        let lo = raw.iter().cloned().fold(f64::MAX, f64::min);
        let hi = raw.iter().cloned().fold(f64::MIN, f64::max);
        for (a, r) in p.values().iter().zip(&raw) {
            assert!((a - (r - lo) / (hi - lo)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_maps_keep_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(8, 16, &mut rng);
        assert_eq!(fuse(&m, &m, (2, 4)).unwrap().argmax(), m.argmax());
    }

    #[test]
    fn sharper_peak_gains_weight() {
        // a map with one peak vs a map with peaks in every region
        let mut sharp = ErpMap::zeros(8, 8).unwrap();
        sharp.values_mut()[0] = 1.0;
        let mut flat = ErpMap::zeros(8, 8).unwrap();
        for r in (0..8).step_by(2) {
            for c in (0..8).step_by(2) {
                flat.values_mut()[r * 8 + c + 1 + 8] = 1.0;
            }
        }
        assert!(regional_stats(&sharp, (4, 4)).unwrap().weight() > regional_stats(&flat, (4, 4)).unwrap().weight());
    }

    proptest! {
        #[test]
        fn stats_are_ordered(seed in 0u64..1000, rr in 1usize..5, rc in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_map(8, 16, &mut rng);
            let s = regional_stats(&m, (rr, rc)).unwrap();
            prop_assert!(s.global_max >= s.mean_regional_max);
            prop_assert!(s.mean_regional_max >= 0.0);
        }

        #[test]
        fn output_in_unit_interval(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = fuse(&random_map(8, 16, &mut rng), &random_map(8, 16, &mut rng), DEFAULT_REGIONS).unwrap();
            prop_assert!(p.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn boosting_peak_raises_share(seed in 0u64..500, boost in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_map(8, 16, &mut rng).normalized().values().iter().map(|v| v * 0.5).collect::<Vec<_>>();
            let v = random_map(8, 16, &mut rng).normalized();
            let s = ErpMap::new(8, 16, s).unwrap();
            let (r, c) = s.argmax();
            let mut sharper = s.clone();
            sharper.values_mut()[r * 16 + c] += boost;
            let share = |m: &ErpMap| {
                let a = regional_stats(m, (4, 4)).unwrap().weight() * m.get(r, c);
                let b = regional_stats(&v, (4, 4)).unwrap().weight() * v.get(r, c);
                a / (a + b)
            };
            prop_assert!(share(&sharper) >= share(&s) - 1e-12);
        }
    }
}

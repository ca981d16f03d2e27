//! Loss and evaluation metrics: solid-angle weighted MSE, NSS, CC, AUC-Judd,
//! tile-set Jaccard metrics and head-movement frequency classes.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::sphere::{solid_angle_weights, ErpMap, LatLon};

/// Pixel value above which a tile counts as viewed.
pub const TILE_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_TILES: (usize, usize) = (8, 16);

/// `sum w (P - G)^2 / sum w` with solid-angle weights `w`.
pub fn weighted_mse(p: &ErpMap, g: &ErpMap) -> Result<f64> {
    p.same_grid(g, "weighted_mse")?;
    let w = solid_angle_weights(p.height(), p.width())?;
    let (num, den) = p
        .values()
        .iter()
        .zip(g.values())
        .zip(w.values())
        .fold((0.0, 0.0), |(n, d), ((a, b), w)| (n + w * (a - b).powi(2), d + w));
    Ok(num / den)
}

/// Mean of [`weighted_mse`] over paired frames.
pub fn sequence_loss(preds: &[ErpMap], gts: &[ErpMap]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::domain(format!(
            "sequence loss needs equal nonempty lists, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += weighted_mse(p, g)?;
    }
    Ok(total / preds.len() as f64)
}

/// A fixation as a pixel `(row, col)`.
pub type Fixation = (usize, usize);

/// Pixel of a gaze direction on a `height x width` grid.
pub fn fixation_pixel(p: LatLon, height: usize, width: usize) -> Fixation {
    let (u, v) = crate::sphere::latlon_to_pixel(p, width, height);
    (v, u)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_fixations(map: &ErpMap, fixations: &[Fixation]) -> Result<()> {
    if fixations.is_empty() {
        return Err(Error::UndefinedMetric("no fixations".into()));
    }
    for &(r, c) in fixations {
        if r >= map.height() || c >= map.width() {
            return Err(Error::domain(format!("fixation ({r}, {c}) outside the map")));
        }
    }
    Ok(())
}

/// Normalized scanpath saliency with the population standard deviation.
pub fn nss(p: &ErpMap, fixations: &[Fixation]) -> Result<f64> {
    check_fixations(p, fixations)?;
    let (mean, std) = mean_std(p.values());
    if std == 0.0 {
        return Err(Error::UndefinedMetric("NSS of a constant map".into()));
    }
    Ok(fixations.iter().map(|&(r, c)| (p.get(r, c) - mean) / std).sum::<f64>() / fixations.len() as f64)
}

/// Pearson correlation over pixels.
pub fn cc(p: &ErpMap, g: &ErpMap) -> Result<f64> {
    p.same_grid(g, "cc")?;
    let (mp, sp) = mean_std(p.values());
    let (mg, sg) = mean_std(g.values());
    if sp == 0.0 || sg == 0.0 {
        return Err(Error::UndefinedMetric("CC with a constant map".into()));
    }
    let n = p.values().len() as f64;
    let cov = p
        .values()
        .iter()
        .zip(g.values())
        .map(|(a, b)| (a - mp) * (b - mg))
        .sum::<f64>()
        / n;
    Ok((cov / (sp * sg)).clamp(-1.0, 1.0))
}

/// AUC-Judd: fixated pixels are positives and every other pixel a
/// negative. The ROC curve sweeps every distinct map value, so ties score
/// one half and the area equals the probability that a fixation outranks a
/// non-fixated pixel.
pub fn auc_judd(p: &ErpMap, fixations: &[Fixation]) -> Result<f64> {
    check_fixations(p, fixations)?;
    let w = p.width();
    let mut fixated = vec![false; p.values().len()];
    for &(r, c) in fixations {
        fixated[r * w + c] = true;
    }
    let mut ranked: Vec<(f64, bool)> = fixations
        .iter()
        .map(|&(r, c)| (p.get(r, c), true))
        .chain(p.values().iter().zip(&fixated).filter(|(_, &f)| !f).map(|(v, _)| (*v, false)))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let np = fixations.len() as f64;
    let nn = (ranked.len() - fixations.len()) as f64;
    if nn == 0.0 {
        return Err(Error::UndefinedMetric("AUC with every pixel fixated".into()));
    }
    let (mut tp, mut area) = (0.0, 0.0);
    let mut i = 0;
    while i < ranked.len() {
        let (mut dtp, mut dfp) = (0.0, 0.0);
        let v = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == v {
            if ranked[i].1 {
                dtp += 1.0;
            } else {
                dfp += 1.0;
            }
            i += 1;
        }
        area += dfp * (tp + 0.5 * dtp);
        tp += dtp;
    }
    Ok(area / (np * nn))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub threshold: f64,
}

impl Default for TileGrid {
    fn default() -> Self {
        TileGrid {
            rows: DEFAULT_TILES.0,
            cols: DEFAULT_TILES.1,
            threshold: TILE_THRESHOLD,
        }
    }
}

impl TileGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        TileGrid {
            rows,
            cols,
            threshold: TILE_THRESHOLD,
        }
    }

    /// Row-major flags of tiles holding any pixel above the threshold. The
    /// last tile row/column absorbs any remainder.
    pub fn viewed(&self, map: &ErpMap) -> Result<Vec<bool>> {
        let (h, w) = map.dims();
        if self.rows == 0 || self.cols == 0 || self.rows > h || self.cols > w {
            return Err(Error::domain(format!(
                "{}x{} tiles do not fit a {h}x{w} map",
                self.rows, self.cols
            )));
        }
        let tile_of = |i: usize, n: usize, len: usize| (i / (len / n)).min(n - 1);
        let mut out = vec![false; self.rows * self.cols];
        for r in 0..h {
            let tr = tile_of(r, self.rows, h);
            for c in 0..w {
                if map.get(r, c) > self.threshold {
                    out[tr * self.cols + tile_of(c, self.cols, w)] = true;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Jaccard accuracy, precision and recall of viewed-tile sets.
pub fn tile_set_metrics(pred: &[bool], gt: &[bool]) -> Result<TileScores> {
    if pred.len() != gt.len() {
        return Err(Error::shape("tile_set_metrics", format!("{} vs {} tiles", pred.len(), gt.len())));
    }
    let count = |f: &dyn Fn(bool, bool) -> bool| pred.iter().zip(gt).filter(|(&a, &b)| f(a, b)).count() as f64;
    let inter = count(&|a, b| a && b);
    let union = count(&|a, b| a || b);
    let npred = count(&|a, _| a);
    let ngt = count(&|_, b| b);
    if ngt == 0.0 {
        return Err(Error::UndefinedMetric("ground truth views no tile".into()));
    }
    Ok(TileScores {
        accuracy: inter / union,
        precision: if npred == 0.0 { 0.0 } else { inter / npred },
        recall: inter / ngt,
    })
}

pub fn tile_metrics(p: &ErpMap, g: &ErpMap, grid: &TileGrid) -> Result<TileScores> {
    p.same_grid(g, "tile_metrics")?;
    tile_set_metrics(&grid.viewed(p)?, &grid.viewed(g)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MoveLevel {
    Less,
    Middle,
    More,
}

impl fmt::Display for MoveLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MoveLevel::Less => "Less",
            MoveLevel::Middle => "Middle",
            MoveLevel::More => "More",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadMoveClass {
    pub label: MoveLevel,
    pub mean_lon_diff_deg: f64,
    pub mean_lat_diff_deg: f64,
}

pub fn longitude_level(deg: f64) -> MoveLevel {
    if deg > 0.65 {
        MoveLevel::More
    } else if deg >= 0.3 {
        MoveLevel::Middle
    } else {
        MoveLevel::Less
    }
}

pub fn latitude_level(deg: f64) -> MoveLevel {
    if deg > 0.3 {
        MoveLevel::More
    } else if deg >= 0.1 {
        MoveLevel::Middle
    } else {
        MoveLevel::Less
    }
}

/// Adjacent levels resolve to the higher one; More against Less is Middle.
pub fn combine_levels(a: MoveLevel, b: MoveLevel) -> MoveLevel {
    if (a as i32 - b as i32).abs() > 1 {
        MoveLevel::Middle
    } else {
        a.max(b)
    }
}

pub fn classify_mean_diffs(lon_deg: f64, lat_deg: f64) -> HeadMoveClass {
    HeadMoveClass {
        label: combine_levels(longitude_level(lon_deg), latitude_level(lat_deg)),
        mean_lon_diff_deg: lon_deg,
        mean_lat_diff_deg: lat_deg,
    }
}

/// Classifies a gaze path from the mean absolute per-frame change in
/// longitude (wrapped to the shorter arc) and latitude.
pub fn head_move_classify(path: &[LatLon]) -> Result<HeadMoveClass> {
    if path.len() < 2 {
        return Err(Error::domain("head movement needs at least two samples"));
    }
    let n = (path.len() - 1) as f64;
    let (mut lon, mut lat) = (0.0, 0.0);
    for w in path.windows(2) {
        let d = (w[1].lambda - w[0].lambda + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
            - std::f64::consts::PI;
        lon += d.abs();
        lat += (w[1].psi - w[0].psi).abs();
    }
    Ok(classify_mean_diffs((lon / n).to_degrees(), (lat / n).to_degrees()))
}

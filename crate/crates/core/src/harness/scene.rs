//! Synthetic scenes with analytically known viewer behaviour.
//!
//! A bright Gaussian blob moves over a dim static texture. Each user looks
//! at the blob plus two offsets: a crowd-wide wander shared by every viewer
//! and a personal jitter. Both are stationary AR(1) processes, so the crowd
//! attention can only be learned from feedback, not from the frame itself,
//! and it decorrelates with a known time constant.

use std::f64::consts::TAU;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::spconv::direction;
use crate::sphere::{latlon_to_euler, pixel_center, LatLon};

use super::traces::{GazeSample, GazeTrace};

/// Gaze longitude is produced by an arcsine and never leaves (-90, 90)
/// degrees; generated gaze stays inside this band.
const LON_LIMIT_DEG: f64 = 85.0;
const LAT_LIMIT_DEG: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// One blob drifting in longitude with a latitude oscillation.
    DriftingBlob,
    /// The drifting blob plus a dimmer distractor moving the other way.
    TwoBlob,
    /// A blob that stays put.
    Static,
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::DriftingBlob => "drifting-blob",
            SceneKind::TwoBlob => "two-blob",
            SceneKind::Static => "static",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub frames: usize,
    pub grid: (usize, usize),
    pub population: usize,
    pub fps: f64,
    pub seed: u64,
    pub blob_sigma_deg: f64,
    pub start_lon_deg: f64,
    pub drift_deg_per_frame: f64,
    pub lat_amplitude_deg: f64,
    pub lat_period_frames: f64,
    /// Stationary standard deviation of the shared crowd offset, per axis.
    pub wander_deg: f64,
    /// Lag-one autocorrelation of the crowd offset.
    pub wander_corr: f64,
    pub user_noise_deg: f64,
    pub user_noise_corr: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            kind: SceneKind::DriftingBlob,
            frames: 200,
            grid: (64, 128),
            population: 20,
            fps: 30.0,
            seed: 0,
            blob_sigma_deg: 12.0,
            start_lon_deg: -60.0,
            drift_deg_per_frame: 0.6,
            lat_amplitude_deg: 20.0,
            lat_period_frames: 200.0,
            wander_deg: 25.0,
            wander_corr: 0.97,
            user_noise_deg: 6.0,
            user_noise_corr: 0.9,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config("a scene needs at least two frames".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || !(self.fps > 0.0) {
            return Err(Error::Config("scene grid and fps must be positive".into()));
        }
        if !(self.blob_sigma_deg > 0.0) || !(self.lat_period_frames > 0.0) {
            return Err(Error::Config("blob width and latitude period must be positive".into()));
        }
        for (name, c) in [("wander_corr", self.wander_corr), ("user_noise_corr", self.user_noise_corr)] {
            if !(0.0..1.0).contains(&c) {
                return Err(Error::Config(format!("scene.{name} must lie in [0, 1)")));
            }
        }
        if self.wander_deg < 0.0 || self.user_noise_deg < 0.0 {
            return Err(Error::Config("scene noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Blob centre at frame `i`.
    pub fn blob_centre(&self, i: usize) -> LatLon {
        let i = i as f64;
        match self.kind {
            SceneKind::Static => LatLon::from_degrees(self.start_lon_deg, 0.0),
            SceneKind::DriftingBlob | SceneKind::TwoBlob => LatLon::from_degrees(
                self.start_lon_deg + self.drift_deg_per_frame * i,
                self.lat_amplitude_deg * (TAU * i / self.lat_period_frames).sin(),
            ),
        }
    }

    fn distractor_centre(&self, i: usize) -> LatLon {
        let i = i as f64;
        LatLon::from_degrees(
            -self.start_lon_deg - self.drift_deg_per_frame * i,
            -self.lat_amplitude_deg * (TAU * i / self.lat_period_frames).sin(),
        )
    }
}

/// Frames plus the viewers' gaze.
#[derive(Clone, Debug)]
pub struct Scene {
    pub config: SceneConfig,
    /// `[1, V, U]` luminance in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub traces: Vec<GazeTrace>,
    /// Crowd attention centre (blob plus shared wander) per frame.
    pub crowd: Vec<LatLon>,
}

fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    d.clamp(-1.0, 1.0).acos()
}

fn blob(p: [f64; 3], centre: LatLon, sigma: f64) -> f64 {
    let d = angle_between(p, direction(centre));
    (-0.5 * (d / sigma).powi(2)).exp()
}

fn background(p: LatLon) -> f64 {
    0.1 * (1.0 + (3.0 * p.lambda).sin() * (2.0 * p.psi).cos())
}

/// AR(1) series with stationary standard deviation `sigma`.
struct Ar1 {
    value: f64,
    corr: f64,
    sigma: f64,
}

impl Ar1 {
    fn new(sigma: f64, corr: f64, rng: &mut ChaCha8Rng) -> Self {
        let z: f64 = StandardNormal.sample(rng);
        Ar1 {
            value: sigma * z,
            corr,
            sigma,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let v = self.value;
        let z: f64 = StandardNormal.sample(rng);
        self.value = self.corr * self.value + (1.0 - self.corr * self.corr).sqrt() * self.sigma * z;
        v
    }
}

fn clamp_gaze(lon: f64, lat: f64) -> LatLon {
    LatLon::from_degrees(
        lon.clamp(-LON_LIMIT_DEG, LON_LIMIT_DEG),
        lat.clamp(-LAT_LIMIT_DEG, LAT_LIMIT_DEG),
    )
}

pub fn render_frame(cfg: &SceneConfig, i: usize) -> Result<Tensor> {
    let (h, w) = cfg.grid;
    let sigma = cfg.blob_sigma_deg.to_radians();
    let centre = cfg.blob_centre(i);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let ll = pixel_center(r, c, w, h);
            let p = direction(ll);
            let mut v = background(ll) + blob(p, centre, sigma);
            if cfg.kind == SceneKind::TwoBlob {
                v += 0.6 * blob(p, cfg.distractor_centre(i), sigma);
            }
            data.push(v.min(1.0));
        }
    }
    Tensor::new(&[1, h, w], data)
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let frames = (0..cfg.frames).map(|i| render_frame(cfg, i)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut wander = [
        Ar1::new(cfg.wander_deg, cfg.wander_corr, &mut rng),
        Ar1::new(cfg.wander_deg, cfg.wander_corr, &mut rng),
    ];
    let crowd: Vec<(f64, f64)> = (0..cfg.frames)
        .map(|i| {
            let b = cfg.blob_centre(i);
            let (dx, dy) = (wander[0].next(&mut rng), wander[1].next(&mut rng));
            (b.lambda.to_degrees() + dx, b.psi.to_degrees() + 0.5 * dy)
        })
        .collect();
    let mut traces = Vec::with_capacity(cfg.population);
    for user in 0..cfg.population {
        let mut urng = ChaCha8Rng::seed_from_u64(cfg.seed);
        urng.set_stream(user as u64 + 1);
        let mut jitter = [
            Ar1::new(cfg.user_noise_deg, cfg.user_noise_corr, &mut urng),
            Ar1::new(cfg.user_noise_deg, cfg.user_noise_corr, &mut urng),
        ];
        let samples = crowd
            .iter()
            .enumerate()
            .map(|(i, &(lon, lat))| GazeSample {
                t: i as f64 / cfg.fps,
                orientation: latlon_to_euler(clamp_gaze(
                    lon + jitter[0].next(&mut urng),
                    lat + jitter[1].next(&mut urng),
                )),
            })
            .collect();
        traces.push(GazeTrace::new(user as u32, samples)?);
    }
    Ok(Scene {
        config: cfg.clone(),
        frames,
        traces,
        crowd: crowd.into_iter().map(|(lon, lat)| clamp_gaze(lon, lat)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{euler_to_latlon, latlon_to_pixel};

    fn small() -> SceneConfig {
        SceneConfig {
            frames: 40,
            grid: (32, 64),
            population: 6,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn frames_peak_at_the_blob() {
        let cfg = small();
        let scene = generate_scene(&cfg).unwrap();
        assert_eq!(scene.frames.len(), 40);
        for i in [0, 17, 39] {
            let f = &scene.frames[i];
            let (best, _) = f
                .data()
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            let (u, v) = latlon_to_pixel(cfg.blob_centre(i), 64, 32);
            assert!((best / 64).abs_diff(v) <= 1 && (best % 64).abs_diff(u) <= 1, "frame {i}");
        }
    }

    #[test]
    fn traces_round_trip_through_euler_angles() {
        let cfg = SceneConfig {
            user_noise_deg: 0.0,
            ..small()
        };
        let scene = generate_scene(&cfg).unwrap();
        for tr in &scene.traces {
            assert_eq!(tr.len(), 40);
            for (s, want) in tr.samples().iter().zip(&scene.crowd) {
                let got = euler_to_latlon(s.orientation).unwrap();
                assert!((got.lambda - want.lambda).abs() < 1e-9 && (got.psi - want.psi).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&small()).unwrap();
        let b = generate_scene(&small()).unwrap();
        assert_eq!(a.traces, b.traces);
        let c = generate_scene(&SceneConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a.traces, c.traces);
    }

    #[test]
    fn static_and_two_blob() {
        let cfg = SceneConfig {
            kind: SceneKind::Static,
            ..small()
        };
        assert_eq!(cfg.blob_centre(0), cfg.blob_centre(30));
        let two = SceneConfig {
            kind: SceneKind::TwoBlob,
            ..small()
        };
        let f = render_frame(&two, 0).unwrap();
        let (u, v) = latlon_to_pixel(two.distractor_centre(0), 64, 32);
        assert!(f.data()[v * 64 + u] > 0.5);
    }

    #[test]
    fn wander_statistics() {
        let cfg = SceneConfig {
            frames: 4000,
            grid: (8, 16),
            population: 0,
            drift_deg_per_frame: 0.0,
            lat_amplitude_deg: 0.0,
            start_lon_deg: 0.0,
            wander_deg: 5.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let xs: Vec<f64> = scene.crowd.iter().map(|p| p.lambda.to_degrees()).collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        assert!((var.sqrt() - 5.0).abs() < 1.0, "std {}", var.sqrt());
        let lag: f64 = xs.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((lag / var - 0.97).abs() < 0.03);
    }
}

//! Flat `key = value` configuration.
//!
//! One file configures a whole run: session keys are bare, scene keys carry
//! a `scene.` prefix and training keys a `train.` prefix. Blank lines and
//! lines starting with `#` are ignored. Later assignments win, which is how
//! command-line `--set key=value` overrides are applied.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evalkit::DEFAULT_TILES;
use crate::fusion::DEFAULT_REGIONS;
use crate::saliency::MotionMode;
use crate::trainer::TrainConfig;

use super::scene::{SceneConfig, SceneKind};

/// Prediction intervals (seconds) evaluated in the original experiments.
pub const STANDARD_INTERVALS: [f64; 5] = [0.03, 0.5, 1.0, 1.5, 2.0];

pub const DEFAULT_VIEW_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    /// Users watching the session.
    pub population: usize,
    /// Users whose gaze is fed back, `N`.
    pub feedback_users: usize,
    /// Uplink delay between feedback and prediction target, seconds.
    pub interval_s: f64,
    pub fps: f64,
    /// ERP grid `(V, U)`.
    pub grid: (usize, usize),
    pub tiles: (usize, usize),
    pub regions: (usize, usize),
    pub seed: u64,
    pub motion: MotionMode,
    /// Score predictions against every user instead of only the held-out
    /// ones.
    pub eval_feedback_users: bool,
    /// First frame index that may be scored. The default covers the
    /// longest standard interval, so every interval scores the same frames.
    pub warmup_frames: usize,
    /// A tile counts as viewed when its largest value exceeds this, for
    /// predictions and ground truth alike. Rectified network outputs leave a
    /// faint positive floor over most of the sphere that the bare nonzero
    /// rule ([`crate::evalkit::TILE_THRESHOLD`]) would count as viewed.
    pub view_threshold: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            population: 20,
            feedback_users: 5,
            interval_s: STANDARD_INTERVALS[0],
            fps: 30.0,
            grid: (64, 128),
            tiles: DEFAULT_TILES,
            regions: DEFAULT_REGIONS,
            seed: 0,
            motion: MotionMode::StackedFrames,
            eval_feedback_users: false,
            warmup_frames: 64,
            view_threshold: DEFAULT_VIEW_THRESHOLD,
        }
    }
}

impl SessionConfig {
    /// Interval expressed in frames, `round(interval * fps)`, at least one.
    pub fn offset_frames(&self) -> usize {
        ((self.interval_s * self.fps).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feedback_users > self.population {
            return Err(Error::domain(format!(
                "{} feedback users out of a population of {}",
                self.feedback_users, self.population
            )));
        }
        if !(self.interval_s > 0.0) || !(self.fps > 0.0) {
            return Err(Error::Config("interval and fps must be positive".into()));
        }
        let (h, w) = self.grid;
        if h == 0 || w == 0 || self.tiles.0 == 0 || self.tiles.1 == 0 || self.regions.0 == 0 || self.regions.1 == 0 {
            return Err(Error::Config("grid, tiles and regions must be nonzero".into()));
        }
        if self.tiles.0 > h || self.tiles.1 > w {
            return Err(Error::Config(format!("{:?} tiles do not fit a {h}x{w} grid", self.tiles)));
        }
        Ok(())
    }
}

/// Everything a verb needs: session, scene and training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub session: SessionConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub saliency_steps: usize,
    pub fov_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            session: SessionConfig::default(),
            scene: SceneConfig::default(),
            train: TrainConfig::desk(),
            saliency_steps: 600,
            fov_steps: 300,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}"))),
    }
}

pub fn motion_name(m: MotionMode) -> &'static str {
    match m {
        MotionMode::StackedFrames => "frames",
        MotionMode::Flow => "flow",
    }
}

fn parse_motion(key: &str, value: &str) -> Result<MotionMode> {
    match value {
        "frames" => Ok(MotionMode::StackedFrames),
        "flow" => Ok(MotionMode::Flow),
        _ => Err(Error::Config(format!("bad value {value:?} for {key} (frames|flow)"))),
    }
}

/// Splits `key = value` lines. Returns `(line number, key, value)`.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies a single assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.session;
        let sc = &mut self.scene;
        let t = &mut self.train;
        match key {
            "population" => s.population = parse(key, value)?,
            "feedback_users" => s.feedback_users = parse(key, value)?,
            "interval_s" => s.interval_s = parse(key, value)?,
            "fps" => s.fps = parse(key, value)?,
            "grid_height" => s.grid.0 = parse(key, value)?,
            "grid_width" => s.grid.1 = parse(key, value)?,
            "tile_rows" => s.tiles.0 = parse(key, value)?,
            "tile_cols" => s.tiles.1 = parse(key, value)?,
            "region_rows" => s.regions.0 = parse(key, value)?,
            "region_cols" => s.regions.1 = parse(key, value)?,
            "seed" => s.seed = parse(key, value)?,
            "motion" => s.motion = parse_motion(key, value)?,
            "eval_feedback_users" => s.eval_feedback_users = parse_bool(key, value)?,
            "warmup_frames" => s.warmup_frames = parse(key, value)?,
            "view_threshold" => s.view_threshold = parse(key, value)?,
            "scene.kind" => sc.kind = value.parse()?,
            "scene.frames" => sc.frames = parse(key, value)?,
            "scene.blob_sigma_deg" => sc.blob_sigma_deg = parse(key, value)?,
            "scene.start_lon_deg" => sc.start_lon_deg = parse(key, value)?,
            "scene.drift_deg_per_frame" => sc.drift_deg_per_frame = parse(key, value)?,
            "scene.lat_amplitude_deg" => sc.lat_amplitude_deg = parse(key, value)?,
            "scene.lat_period_frames" => sc.lat_period_frames = parse(key, value)?,
            "scene.wander_deg" => sc.wander_deg = parse(key, value)?,
            "scene.wander_corr" => sc.wander_corr = parse(key, value)?,
            "scene.user_noise_deg" => sc.user_noise_deg = parse(key, value)?,
            "scene.user_noise_corr" => sc.user_noise_corr = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.seq_len" => t.seq_len = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.saliency_steps" => self.saliency_steps = parse(key, value)?,
            "train.fov_steps" => self.fov_steps = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, k, v) in parse_lines(text)? {
            cfg.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(cfg)
    }

    /// Defaults, then `path` if given, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_text(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.session.validate()?;
        self.scene.validate()?;
        self.train.validate()
    }

    /// Every key with its current value, in a fixed order. Parsing the
    /// output reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.session;
        let sc = &self.scene;
        let t = &self.train;
        vec![
            ("population", s.population.to_string()),
            ("feedback_users", s.feedback_users.to_string()),
            ("interval_s", s.interval_s.to_string()),
            ("fps", s.fps.to_string()),
            ("grid_height", s.grid.0.to_string()),
            ("grid_width", s.grid.1.to_string()),
            ("tile_rows", s.tiles.0.to_string()),
            ("tile_cols", s.tiles.1.to_string()),
            ("region_rows", s.regions.0.to_string()),
            ("region_cols", s.regions.1.to_string()),
            ("seed", s.seed.to_string()),
            ("motion", motion_name(s.motion).to_string()),
            ("eval_feedback_users", s.eval_feedback_users.to_string()),
            ("warmup_frames", s.warmup_frames.to_string()),
            ("view_threshold", s.view_threshold.to_string()),
            ("scene.kind", sc.kind.to_string()),
            ("scene.frames", sc.frames.to_string()),
            ("scene.blob_sigma_deg", sc.blob_sigma_deg.to_string()),
            ("scene.start_lon_deg", sc.start_lon_deg.to_string()),
            ("scene.drift_deg_per_frame", sc.drift_deg_per_frame.to_string()),
            ("scene.lat_amplitude_deg", sc.lat_amplitude_deg.to_string()),
            ("scene.lat_period_frames", sc.lat_period_frames.to_string()),
            ("scene.wander_deg", sc.wander_deg.to_string()),
            ("scene.wander_corr", sc.wander_corr.to_string()),
            ("scene.user_noise_deg", sc.user_noise_deg.to_string()),
            ("scene.user_noise_corr", sc.user_noise_corr.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.seq_len", t.seq_len.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.saliency_steps", self.saliency_steps.to_string()),
            ("train.fov_steps", self.fov_steps.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Scene parameters with the session's grid, population and fps.
    pub fn scene_for_session(&self) -> SceneConfig {
        SceneConfig {
            grid: self.session.grid,
            population: self.session.population,
            fps: self.session.fps,
            seed: self.session.seed,
            ..self.scene.clone()
        }
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drifting-blob" => Ok(SceneKind::DriftingBlob),
            "two-blob" => Ok(SceneKind::TwoBlob),
            "static" => Ok(SceneKind::Static),
            _ => Err(Error::Config(format!(
                "unknown scene {s:?} (drifting-blob|two-blob|static)"
            ))),
        }
    }
}

//! Multicast feedback simulation.
//!
//! At every scored frame `p` the server has gaze feedback from `N` selected
//! users up to time `t = p - offset`. It runs the FoV network over the last
//! few aggregated feedback heatmaps, the saliency network over frame `p`,
//! fuses the two and scores the result against the users that sent no
//! feedback.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalkit::{
    auc_judd, cc, fixation_pixel, nss, tile_set_metrics, weighted_mse, Fixation, TileGrid,
};
use crate::fovgru::{aggregate_user_fovs, Aggregation, FovConfig, FovNet};
use crate::fusion::fuse;
use crate::numerics::Tensor;
use crate::par;
use crate::params::ParamStore;
use crate::saliency::{motion_input, MotionMode, SaliencyConfig, SaliencyNet};
use crate::sphere::{euler_to_latlon, gaussian_fov_heatmap, ErpMap, FovRect, LatLon};
use crate::trainer::{train_fov, train_saliency, FovSample, SaliencySample, StepLog, TrainConfig};

use super::config::{RunConfig, SessionConfig};
use super::io::{FrameManifest, MetricRecord};
use super::scene::Scene;
use super::traces::GazeTrace;

/// Frames, their timestamps and the population's gaze.
#[derive(Clone, Debug)]
pub struct SessionData {
    /// `[C, V, U]` each.
    pub frames: Vec<Tensor>,
    pub times: Vec<f64>,
    pub traces: Vec<GazeTrace>,
    pub fps: f64,
}

impl SessionData {
    pub fn from_scene(scene: Scene) -> Self {
        let fps = scene.config.fps;
        SessionData {
            times: (0..scene.frames.len()).map(|i| i as f64 / fps).collect(),
            frames: scene.frames,
            traces: scene.traces,
            fps,
        }
    }

    pub fn from_files(manifest: &FrameManifest, traces: Vec<GazeTrace>) -> Result<Self> {
        let frames = manifest.read_frames()?;
        if let Some(f) = frames.first() {
            if frames.iter().any(|g| g.shape() != f.shape()) {
                return Err(Error::domain("frames differ in size"));
            }
        }
        Ok(SessionData {
            frames,
            times: manifest.frames.iter().map(|f| f.timestamp_s).collect(),
            traces,
            fps: manifest.fps,
        })
    }

    /// `(channels, V, U)` of the frames.
    pub fn frame_dims(&self) -> Result<(usize, usize, usize)> {
        self.frames
            .first()
            .ok_or_else(|| Error::domain("session has no frames"))?
            .chw()
    }
}

/// The saliency and FoV networks sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Models {
    pub saliency: SaliencyNet,
    pub fov: FovNet,
    pub store: ParamStore,
}

impl Models {
    /// Desk-scale networks for `grid` without parameters.
    pub fn architecture(grid: (usize, usize), frame_channels: usize, motion: MotionMode) -> Result<(SaliencyNet, FovNet)> {
        let saliency = SaliencyNet::new(SaliencyConfig {
            frame_channels,
            motion,
            ..SaliencyConfig::desk(grid)
        })?;
        let fov = FovNet::new(FovConfig::desk(grid))?;
        Ok((saliency, fov))
    }

    pub fn init(grid: (usize, usize), frame_channels: usize, motion: MotionMode, seed: u64) -> Result<Self> {
        let (saliency, fov) = Self::architecture(grid, frame_channels, motion)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        saliency.init(&mut store, &mut rng)?;
        fov.init(&mut store, &mut rng)?;
        Ok(Models { saliency, fov, store })
    }

    /// Attaches a loaded checkpoint, checking that it holds every parameter
    /// the architecture needs with the right shape.
    pub fn with_store(grid: (usize, usize), frame_channels: usize, motion: MotionMode, store: ParamStore) -> Result<Self> {
        let reference = Self::init(grid, frame_channels, motion, 0)?;
        for (name, p) in reference.store.params() {
            let got = store
                .get(name)
                .map_err(|_| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if got.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Models { store, ..reference })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.saliency.config.grid
    }

    /// `P_s` for frame `i` (needs frame `i - 1` for motion).
    pub fn saliency_map(&self, frames: &[Tensor], i: usize) -> Result<ErpMap> {
        if i == 0 || i >= frames.len() {
            return Err(Error::domain(format!("saliency needs frames {} and {i}", i as i64 - 1)));
        }
        let motion = motion_input(&frames[i - 1], &frames[i], self.saliency.config.motion)?;
        self.saliency.predict(&self.store, &frames[i], &motion)
    }
}

/// Viewport heatmap of `trace` at the latest sample not after `t`.
pub fn user_heatmap(trace: &GazeTrace, t: f64, grid: (usize, usize)) -> Result<(ErpMap, LatLon)> {
    let s = trace
        .at_or_before(t)
        .ok_or_else(|| Error::domain(format!("user {} has no gaze sample before t = {t}", trace.user)))?;
    let gaze = euler_to_latlon(s.orientation)?;
    Ok((gaze_heatmap(gaze, grid)?, gaze))
}

pub fn gaze_heatmap(gaze: LatLon, grid: (usize, usize)) -> Result<ErpMap> {
    gaussian_fov_heatmap(&FovRect::new(gaze), grid.0, grid.1)
}

/// Elementwise maximum of the users' viewport heatmaps: the region anyone
/// looked at.
pub fn union_heatmap(traces: &[&GazeTrace], t: f64, grid: (usize, usize)) -> Result<(ErpMap, Vec<LatLon>)> {
    let mut out = ErpMap::zeros(grid.0, grid.1)?;
    let mut gazes = Vec::with_capacity(traces.len());
    for tr in traces {
        let (m, g) = user_heatmap(tr, t, grid)?;
        out = out.max_with(&m)?;
        gazes.push(g);
    }
    Ok((out, gazes))
}

/// Read access to the feedback users' gaze that refuses anything recorded
/// after `cutoff`.
pub struct FeedbackWindow<'a> {
    traces: Vec<&'a GazeTrace>,
    cutoff: f64,
}

impl<'a> FeedbackWindow<'a> {
    pub fn new(traces: Vec<&'a GazeTrace>, cutoff: f64) -> Self {
        FeedbackWindow { traces, cutoff }
    }

    /// Mean of the feedback heatmaps at time `t <= cutoff`.
    pub fn aggregate(&self, t: f64, grid: (usize, usize)) -> Result<ErpMap> {
        if t > self.cutoff {
            return Err(Error::domain(format!(
                "feedback at t = {t} requested with cutoff {}",
                self.cutoff
            )));
        }
        let mut maps = Vec::with_capacity(self.traces.len());
        for tr in &self.traces {
            let s = tr
                .at_or_before(t)
                .ok_or_else(|| Error::domain(format!("user {} has no gaze sample before t = {t}", tr.user)))?;
            assert!(s.t <= self.cutoff, "gaze sample at {} read past the feedback cutoff {}", s.t, self.cutoff);
            maps.push(gaze_heatmap(euler_to_latlon(s.orientation)?, grid)?);
        }
        aggregate_user_fovs(&maps, grid, Aggregation::Mean)
    }
}

/// Seeded choice of `n` distinct users out of `population`, ascending.
pub fn select_feedback_users(population: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > population {
        return Err(Error::domain(format!("{n} feedback users out of a population of {population}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xfeed);
    let mut users = sample(&mut rng, population, n).into_vec();
    users.sort_unstable();
    Ok(users)
}

/// Frames that can be scored with `history` feedback steps at `offset`.
pub fn scored_frames(cfg: &SessionConfig, history: usize, offset: usize, frames: usize) -> std::ops::Range<usize> {
    let start = cfg.warmup_frames.max(history.saturating_sub(1) + offset).max(1);
    start.min(frames)..frames
}

#[derive(Clone, Debug)]
pub struct SimulationOutput {
    pub feedback_users: Vec<usize>,
    pub eval_users: Vec<usize>,
    pub records: Vec<MetricRecord>,
    /// Latest feedback timestamp used for each record.
    pub feedback_times: Vec<f64>,
    /// Fused prediction for each record.
    pub predictions: Vec<ErpMap>,
}

/// Saliency maps for every frame (`None` for frame 0).
pub fn saliency_maps(models: &Models, frames: &[Tensor]) -> Result<Vec<Option<ErpMap>>> {
    par::map_indexed(frames.len(), |i| {
        if i == 0 {
            Ok(None)
        } else {
            models.saliency_map(frames, i).map(Some)
        }
    })
    .into_iter()
    .collect()
}

fn or_nan(r: Result<f64>) -> Result<f64> {
    match r {
        Ok(v) => Ok(v),
        Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Runs one session. `saliency` may hold precomputed maps from
/// [`saliency_maps`]; frames whose map is missing are computed on demand.
/// `history` is the number of feedback steps fed to the FoV network.
pub fn simulate_session(
    data: &SessionData,
    models: &Models,
    cfg: &SessionConfig,
    history: usize,
    saliency: Option<&[Option<ErpMap>]>,
) -> Result<SimulationOutput> {
    cfg.validate()?;
    let grid = models.grid();
    let (_, h, w) = data.frame_dims()?;
    if (h, w) != grid {
        return Err(Error::domain(format!("frames are {h}x{w} but the models expect {grid:?}")));
    }
    if history == 0 {
        return Err(Error::domain("history must be at least one step"));
    }
    let population = data.traces.len();
    let feedback = select_feedback_users(population, cfg.feedback_users, cfg.seed)?;
    let eval: Vec<usize> = (0..population)
        .filter(|u| cfg.eval_feedback_users || feedback.binary_search(u).is_err())
        .collect();
    if eval.is_empty() {
        return Err(Error::Config(
            "every user sends feedback; set eval_feedback_users = true to score against them".into(),
        ));
    }
    let offset = cfg.offset_frames();
    let frames = scored_frames(cfg, history, offset, data.frames.len());
    let fb_traces: Vec<&GazeTrace> = feedback.iter().map(|&u| &data.traces[u]).collect();
    let eval_traces: Vec<&GazeTrace> = eval.iter().map(|&u| &data.traces[u]).collect();
    let tiles = TileGrid {
        rows: cfg.tiles.0,
        cols: cfg.tiles.1,
        threshold: cfg.view_threshold,
    };
    let frame_list: Vec<usize> = frames.collect();
    let results = par::map_indexed(frame_list.len(), |k| -> Result<(MetricRecord, f64, ErpMap)> {
        let p = frame_list[k];
        let t = p - offset;
        let p_s = match saliency.and_then(|s| s.get(p)).and_then(Option::as_ref) {
            Some(m) => m.clone(),
            None => models.saliency_map(&data.frames, p)?,
        };
        let cutoff = data.times[t];
        let prediction = if fb_traces.is_empty() {
            p_s
        } else {
            let window = FeedbackWindow::new(fb_traces.clone(), cutoff);
            let seq = (t + 1 - history..=t)
                .map(|j| window.aggregate(data.times[j], grid))
                .collect::<Result<Vec<_>>>()?;
            let p_v = models.fov.predict_fov(&models.store, &seq)?;
            fuse(&p_s, &p_v, cfg.regions)?
        };
        let (gt, gazes) = union_heatmap(&eval_traces, data.times[p], grid)?;
        let fixations: Vec<Fixation> = gazes.iter().map(|&g| fixation_pixel(g, grid.0, grid.1)).collect();
        let scores = tile_set_metrics(&tiles.viewed(&prediction)?, &tiles.viewed(&gt)?);
        let (accuracy, precision, recall) = match scores {
            Ok(s) => (s.accuracy, s.precision, s.recall),
            Err(Error::UndefinedMetric(_)) => (f64::NAN, f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        let record = MetricRecord {
            frame: p,
            timestamp_s: data.times[p],
            interval_s: cfg.interval_s,
            offset_frames: offset,
            feedback_users: feedback.len(),
            accuracy,
            precision,
            recall,
            nss: or_nan(nss(&prediction, &fixations))?,
            cc: or_nan(cc(&prediction, &gt))?,
            auc: or_nan(auc_judd(&prediction, &fixations))?,
            loss: weighted_mse(&prediction, &gt)?,
        };
        Ok((record, cutoff, prediction))
    });
    let mut out = SimulationOutput {
        feedback_users: feedback,
        eval_users: eval,
        records: Vec::with_capacity(results.len()),
        feedback_times: Vec::with_capacity(results.len()),
        predictions: Vec::with_capacity(results.len()),
    };
    for r in results {
        let (rec, fb_time, pred) = r?;
        out.records.push(rec);
        out.feedback_times.push(fb_time);
        out.predictions.push(pred);
    }
    Ok(out)
}

/// Mean of the finite accuracies.
pub fn mean_accuracy(records: &[MetricRecord]) -> f64 {
    let vals: Vec<f64> = records.iter().map(|r| r.accuracy).filter(|v| v.is_finite()).collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub saliency: Vec<StepLog>,
    pub fov: Vec<StepLog>,
}

/// Saliency examples: every frame after the first with the union of all
/// viewports as target.
pub fn saliency_samples(data: &SessionData, motion: MotionMode, grid: (usize, usize)) -> Result<Vec<SaliencySample>> {
    let everyone: Vec<&GazeTrace> = data.traces.iter().collect();
    par::map_indexed(data.frames.len() - 1, |k| {
        let i = k + 1;
        let (target, _) = union_heatmap(&everyone, data.times[i], grid)?;
        Ok(SaliencySample {
            frame: data.frames[i].clone(),
            motion: motion_input(&data.frames[i - 1], &data.frames[i], motion)?,
            target: target.to_tensor(),
        })
    })
    .into_iter()
    .collect()
}

/// FoV examples: a random subset of `1..=max_feedback` users provides
/// `history` steps of feedback, and each step is trained towards the union
/// of the remaining users' viewports `offset` frames later.
pub fn fov_samples(
    data: &SessionData,
    grid: (usize, usize),
    history: usize,
    offset: usize,
    max_feedback: usize,
    seed: u64,
) -> Result<Vec<FovSample>> {
    let population = data.traces.len();
    if population < 2 {
        return Err(Error::domain("FoV training needs at least two users"));
    }
    let max_feedback = max_feedback.clamp(1, population - 1);
    let first = history - 1;
    let last = data.frames.len().saturating_sub(offset);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xf0f);
    let picks: Vec<Vec<usize>> = (first..last)
        .map(|_| {
            let n = rng.gen_range(1..=max_feedback);
            let mut users = sample(&mut rng, population, n).into_vec();
            users.sort_unstable();
            users
        })
        .collect();
    par::map_indexed(picks.len(), |k| {
        let t = first + k;
        let users = &picks[k];
        let fb: Vec<&GazeTrace> = users.iter().map(|&u| &data.traces[u]).collect();
        let rest: Vec<&GazeTrace> = (0..population)
            .filter(|u| users.binary_search(u).is_err())
            .map(|u| &data.traces[u])
            .collect();
        let window = FeedbackWindow::new(fb, data.times[t]);
        let mut inputs = Vec::with_capacity(history);
        let mut targets = Vec::with_capacity(history);
        for j in t + 1 - history..=t {
            inputs.push(window.aggregate(data.times[j], grid)?.to_tensor());
            targets.push(union_heatmap(&rest, data.times[j + offset], grid)?.0.to_tensor());
        }
        Ok(FovSample { inputs, targets })
    })
    .into_iter()
    .collect()
}

/// Trains both networks on `data` with the run's optimizer settings.
pub fn toy_train(models: &mut Models, data: &SessionData, cfg: &RunConfig) -> Result<TrainingReport> {
    let grid = models.grid();
    let history = cfg.train.seq_len;
    let sal = saliency_samples(data, models.saliency.config.motion, grid)?;
    let sal_cfg = TrainConfig {
        max_steps: cfg.saliency_steps,
        ..cfg.train.clone()
    };
    let saliency = train_saliency(&models.saliency, &mut models.store, &sal, &sal_cfg)?;
    let fov_data = fov_samples(
        data,
        grid,
        history,
        cfg.session.offset_frames(),
        cfg.session.feedback_users,
        cfg.train.seed,
    )?;
    let fov_cfg = TrainConfig {
        max_steps: cfg.fov_steps,
        ..cfg.train.clone()
    };
    let fov = train_fov(&models.fov, &mut models.store, &fov_data, &fov_cfg)?;
    Ok(TrainingReport { saliency, fov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{generate_scene, SceneConfig};

    fn tiny_data(population: usize) -> SessionData {
        SessionData::from_scene(
            generate_scene(&SceneConfig {
                frames: 12,
                grid: (32, 64),
                population,
                ..SceneConfig::default()
            })
            .unwrap(),
        )
    }

    fn tiny_cfg(n: usize) -> SessionConfig {
        SessionConfig {
            population: 6,
            feedback_users: n,
            grid: (32, 64),
            warmup_frames: 0,
            ..SessionConfig::default()
        }
    }

    #[test]
    fn selection_is_seeded_and_distinct() {
        let a = select_feedback_users(20, 5, 3).unwrap();
        assert_eq!(a, select_feedback_users(20, 5, 3).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_feedback_users(4, 4, 0).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(select_feedback_users(4, 5, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn window_refuses_future() {
        let data = tiny_data(3);
        let w = FeedbackWindow::new(data.traces.iter().collect(), data.times[4]);
        assert!(w.aggregate(data.times[4], (32, 64)).is_ok());
        assert!(w.aggregate(data.times[5], (32, 64)).is_err());
    }

    #[test]
    fn session_respects_feedback_time() {
        let data = tiny_data(6);
        let models = Models::init((32, 64), 1, MotionMode::StackedFrames, 1).unwrap();
        let mut cfg = tiny_cfg(2);
        cfg.interval_s = 0.1; // three frames
        let out = simulate_session(&data, &models, &cfg, 3, None).unwrap();
        assert_eq!(out.records.first().unwrap().frame, 5);
        assert_eq!(out.records.len(), 7);
        for (r, &fb) in out.records.iter().zip(&out.feedback_times) {
            assert_eq!(r.offset_frames, 3);
            assert!(fb <= data.times[r.frame - 3] + 1e-12);
        }
        assert_eq!(out.eval_users.len(), 4);
        assert!(out.eval_users.iter().all(|u| !out.feedback_users.contains(u)));
    }

    #[test]
    fn zero_feedback_is_saliency_only() {
        let data = tiny_data(6);
        let models = Models::init((32, 64), 1, MotionMode::StackedFrames, 1).unwrap();
        let out = simulate_session(&data, &models, &tiny_cfg(0), 3, None).unwrap();
        for (r, p) in out.records.iter().zip(&out.predictions) {
            assert_eq!(r.feedback_users, 0);
            assert_eq!(p, &models.saliency_map(&data.frames, r.frame).unwrap());
        }
    }

    #[test]
    fn full_feedback_needs_inclusive_evaluation() {
        let data = tiny_data(6);
        let models = Models::init((32, 64), 1, MotionMode::StackedFrames, 1).unwrap();
        let mut cfg = tiny_cfg(6);
        assert!(matches!(simulate_session(&data, &models, &cfg, 3, None), Err(Error::Config(_))));
        cfg.eval_feedback_users = true;
        let out = simulate_session(&data, &models, &cfg, 3, None).unwrap();
        assert_eq!(out.feedback_users, (0..6).collect::<Vec<_>>());
        assert_eq!(out.eval_users, out.feedback_users);
        cfg.feedback_users = 7;
        assert!(matches!(simulate_session(&data, &models, &cfg, 3, None), Err(Error::Domain(_))));
    }

    #[test]
    fn precomputed_saliency_matches() {
        let data = tiny_data(6);
        let models = Models::init((32, 64), 1, MotionMode::StackedFrames, 2).unwrap();
        let cached = saliency_maps(&models, &data.frames).unwrap();
        let a = simulate_session(&data, &models, &tiny_cfg(2), 3, Some(&cached)).unwrap();
        let b = simulate_session(&data, &models, &tiny_cfg(2), 3, None).unwrap();
        assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn training_sets_have_the_right_shapes() {
        let data = tiny_data(6);
        let sal = saliency_samples(&data, MotionMode::StackedFrames, (32, 64)).unwrap();
        assert_eq!(sal.len(), 11);
        assert_eq!(sal[0].motion.shape(), &[2, 32, 64]);
        let fov = fov_samples(&data, (32, 64), 3, 2, 5, 0).unwrap();
        assert_eq!(fov.len(), 12 - 2 - 2);
        assert!(fov.iter().all(|s| s.inputs.len() == 3 && s.targets.len() == 3));
    }

    #[test]
    fn checkpoint_attachment_checks_shapes() {
        let m = Models::init((32, 64), 1, MotionMode::StackedFrames, 0).unwrap();
        assert!(Models::with_store((32, 64), 1, MotionMode::StackedFrames, m.store.clone()).is_ok());
        assert!(Models::with_store((32, 64), 3, MotionMode::StackedFrames, m.store.clone()).is_err());
        assert!(Models::with_store((32, 64), 1, MotionMode::StackedFrames, ParamStore::new()).is_err());
    }
}

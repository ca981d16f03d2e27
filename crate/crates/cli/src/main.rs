use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sphview::evalkit::{auc_judd, cc, nss, tile_set_metrics, weighted_mse, Fixation, TileGrid};
use sphview::fusion::fuse;
use sphview::harness::io::{read_raw, save_metrics, write_pgm, write_raw, FrameManifest, MetricRecord, RunManifest};
use sphview::harness::simulate::{
    mean_accuracy, saliency_maps, scored_frames, select_feedback_users, FeedbackWindow,
};
use sphview::harness::{generate_scene, ingest_traces, simulate_session, toy_train, Models, RunConfig, SessionData};
use sphview::sphere::ErpMap;
use sphview::trainer::{gradcheck_suite, load_checkpoint, save_checkpoint, StepLog};
use sphview::Error;

#[derive(Parser)]
#[command(name = "sphview", version, about = "Spherical saliency and viewport prediction for 360-degree video")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Source {
    /// Frame manifest (`index,timestamp_s,image_path` lines). Without it the
    /// synthetic scene from the configuration is used.
    #[arg(long, requires = "traces")]
    frames: Option<PathBuf>,
    /// Gaze trace CSV matching `--frames`.
    #[arg(long, requires = "frames")]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Trained checkpoint; without it freshly initialised networks are used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Saliency maps for selected frames.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        model: ModelArgs,
        /// Frame index. Repeatable; default every frame after the first.
        #[arg(long = "frame")]
        frame: Vec<usize>,
    },
    /// FoV predictions from the feedback users' gaze.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        model: ModelArgs,
        /// Target frame index. Repeatable; default every scored frame.
        #[arg(long = "frame")]
        frame: Vec<usize>,
    },
    /// Fuses a saliency map and a FoV map stored in raw format.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        saliency: PathBuf,
        #[arg(long)]
        fov: PathBuf,
    },
    /// Trains the saliency network, then the FoV network.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Full multicast feedback session with per-frame metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        model: ModelArgs,
        /// Also write every fused prediction.
        #[arg(long)]
        save_maps: bool,
    },
    /// Scores raw predictions against raw ground truth with matching names.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of predicted `.raw` heatmaps.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth `.raw` heatmaps.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(verb: &str, common: &Common) -> Result<Self> {
        let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        let mut manifest = RunManifest::new(verb);
        manifest.push("seed", cfg.session.seed.to_string());
        manifest.push_config(&cfg.entries());
        if let Some(p) = &common.config {
            manifest.push_file("input.config", p)?;
        }
        Ok(Run {
            cfg,
            out: common.out.clone(),
            manifest,
        })
    }

    fn data(&mut self, source: &Source) -> Result<SessionData> {
        let data = match (&source.frames, &source.traces) {
            (Some(f), Some(t)) => {
                self.manifest.push_file("input.frames", f)?;
                self.manifest.push_file("input.traces", t)?;
                let manifest = FrameManifest::load(f)?;
                SessionData::from_files(&manifest, ingest_traces(t)?)?
            }
            _ => {
                self.manifest.push("input.scene", self.cfg.scene.kind.to_string());
                SessionData::from_scene(generate_scene(&self.cfg.scene_for_session())?)
            }
        };
        let (_, h, w) = data.frame_dims()?;
        if (h, w) != self.cfg.session.grid {
            bail!(
                "frames are {h}x{w} but the configured grid is {}x{}",
                self.cfg.session.grid.0,
                self.cfg.session.grid.1
            );
        }
        if data.traces.len() != self.cfg.session.population {
            bail!(
                "traces hold {} users but population = {}",
                data.traces.len(),
                self.cfg.session.population
            );
        }
        Ok(data)
    }

    fn models(&mut self, data: &SessionData, model: &ModelArgs) -> Result<Models> {
        let (c, _, _) = data.frame_dims()?;
        let s = &self.cfg.session;
        match &model.checkpoint {
            Some(p) => {
                self.manifest.push_file("checkpoint", p)?;
                Ok(Models::with_store(s.grid, c, s.motion, load_checkpoint(p)?)?)
            }
            None => {
                self.manifest.push("checkpoint", "none");
                Ok(Models::init(s.grid, c, s.motion, self.cfg.train.seed)?)
            }
        }
    }

    fn write_map(&mut self, stem: &str, map: &ErpMap) -> Result<()> {
        let raw = self.out.join(format!("{stem}.raw"));
        let pgm = self.out.join(format!("{stem}.pgm"));
        write_raw(&raw, map)?;
        write_pgm(&pgm, map)?;
        self.manifest.push_file("output", &raw)?;
        self.manifest.push_file("output", &pgm)?;
        Ok(())
    }

    fn write_metrics(&mut self, records: &[MetricRecord]) -> Result<()> {
        let path = self.out.join("metrics.csv");
        save_metrics(&path, records)?;
        self.manifest.push_file("output", &path)?;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        self.manifest.save(&self.out.join("manifest.txt"))?;
        Ok(())
    }
}

fn frame_list(requested: &[usize], default: impl Iterator<Item = usize>, len: usize) -> Result<Vec<usize>> {
    let frames: Vec<usize> = if requested.is_empty() {
        default.collect()
    } else {
        requested.to_vec()
    };
    if let Some(&f) = frames.iter().find(|&&f| f >= len) {
        bail!("frame {f} out of range (session has {len} frames)");
    }
    Ok(frames)
}

fn saliency(common: &Common, source: &Source, model: &ModelArgs, frame: &[usize]) -> Result<()> {
    let mut run = Run::start("saliency", common)?;
    let data = run.data(source)?;
    let models = run.models(&data, model)?;
    let frames = frame_list(frame, 1..data.frames.len(), data.frames.len())?;
    for f in frames {
        let map = models.saliency_map(&data.frames, f)?;
        run.write_map(&format!("saliency_{f:04}"), &map)?;
    }
    run.finish()
}

fn predict(common: &Common, source: &Source, model: &ModelArgs, frame: &[usize]) -> Result<()> {
    let mut run = Run::start("predict", common)?;
    let data = run.data(source)?;
    let models = run.models(&data, model)?;
    let s = run.cfg.session.clone();
    if s.feedback_users == 0 {
        bail!("predict needs feedback_users >= 1");
    }
    let history = run.cfg.train.seq_len;
    let offset = s.offset_frames();
    let users = select_feedback_users(s.population, s.feedback_users, s.seed)?;
    run.manifest.push("feedback_users", format!("{users:?}"));
    let frames = frame_list(frame, scored_frames(&s, history, offset, data.frames.len()), data.frames.len())?;
    let fb: Vec<_> = users.iter().map(|&u| &data.traces[u]).collect();
    for p in frames {
        if p + 1 < history + offset {
            bail!("frame {p} has too little feedback history for offset {offset}");
        }
        let t = p - offset;
        let window = FeedbackWindow::new(fb.clone(), data.times[t]);
        let seq = (t + 1 - history..=t)
            .map(|j| window.aggregate(data.times[j], s.grid))
            .collect::<sphview::Result<Vec<_>>>()?;
        let map = models.fov.predict_fov(&models.store, &seq)?;
        run.write_map(&format!("fov_{p:04}"), &map)?;
    }
    run.finish()
}

fn fuse_maps(common: &Common, saliency: &Path, fov: &Path) -> Result<()> {
    let mut run = Run::start("fuse", common)?;
    run.manifest.push_file("input.saliency", saliency)?;
    run.manifest.push_file("input.fov", fov)?;
    let s = read_raw(saliency)?;
    let v = read_raw(fov)?;
    let fused = fuse(&s, &v, run.cfg.session.regions)?;
    run.write_map("fused", &fused)?;
    run.finish()
}

fn write_log(path: &Path, rows: &[(&str, &[StepLog])]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["net", "step", "loss", "lr"])?;
    for (net, logs) in rows {
        for l in *logs {
            w.write_record([net.to_string(), l.step.to_string(), l.loss.to_string(), l.lr.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn train(common: &Common, source: &Source) -> Result<()> {
    let mut run = Run::start("train", common)?;
    let data = run.data(source)?;
    let mut models = run.models(&data, &ModelArgs { checkpoint: None })?;
    let report = toy_train(&mut models, &data, &run.cfg)?;
    let ckpt = run.out.join("checkpoint.bin");
    save_checkpoint(&models.store, &ckpt)?;
    run.manifest.push_file("output.checkpoint", &ckpt)?;
    let log = run.out.join("train_log.csv");
    write_log(&log, &[("saliency", &report.saliency), ("fov", &report.fov)])?;
    run.manifest.push_file("output", &log)?;
    let last = |l: &[StepLog]| l.last().map_or(f64::NAN, |s| s.loss);
    println!(
        "saliency: {} steps, final loss {:.6}",
        report.saliency.len(),
        last(&report.saliency)
    );
    println!("fov: {} steps, final loss {:.6}", report.fov.len(), last(&report.fov));
    run.finish()
}

fn simulate(common: &Common, source: &Source, model: &ModelArgs, save_maps: bool) -> Result<()> {
    let mut run = Run::start("simulate", common)?;
    let data = run.data(source)?;
    let models = run.models(&data, model)?;
    let sal = saliency_maps(&models, &data.frames)?;
    let out = simulate_session(&data, &models, &run.cfg.session, run.cfg.train.seq_len, Some(&sal))?;
    run.manifest.push("feedback_users", format!("{:?}", out.feedback_users));
    run.manifest.push("eval_users", format!("{:?}", out.eval_users));
    if save_maps {
        for (r, map) in out.records.iter().zip(&out.predictions) {
            run.write_map(&format!("fused_{:04}", r.frame), map)?;
        }
    }
    run.write_metrics(&out.records)?;
    println!(
        "{} frames, mean accuracy {:.4}",
        out.records.len(),
        mean_accuracy(&out.records)
    );
    run.finish()
}

fn raw_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "raw") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Frame number from the trailing digits of a file stem.
fn frame_number(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits = stem.len() - stem.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    stem[stem.len() - digits..].parse().ok()
}

fn or_nan(r: sphview::Result<f64>) -> Result<f64> {
    match r {
        Ok(v) => Ok(v),
        Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
        Err(e) => Err(e.into()),
    }
}

fn eval(common: &Common, pred: &Path, gt: &Path) -> Result<()> {
    let mut run = Run::start("eval", common)?;
    let s = run.cfg.session.clone();
    let tiles = TileGrid {
        rows: s.tiles.0,
        cols: s.tiles.1,
        threshold: s.view_threshold,
    };
    let files = raw_files(pred)?;
    if files.is_empty() {
        bail!("no .raw heatmaps in {}", pred.display());
    }
    let mut records = Vec::with_capacity(files.len());
    for (i, p_path) in files.iter().enumerate() {
        let g_path = gt.join(p_path.file_name().expect("listed file"));
        run.manifest.push_file("input.pred", p_path)?;
        run.manifest.push_file("input.gt", &g_path)?;
        let p = read_raw(p_path)?;
        let g = read_raw(&g_path).with_context(|| format!("ground truth for {}", p_path.display()))?;
        p.same_grid(&g, "eval")?;
        // Fixations are the ground-truth peak pixels.
        let peak = g.max();
        let fixations: Vec<Fixation> = (0..g.height())
            .flat_map(|r| (0..g.width()).map(move |c| (r, c)))
            .filter(|&(r, c)| g.get(r, c) == peak)
            .collect();
        let (accuracy, precision, recall) =
            match tile_set_metrics(&tiles.viewed(&p)?, &tiles.viewed(&g)?) {
                Ok(t) => (t.accuracy, t.precision, t.recall),
                Err(Error::UndefinedMetric(_)) => (f64::NAN, f64::NAN, f64::NAN),
                Err(e) => return Err(e.into()),
            };
        let frame = frame_number(p_path).unwrap_or(i);
        records.push(MetricRecord {
            frame,
            timestamp_s: frame as f64 / s.fps,
            interval_s: s.interval_s,
            offset_frames: s.offset_frames(),
            feedback_users: s.feedback_users,
            accuracy,
            precision,
            recall,
            nss: or_nan(nss(&p, &fixations))?,
            cc: or_nan(cc(&p, &g))?,
            auc: or_nan(auc_judd(&p, &fixations))?,
            loss: weighted_mse(&p, &g)?,
        });
    }
    run.write_metrics(&records)?;
    println!("{} heatmaps, mean accuracy {:.4}", records.len(), mean_accuracy(&records));
    run.finish()
}

fn gradcheck(common: &Common) -> Result<bool> {
    let mut run = Run::start("gradcheck", common)?;
    let reports = gradcheck_suite::run_all();
    let mut text = String::new();
    for r in &reports {
        println!("{r}");
        text.push_str(&format!("{r}\n"));
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    let path = run.out.join("gradcheck.txt");
    std::fs::write(&path, text)?;
    run.manifest.push_file("output", &path)?;
    run.manifest.push("failed", failed.to_string());
    run.finish()?;
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.verb {
        Verb::Saliency {
            common,
            source,
            model,
            frame,
        } => saliency(common, source, model, frame).map(|_| true),
        Verb::Predict {
            common,
            source,
            model,
            frame,
        } => predict(common, source, model, frame).map(|_| true),
        Verb::Fuse { common, saliency, fov } => fuse_maps(common, saliency, fov).map(|_| true),
        Verb::Train { common, source } => train(common, source).map(|_| true),
        Verb::Simulate {
            common,
            source,
            model,
            save_maps,
        } => simulate(common, source, model, *save_maps).map(|_| true),
        Verb::Eval { common, pred, gt } => eval(common, pred, gt).map(|_| true),
        Verb::Gradcheck { common } => gradcheck(common),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

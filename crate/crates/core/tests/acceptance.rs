//! Acceptance suite: one PASS/FAIL line per criterion, then a single assert.
//!
//! Run with `cargo test -p sphview --test acceptance -- --nocapture` to see
//! the report.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sphview::evalkit::{
    auc_judd, classify_mean_diffs, nss, tile_set_metrics, weighted_mse, Fixation, MoveLevel,
};
use sphview::fovgru::{FovConfig, FovNet, SpConvGruCell};
use sphview::fusion::fuse;
use sphview::harness::io::{raw_bytes, write_metrics};
use sphview::harness::simulate::{mean_accuracy, saliency_maps, saliency_samples};
use sphview::harness::{generate_scene, simulate_session, toy_train, Models, RunConfig, SceneConfig, SessionData};
use sphview::numerics::{sigmoid, Tape, Tensor};
use sphview::params::ParamStore;
use sphview::saliency::{CbamBlock, MotionMode, SaliencyConfig, SaliencyNet};
use sphview::spconv::{
    build_sampling_grid, laplacian_kernel, latitude_rotation_test, longitude_shift_equivariance, spconv2d,
};
use sphview::sphere::{gaussian_fov_heatmap, solid_angle_weights, ErpMap, FovRect, LatLon};
use sphview::trainer::{checkpoint_bytes, gradcheck_suite, train_fov, train_saliency, FovSample, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ErpMap {
    ErpMap::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck_suite::run_all();
    let elapsed = start.elapsed();
    let families = [
        ("planar conv", "conv2d"),
        ("spherical conv", "spconv"),
        ("pooling", "maxpool"),
        ("unpooling", "unpool"),
        ("batchnorm", "batchnorm train"),
        ("relu", "relu"),
        ("sigmoid", "sigmoid"),
        ("tanh", "tanh"),
        ("mlp", "mlp"),
        ("cbam", "cbam"),
        ("gru cell", "gru cell"),
        ("fov head", "fov net"),
        ("saliency head", "saliency head"),
        ("weighted loss", "weighted mse"),
    ];
    let mut thin = Vec::new();
    for (label, prefix) in families {
        let n = reports.iter().filter(|r| r.op.starts_with(prefix)).count();
        if n < 3 {
            thin.push(format!("{label}: {n} shapes"));
        }
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.to_string()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && thin.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, worst rel err {worst:.2e}, {:.1}s; failed {failed:?}; under-covered {thin:?}",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn row_totals(m: &ErpMap) -> Vec<f64> {
    (0..m.height()).map(|r| (0..m.width()).map(|c| m.get(r, c)).sum()).collect()
}

fn spherical_geometry() -> Outcome {
    let mut ok = true;
    let mut worst = 0.0f64;
    for (h, w) in [(1, 1), (2, 4), (3, 6), (4, 8), (7, 13), (32, 64), (64, 128), (181, 360)] {
        let wts = solid_angle_weights(h, w).unwrap();
        worst = worst.max((wts.sum() - 1.0).abs());
        if h >= 3 {
            let rows = row_totals(&wts);
            ok &= rows[h / 2] > rows[0] && rows[h / 2] > rows[h - 1];
        }
    }
    ok &= worst <= 1e-9;
    let rows = row_totals(&solid_angle_weights(4, 8).unwrap());
    let analytic = [0.146447, 0.353553, 0.353553, 0.146447];
    let v4 = rows.iter().zip(analytic).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ok &= v4 < 1e-6;
    outcome(ok, format!("max |sum - 1| {worst:.1e}; V=4 row error {v4:.1e}"))
}

fn weight_sharing() -> Outcome {
    let r = latitude_rotation_test(32, 64, 60f64.to_radians(), 8f64.to_radians(), &laplacian_kernel()).unwrap();
    let grid = build_sampling_grid((32, 64), 3, 1).unwrap();
    let mut g = rng(3);
    let x = Tensor::uniform(&[2, 32, 64], -1.0, 1.0, &mut g);
    let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut g);
    let shift = [1, 7, 32, -5]
        .iter()
        .map(|&s| longitude_shift_equivariance(&x, &w, &grid, s).unwrap().max_abs_diff)
        .fold(0.0, f64::max);
    outcome(
        r.spherical_corr > 0.95 && r.planar_corr < r.spherical_corr && shift <= 1e-9,
        format!(
            "spherical corr {:.4}, planar corr {:.4}, shift error {shift:.1e}",
            r.spherical_corr, r.planar_corr
        ),
    )
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let y1 = (y0 as usize + 1).min(h - 1);
    let at = |r: usize, c: i64| plane[r * w + c.rem_euclid(w as i64) as usize];
    let (y0, x0) = (y0 as usize, x0 as i64);
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x0 + 1))
}

fn randomise(store: &mut ParamStore, names: &[&str], seed: u64) {
    for (i, n) in names.iter().enumerate() {
        let p = store.get_mut(n).unwrap();
        p.value = Tensor::uniform(p.value.shape(), -0.5, 0.5, &mut rng(seed + i as u64));
    }
}

/// Channel MLP, channel attention, spatial pooling and the 7x7 spherical
/// spatial attention, each evaluated by loops over plain slices.
fn cbam_error(seed: u64) -> f64 {
    let (c, h, w) = (16, 8, 16);
    let block = CbamBlock::new("c", (h, w), c, 4).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng(seed));
    randomise(&mut store, &["c.mlp0.bias", "c.mlp1.bias", "c.spatial.bias"], seed + 1);
    let f = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng(seed + 5));
    let mut t = Tape::new();
    let x = t.leaf(f.clone());
    let out = block.forward(&mut t, &store, x).unwrap().out;
    let got = t.value(out).data().to_vec();

    let hw = h * w;
    let p = |n: &str| store.get(n).unwrap().data().to_vec();
    let (w0, b0, w1, b1) = (p("c.mlp0.weight"), p("c.mlp0.bias"), p("c.mlp1.weight"), p("c.mlp1.bias"));
    let hid = b0.len();
    let mlp = |v: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = (0..hid)
            .map(|i| (b0[i] + (0..c).map(|j| w0[i * c + j] * v[j]).sum::<f64>()).max(0.0))
            .collect();
        (0..c).map(|i| b1[i] + (0..hid).map(|j| w1[i * hid + j] * z[j]).sum::<f64>()).collect()
    };
    let avg: Vec<f64> = (0..c).map(|k| f.channel(k).iter().sum::<f64>() / hw as f64).collect();
    let max: Vec<f64> = (0..c).map(|k| f.channel(k).iter().cloned().fold(f64::MIN, f64::max)).collect();
    let (ma, mm) = (mlp(&avg), mlp(&max));
    let mc: Vec<f64> = (0..c).map(|k| 1.0 / (1.0 + (-(ma[k] + mm[k])).exp())).collect();
    let fc: Vec<f64> = (0..c * hw).map(|i| mc[i / hw] * f.data()[i]).collect();
    let pa: Vec<f64> = (0..hw).map(|q| (0..c).map(|k| fc[k * hw + q]).sum::<f64>() / c as f64).collect();
    let pm: Vec<f64> = (0..hw).map(|q| (0..c).map(|k| fc[k * hw + q]).fold(f64::MIN, f64::max)).collect();
    let grid = build_sampling_grid((h, w), 7, 1).unwrap();
    let kw = p("c.spatial.weight");
    let kb = p("c.spatial.bias")[0];
    let mut err = 0.0f64;
    for r in 0..h {
        for col in 0..w {
            let mut s = kb;
            for (tap, &(y, dx)) in grid.row(r).iter().enumerate() {
                let x = col as f64 + dx;
                s += kw[tap] * bilinear(&pa, h, w, y, x) + kw[49 + tap] * bilinear(&pm, h, w, y, x);
            }
            let ms = 1.0 / (1.0 + (-s).exp());
            for k in 0..c {
                let i = k * hw + r * w + col;
                err = err.max((got[i] - ms * fc[i]).abs());
            }
        }
    }
    err
}

/// Update gate, reset gate, candidate and state blend with separately cut
/// kernels, using the already-verified spherical convolution.
fn gru_error(seed: u64) -> f64 {
    let (h, w, c_in, hid) = (8, 16, 2, 3);
    let cell = SpConvGruCell::new("g", (h, w), c_in, hid, 3).unwrap();
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut rng(seed));
    randomise(&mut store, &["g.gates.bias", "g.candidate.bias"], seed + 1);
    let x = Tensor::uniform(&[c_in, h, w], -1.0, 1.0, &mut rng(seed + 3));
    let h0 = Tensor::uniform(&[hid, h, w], -1.0, 1.0, &mut rng(seed + 4));
    let mut t = Tape::new();
    let (xv, hv) = (t.leaf(x.clone()), t.leaf(h0.clone()));
    let step = cell.step(&mut t, &store, xv, hv).unwrap();
    let got = t.value(step.hidden).data().to_vec();

    let c = hid + c_in;
    let per = c * 9;
    let gw = store.get("g.gates.weight").unwrap().data();
    let gb = store.get("g.gates.bias").unwrap().data();
    let wz = Tensor::new(&[hid, c, 3, 3], gw[..hid * per].to_vec()).unwrap();
    let wr = Tensor::new(&[hid, c, 3, 3], gw[hid * per..].to_vec()).unwrap();
    let bz = Tensor::new(&[hid], gb[..hid].to_vec()).unwrap();
    let br = Tensor::new(&[hid], gb[hid..].to_vec()).unwrap();
    let cat = |a: &Tensor, b: &Tensor| {
        let mut d = a.data().to_vec();
        d.extend_from_slice(b.data());
        Tensor::new(&[a.shape()[0] + b.shape()[0], h, w], d).unwrap()
    };
    let grid = build_sampling_grid((h, w), 3, 1).unwrap();
    let hx = cat(&h0, &x);
    let i_t = spconv2d(&hx, &wz, Some(&bz), &grid).unwrap().map(sigmoid);
    let r_t = spconv2d(&hx, &wr, Some(&br), &grid).unwrap().map(sigmoid);
    let rh = r_t.zip_map(&h0, |r, h| r * h).unwrap();
    let cand = spconv2d(
        &cat(&rh, &x),
        store.get("g.candidate.weight").unwrap(),
        Some(store.get("g.candidate.bias").unwrap()),
        &grid,
    )
    .unwrap()
    .map(f64::tanh);
    (0..got.len())
        .map(|i| {
            let want = (1.0 - i_t.data()[i]) * h0.data()[i] + i_t.data()[i] * cand.data()[i];
            (got[i] - want).abs()
        })
        .fold(0.0, f64::max)
}

/// Disparity weights from explicit region blocks, weighted sum, min-max.
fn fusion_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (s, v) = (random_map(16, 32, &mut g), random_map(16, 32, &mut g));
    let p = fuse(&s, &v, (4, 4)).unwrap();
    let weight = |m: &ErpMap| {
        let mut maxima = [f64::MIN; 16];
        for r in 0..16 {
            for c in 0..32 {
                let k = (r / 4) * 4 + c / 8;
                maxima[k] = maxima[k].max(m.get(r, c));
            }
        }
        let top = maxima.iter().cloned().fold(f64::MIN, f64::max);
        let mean = maxima.iter().sum::<f64>() / 16.0;
        (top - mean) * (top - mean)
    };
    let (ws, wv) = (weight(&s), weight(&v));
    let raw: Vec<f64> = (0..512).map(|i| ws * s.values()[i] + wv * v.values()[i]).collect();
    let lo = raw.iter().cloned().fold(f64::MAX, f64::min);
    let hi = raw.iter().cloned().fold(f64::MIN, f64::max);
    p.values()
        .iter()
        .zip(&raw)
        .map(|(a, r)| (a - (r - lo) / (hi - lo)).abs())
        .fold(0.0, f64::max)
}

/// Pixel solid angles from the latitude band bounds.
fn loss_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (h, w) = (6, 12);
    let (p, q) = (random_map(h, w, &mut g), random_map(h, w, &mut g));
    let mut want = 0.0;
    for r in 0..h {
        let top = (-90.0 + 180.0 * r as f64 / h as f64).to_radians();
        let bottom = (-90.0 + 180.0 * (r + 1) as f64 / h as f64).to_radians();
        let omega = (std::f64::consts::TAU / w as f64) * (bottom.sin() - top.sin()) / (4.0 * std::f64::consts::PI);
        for c in 0..w {
            want += omega * (p.get(r, c) - q.get(r, c)).powi(2);
        }
    }
    (weighted_mse(&p, &q).unwrap() - want).abs()
}

fn composed_chains() -> Outcome {
    let seeds = [11, 12, 13];
    let worst = |f: fn(u64) -> f64| seeds.iter().map(|&s| f(s)).fold(0.0, f64::max);
    let (a, b, c, d) = (worst(cbam_error), worst(gru_error), worst(fusion_error), worst(loss_error));
    outcome(
        a < 1e-12 && b < 1e-12 && c < 1e-12 && d < 1e-12,
        format!("cbam {a:.1e}, gru {b:.1e}, fusion {c:.1e}, loss {d:.1e}"),
    )
}

fn metric_suite() -> Outcome {
    let mut g = rng(5);
    let mut jaccard_ok = true;
    for _ in 0..1000 {
        let n = g.gen_range(1..40);
        let pred: Vec<bool> = (0..n).map(|_| g.gen_bool(0.4)).collect();
        let mut gt: Vec<bool> = (0..n).map(|_| g.gen_bool(0.4)).collect();
        gt[0] = true;
        let s = tile_set_metrics(&pred, &gt).unwrap();
        jaccard_ok &= s.accuracy <= s.precision.min(s.recall) + 1e-15;
    }
    let s = tile_set_metrics(&[true, true, true, false], &[false, true, true, true]).unwrap();
    let set_case = s.accuracy == 0.5 && s.precision == 2.0 / 3.0 && s.recall == 2.0 / 3.0;

    let fixations: Vec<Fixation> = vec![(1, 2), (3, 5), (6, 9), (7, 0)];
    let mut perfect = ErpMap::from_fn(8, 16, |r, c| ((r * 16 + c) as f64) / 1000.0).unwrap();
    for &(r, c) in &fixations {
        perfect.values_mut()[r * 16 + c] = 1.0;
    }
    let auc_perfect = auc_judd(&perfect, &fixations).unwrap();
    let trials: Vec<f64> = (0..100)
        .map(|_| {
            let m = random_map(16, 32, &mut g);
            let fx: Vec<Fixation> = (0..20).map(|_| (g.gen_range(0..16), g.gen_range(0..32))).collect();
            auc_judd(&m, &fx).unwrap()
        })
        .collect();
    let auc_random = trials.iter().sum::<f64>() / trials.len() as f64;

    let hand = nss(&ErpMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(), &[(0, 0)]).unwrap();

    let classes = [
        classify_mean_diffs(0.7, 0.35).label == MoveLevel::More,
        classify_mean_diffs(0.5, 0.2).label == MoveLevel::Middle,
        classify_mean_diffs(0.7, 0.05).label == MoveLevel::Middle,
    ];
    let ok = jaccard_ok
        && set_case
        && auc_perfect == 1.0
        && (auc_random - 0.5).abs() <= 0.05
        && (hand - 1.7321).abs() < 1e-4
        && classes.iter().all(|&c| c);
    outcome(
        ok,
        format!(
            "jaccard bound {jaccard_ok}, set case {set_case}, auc perfect {auc_perfect}, \
             auc random {auc_random:.4}, nss {hand:.5}, head classes {classes:?}"
        ),
    )
}

struct ToyRun {
    by_users: Vec<(usize, f64)>,
    by_offset: Vec<(usize, f64)>,
    elapsed: Duration,
}

fn toy_run() -> ToyRun {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let mut train_scene = cfg.scene_for_session();
    train_scene.seed += 1;
    let train = SessionData::from_scene(generate_scene(&train_scene).unwrap());
    let eval = SessionData::from_scene(generate_scene(&cfg.scene_for_session()).unwrap());
    let s = &cfg.session;
    let mut models = Models::init(s.grid, 1, s.motion, cfg.train.seed).unwrap();
    toy_train(&mut models, &train, &cfg).unwrap();
    let sal = saliency_maps(&models, &eval.frames).unwrap();
    let run = |n: usize, offset: usize| {
        let mut session = cfg.session.clone();
        session.feedback_users = n;
        session.interval_s = offset as f64 / session.fps;
        let out = simulate_session(&eval, &models, &session, cfg.train.seq_len, Some(&sal)).unwrap();
        mean_accuracy(&out.records)
    };
    let by_users = [0, 2, 5].iter().map(|&n| (n, run(n, 1))).collect();
    let by_offset = [1, 15, 30].iter().map(|&o| (o, run(5, o))).collect();
    ToyRun {
        by_users,
        by_offset,
        elapsed: start.elapsed(),
    }
}

fn feedback_trend(r: &ToyRun) -> Outcome {
    let acc: Vec<f64> = r.by_users.iter().map(|x| x.1).collect();
    let monotone = acc.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let gain = acc[2] - acc[0];
    outcome(
        monotone && gain >= 0.05 && r.elapsed < Duration::from_secs(600),
        format!(
            "accuracy N=0 {:.4}, N=2 {:.4}, N=5 {:.4}; N5-N0 {gain:.4}; {:.0}s",
            acc[0],
            acc[1],
            acc[2],
            r.elapsed.as_secs_f64()
        ),
    )
}

fn interval_trend(r: &ToyRun) -> Outcome {
    let acc: Vec<f64> = r.by_offset.iter().map(|x| x.1).collect();
    outcome(
        acc.windows(2).all(|w| w[1] <= w[0] + 0.01),
        format!("accuracy offset 1 {:.4}, 15 {:.4}, 30 {:.4}", acc[0], acc[1], acc[2]),
    )
}

fn overfit() -> Outcome {
    let grid = (32, 64);
    let scene = generate_scene(&SceneConfig {
        frames: 12,
        grid,
        ..SceneConfig::default()
    })
    .unwrap();
    let data = SessionData::from_scene(scene);
    let pair = vec![saliency_samples(&data, MotionMode::StackedFrames, grid).unwrap()[9].clone()];
    let net = SaliencyNet::new(SaliencyConfig {
        frame_channels: 1,
        ..SaliencyConfig::desk(grid)
    })
    .unwrap();
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng(0)).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        max_steps: 400,
        ..TrainConfig::desk()
    };
    let sal_loss = train_saliency(&net, &mut store, &pair, &cfg).unwrap().last().unwrap().loss;

    let fov = FovNet::new(FovConfig::desk(grid)).unwrap();
    let mut store = ParamStore::new();
    fov.init(&mut store, &mut rng(0)).unwrap();
    let heat = |j: usize| {
        gaussian_fov_heatmap(&FovRect::new(LatLon::from_degrees(-40.0 + 6.0 * j as f64, 10.0)), grid.0, grid.1)
            .unwrap()
            .to_tensor()
    };
    let seq = FovSample {
        inputs: (0..3).map(heat).collect(),
        targets: (1..4).map(heat).collect(),
    };
    let cfg = TrainConfig {
        max_steps: 500,
        ..cfg
    };
    let log = train_fov(&fov, &mut store, &[seq], &cfg).unwrap();
    let best = log.iter().map(|l| l.loss).fold(f64::MAX, f64::min);
    let ratio = log[0].loss / best;
    outcome(
        sal_loss < 1e-3 && ratio >= 10.0,
        format!("saliency loss {sal_loss:.2e}; fov loss {:.2e} -> {best:.2e} (x{ratio:.1})", log[0].loss),
    )
}

/// Checkpoint, raw prediction and metric bytes from a short seeded run.
fn artifacts(parallel: bool) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let go = || {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "grid_height=32",
            "grid_width=64",
            "population=6",
            "feedback_users=2",
            "scene.frames=16",
            "warmup_frames=4",
            "train.saliency_steps=4",
            "train.fov_steps=4",
        ])
        .unwrap();
        let data = SessionData::from_scene(generate_scene(&cfg.scene_for_session()).unwrap());
        let s = &cfg.session;
        let mut models = Models::init(s.grid, 1, s.motion, cfg.train.seed).unwrap();
        toy_train(&mut models, &data, &cfg).unwrap();
        let out = simulate_session(&data, &models, s, cfg.train.seq_len, None).unwrap();
        let mut metrics = Vec::new();
        write_metrics(&mut metrics, &out.records).unwrap();
        let raw: Vec<u8> = out.predictions.iter().flat_map(raw_bytes).collect();
        (checkpoint_bytes(&models.store), raw, metrics)
    };
    if parallel {
        go()
    } else {
        sphview::par::sequential(go)
    }
}

fn determinism() -> Outcome {
    let a = artifacts(true);
    let b = artifacts(true);
    let c = artifacts(false);
    let same = |x: &(Vec<u8>, Vec<u8>, Vec<u8>), y: &(Vec<u8>, Vec<u8>, Vec<u8>)| [x.0 == y.0, x.1 == y.1, x.2 == y.2];
    let repeat = same(&a, &b);
    let threads = same(&a, &c);
    outcome(
        repeat.iter().chain(&threads).all(|&v| v),
        format!("checkpoint/raw/metrics identical on rerun {repeat:?}, single-thread {threads:?}"),
    )
}

#[test]
fn acceptance_criteria() {
    let toy = Arc::new(toy_run());
    let results = [
        ("1 gradient integrity", gradient_integrity()),
        ("2 spherical geometry", spherical_geometry()),
        ("3 weight sharing", weight_sharing()),
        ("4 composed-chain oracles", composed_chains()),
        ("5 metric suite", metric_suite()),
        ("6 feedback-user trend", feedback_trend(&toy)),
        ("7 interval degradation", interval_trend(&toy)),
        ("8 overfit sanity", overfit()),
        ("9 determinism", determinism()),
    ];
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.1.passed).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

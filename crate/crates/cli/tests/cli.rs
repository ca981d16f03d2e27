use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 9] = [
    "grid_height=32",
    "grid_width=64",
    "population=6",
    "feedback_users=2",
    "scene.frames=70",
    "warmup_frames=62",
    "train.saliency_steps=2",
    "train.fov_steps=2",
    "train.seq_len=2",
];

fn sphview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphview")).args(args).output().unwrap()
}

fn with_config(verb: &str, out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap().to_string();
    let mut args = vec![verb.to_string(), "--out".into(), out];
    for s in SMALL {
        args.push("--set".into());
        args.push(s.into());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = sphview(&refs);
    assert!(o.status.success(), "{verb} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn metric_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn interval_changes_only_interval_and_metric_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    with_config("simulate", &a, &["--set", "interval_s=0.03"]);
    with_config("simulate", &b, &["--set", "interval_s=2.0"]);
    let (header, ra) = metric_rows(&a.join("metrics.csv"));
    let (_, rb) = metric_rows(&b.join("metrics.csv"));
    assert!(!ra.is_empty());
    assert_eq!(ra.len(), rb.len());
    let fixed = ["frame", "timestamp_s", "feedback_users"];
    for (x, y) in ra.iter().zip(&rb) {
        for (i, name) in header.iter().enumerate() {
            if fixed.contains(&name.as_str()) {
                assert_eq!(x[i], y[i], "column {name}");
            }
        }
        assert_eq!(x[header.iter().position(|h| h == "offset_frames").unwrap()], "1");
        assert_eq!(y[header.iter().position(|h| h == "offset_frames").unwrap()], "60");
    }
}

#[test]
fn eval_of_identical_maps_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    with_config("simulate", &sim, &["--save-maps"]);
    let eval = dir.path().join("eval");
    let sim_s = sim.to_str().unwrap();
    with_config("eval", &eval, &["--pred", sim_s, "--gt", sim_s]);
    let (header, rows) = metric_rows(&eval.join("metrics.csv"));
    let acc = header.iter().position(|h| h == "accuracy").unwrap();
    let loss = header.iter().position(|h| h == "loss").unwrap();
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r[acc].parse::<f64>().unwrap(), 1.0);
        assert_eq!(r[loss].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn verbs_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    with_config("train", &train, &[]);
    let ckpt = train.join("checkpoint.bin");
    assert!(ckpt.exists());
    assert!(train.join("train_log.csv").exists());
    let ckpt_s = ckpt.to_str().unwrap();

    let sal = dir.path().join("sal");
    with_config("saliency", &sal, &["--checkpoint", ckpt_s, "--frame", "62"]);
    let fov = dir.path().join("fov");
    with_config("predict", &fov, &["--checkpoint", ckpt_s, "--frame", "62"]);
    let fused = dir.path().join("fused");
    with_config(
        "fuse",
        &fused,
        &[
            "--saliency",
            sal.join("saliency_0062.raw").to_str().unwrap(),
            "--fov",
            fov.join("fov_0062.raw").to_str().unwrap(),
        ],
    );
    let manifest = std::fs::read_to_string(fused.join("manifest.txt")).unwrap();
    assert!(manifest.contains("verb = fuse"), "{manifest}");
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sphview(&["gradcheck", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("gradcheck.txt").exists());
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!sphview(&["frobnicate"]).status.success());
    assert!(!sphview(&["simulate", "--bogus"]).status.success());
    let o = sphview(&["simulate", "--set", "no_such_key=1", "--out", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(1));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
preset = reduced
soft.conv_layers = 1
soft.base_channels = 2
soft.feature_depth = 2
soft.feature_width = 4
soft.feature_pool = 4
sampler.tiles = 2
sampler.candidates = 4
sampler.window = 3
sampler.tile_size_base = 256
sampler.tile_size_model = 32
agent.glimpse_size = 16
agent.steps = 3
agent.context_size = 32
agent.glimpse_channels = 2,2
agent.retina_pool = 2
agent.feature_size = 4
agent.lstm_sizes = 6,4
agent.context_channels = 2
train.tiles_per_batch = 8
train.slides_per_batch = 4
train.epochs = 2
train.folds = 2
";

const TINY_DATA: [&str; 6] = [
    "dataset.count=8",
    "dataset.seed=5",
    "generator.base_height=2048",
    "generator.base_width=2048",
    "generator.roi_radius_min=150",
    "generator.roi_radius_max=220",
];

fn dualatt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualatt")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn synth(dir: &Path) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap()];
    for s in TINY_DATA {
        args.extend(["--set", s]);
    }
    ok(&dualatt(&args));
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.conf");
    fs::write(&p, TINY).unwrap();
    p
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_balanced_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    synth(&b);
    let labels = fs::read_to_string(a.join("labels.csv")).unwrap();
    let rows: Vec<&str> = labels.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for class in 0..4 {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some(&class.to_string())).count(), 2);
    }
    assert_eq!(files(&a), files(&b));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());

    let out = dualatt(&["config", "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.bogus"));
    let out = dualatt(&["config", "--set", "config_version=9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("v9"));
    assert_eq!(dualatt(&["config", "--set", "no-equals"]).status.code(), Some(2));
    assert_eq!(dualatt(&["train", "--data"]).status.code(), Some(2));

    let out = dualatt(&["train", "--data", d, "--run", r, "--preset", "reduced"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels.csv"));
    let out = dualatt(&["eval", "--data", d, "--checkpoint", tmp.path().join("missing.ckpt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    synth(&data);
    let cfg = tiny_config(tmp.path());
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("run.lock"), "1").unwrap();
    let out = dualatt(&["train", "--data", d, "--run", r, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));

    let blow = tmp.path().join("blow");
    let out = dualatt(&[
        "train",
        "--data",
        d,
        "--run",
        blow.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.grad_clip=0",
        "--set",
        "train.lr_hard=1e300",
        "--set",
        "train.lr_soft=1e300",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(blow.join("nonfinite.json")).unwrap()).unwrap();
    assert!(dump["slides"].as_array().is_some_and(|s| !s.is_empty()));
}

#[test]
fn train_eval_inspect_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    let d = data.to_str().unwrap();
    ok(&dualatt(&[
        "train",
        "--data",
        d,
        "--run",
        run.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.checkpoint_every=1",
    ]));

    assert!(!run.join("run.lock").exists());
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    let rows: Vec<&str> = loss.lines().collect();
    assert!(rows[0].starts_with("phase,epoch"));
    assert_eq!(rows.len(), 3);
    for tag in ["joint_001", "joint_002", "final"] {
        assert!(run.join("checkpoints").join(format!("{tag}.ckpt")).exists(), "{tag}");
        let overlays = fs::read_dir(run.join("overlays").join(tag)).unwrap().count();
        assert_eq!(overlays, 4, "{tag}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["report"]["cases"], 4);
    assert!(metrics["report"]["schema_version"].as_u64().is_some());
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 5);

    // Evaluating the final checkpoint reproduces the run's own metrics.
    let ckpt = run.join("checkpoints/final.ckpt");
    let out = dualatt(&["eval", "--data", d, "--checkpoint", ckpt.to_str().unwrap()]);
    ok(&out);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), fs::read_to_string(run.join("metrics.json")).unwrap().trim());
    let out = dualatt(&["eval", "--data", d, "--checkpoint", ckpt.to_str().unwrap(), "--split", "all", "--set", "train.threads=2"]);
    ok(&out);
    let all: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(all["report"]["cases"], 8);
    let out = dualatt(&["eval", "--data", d, "--checkpoint", ckpt.to_str().unwrap(), "--set", "agent.steps=4"]);
    assert_eq!(out.status.code(), Some(2));

    // Replaying the snapshot gives identical metrics.
    let again = tmp.path().join("again");
    ok(&dualatt(&["train", "--data", d, "--run", again.to_str().unwrap(), "--config", run.join("config.txt").to_str().unwrap()]));
    assert_eq!(fs::read(again.join("metrics.json")).unwrap(), fs::read(run.join("metrics.json")).unwrap());

    let shots = tmp.path().join("inspect");
    let out = dualatt(&["inspect", "--data", d, "--slide", "slide_003", "--run", run.to_str().unwrap(), "--out", shots.to_str().unwrap()]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("processed fraction"));
    for tag in ["joint_001", "joint_002", "final"] {
        assert!(shots.join(format!("{tag}_overlay.png")).exists());
        assert!(shots.join(format!("{tag}_attention.png")).exists());
    }
    assert!(shots.join("tile_00_glimpses.png").exists() && shots.join("tile_01_glimpses.png").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(shots.join("inspect.json")).unwrap()).unwrap();
    // Two tiles, three glimpse pairs each of 16² + 32² base pixels.
    let expected = 2.0 * 3.0 * (16.0 * 16.0 + 32.0 * 32.0) / (2048.0 * 2048.0);
    assert!((report["processed_fraction"].as_f64().unwrap() - expected).abs() < 1e-12);
    let traces: serde_json::Value = serde_json::from_str(&fs::read_to_string(shots.join("episodes.json")).unwrap()).unwrap();
    assert_eq!(traces.as_array().unwrap().len(), 2);

    let out = dualatt(&["inspect", "--data", d, "--slide", "nope", "--checkpoint", ckpt.to_str().unwrap(), "--out", shots.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn preset_configs_resolve_to_their_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for p in ["her2", "mmr", "reduced"] {
        let file = dualatt(&["config", "--config", root.join(format!("{p}.conf")).to_str().unwrap()]);
        let preset = dualatt(&["config", "--preset", p]);
        ok(&file);
        assert_eq!(file.stdout, preset.stdout, "{p}");
    }
}

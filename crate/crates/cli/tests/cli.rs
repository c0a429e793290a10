use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const SMALL: &str = r#"
[model]
width = 160
height = 64
encoder_depth = 10
base_width = 8
pose_encoder_depth = 10
pose_base_width = 8

[synth]
sequences = 3
frames = 4
val = 1
test = 1
supersample = 1
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_recdepth"));
    c.env_remove("RECDEPTH_DATA_ROOT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path, needle: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.to_str().unwrap().contains(needle) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&["train", "--mode", "selfish"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["train", "--points", "5", "--lines", "2"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatch = 4\n").unwrap();
    let o = run(&["synth", "--config", s(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch"));

    fs::write(&bad, "[train]\nbatch_size = 0\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", s(&bad)])), 1);
}

#[test]
fn synth_writes_every_frame_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for root in [&a, &b] {
        let o = run(&["synth", "--config", s(&cfg), "--data-root", s(root), "--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let images = files_under(&a, "image_02/data");
    let depths = files_under(&a, "proj_depth");
    assert_eq!(images.len(), 12);
    assert_eq!(depths.len(), 12);
    assert_eq!(files_under(&a, "poses.txt").len(), 3);
    assert_eq!(files_under(&a, "calib_cam_to_cam.txt").len(), 1);
    for (split, n) in [("train", 4), ("val", 4), ("test", 4)] {
        let text = fs::read_to_string(a.join("splits").join(format!("{split}_files.txt"))).unwrap();
        assert_eq!(text.lines().count(), n);
    }
    for (x, y) in images.iter().zip(files_under(&b, "image_02/data")) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }

    // A non-empty target needs --force.
    let again = run(&["synth", "--config", s(&cfg), "--data-root", s(&a), "--seed", "6"]);
    assert_eq!(code(&again), 1);
    let forced = run(&["synth", "--config", s(&cfg), "--data-root", s(&a), "--seed", "6", "--force"]);
    assert_eq!(code(&forced), 0);
    assert_ne!(fs::read(&images[1]).unwrap(), fs::read(files_under(&b, "image_02/data")[1].clone()).unwrap());
}

#[test]
fn data_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let root = dir.path().join("env_root");
    let o = bin()
        .args(["synth", "--config", s(&cfg)])
        .env("RECDEPTH_DATA_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("splits").join("train_files.txt").exists());
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data-root",
        s(&dir.path().join("nowhere")),
        "--out-dir",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&o), 2);
}

/// synth, train, resume, eval with sweep and baseline, predict.
#[test]
fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let out = dir.path().join("run");
    let common = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = ["--smoke", "--data-root", s(&root), "--out-dir", s(&out), "--points", "100"]
            .iter()
            .map(|x| x.to_string())
            .collect();
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    };
    let call = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd.to_string()];
        args.extend(common(extra));
        let o = bin().args(&args).output().unwrap();
        (code(&o), String::from_utf8_lossy(&o.stdout).to_string(), String::from_utf8_lossy(&o.stderr).to_string())
    };

    let (c, _, e) = call("synth", &[]);
    assert_eq!(c, 0, "{e}");

    let t0 = Instant::now();
    let (c, _, e) = call("train", &[]);
    assert_eq!(c, 0, "{e}");
    assert!(t0.elapsed().as_secs() < 300, "smoke training took {:?}", t0.elapsed());
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    let train_rows = log.lines().filter(|l| l.starts_with("train,")).count();
    assert!(train_rows > 0 && train_rows <= 50, "{train_rows}");
    assert!(log.lines().any(|l| l.starts_with("val,")));
    let stored = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(stored.contains("count = 100"));

    // Training again without --resume or --force is refused.
    let (c, _, _) = call("train", &[]);
    assert_eq!(c, 1);
    // Nothing is left to do, but resuming is accepted.
    let (c, _, e) = call("train", &["--resume"]);
    assert_eq!(c, 0, "{e}");
    // A different configuration is refused on resume.
    let (c, _, _) = call("train", &["--resume", "--seed", "3"]);
    assert_eq!(c, 1);

    let ckpt = out.join("checkpoint.safetensors");
    let (c, stdout, e) = call("eval", &["--sweep", "--baseline", s(&ckpt)]);
    assert_eq!(c, 0, "{e}");
    assert!(stdout.contains("metrics.csv"));
    let table = fs::read_to_string(out.join("report").join("metrics.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    // Two models, plus three sweep counts each.
    assert_eq!(rows.len(), 2 + 2 * 3);
    for p in ["rand50", "rand200", "rand500"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some(p)).count(), 2);
    }
    for r in &rows {
        for v in r.split(',').skip(2).take(7) {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{r}");
        }
    }
    assert!(out.join("report").join("accumulated_rmse.svg").exists());
    assert!(out.join("report").join("sparsity_sweep.svg").exists());

    // Full-size configuration against a smoke checkpoint.
    let o = bin()
        .args(["eval", "--data-root", s(&root), "--out-dir", s(&out)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("160x64"));

    let folder = files_under(&root, "image_02/data")[0].parent().unwrap().to_path_buf();
    let depth_dir = root.join("2000_01_01/2000_01_01_drive_0000_sync/proj_depth/groundtruth/image_02");
    let n = fs::read_dir(&folder).unwrap().count();
    let pred = |dst: &Path| {
        run(&[
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--frames",
            s(&folder),
            "--sparse",
            s(&depth_dir),
            "--out",
            s(dst),
        ])
    };
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    assert_eq!(code(&pred(&p1)), 0);
    assert_eq!(code(&pred(&p2)), 0);
    let a = files_under(&p1, ".png");
    assert_eq!(a.len(), n);
    for (x, y) in a.iter().zip(files_under(&p2, ".png")) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let missing_sparse = run(&["predict", "--checkpoint", s(&ckpt), "--frames", s(&folder), "--out", s(&p1)]);
    assert_eq!(code(&missing_sparse), 1);
    let no_frames = run(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--frames",
        s(&dir.path().join("none")),
        "--out",
        s(&p1),
    ]);
    assert_eq!(code(&no_frames), 2);
}

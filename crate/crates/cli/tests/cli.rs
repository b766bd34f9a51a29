use std::path::Path;
use std::process::{Command, Output};

fn mafn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mafn"))
        .args(args)
        .current_dir(cwd)
        .env("MAFN_THREADS", "1")
        .output()
        .expect("spawn mafn")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mafn(args, cwd);
    assert!(
        out.status.success(),
        "mafn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], cwd: &Path) -> String {
    let out = mafn(args, cwd);
    assert!(!out.status.success(), "mafn {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

const TINY: &str = "model.channels = 4\nmodel.text_width = 6\nmodel.msrc_width = 4\ndata.image_size = 24\ntrain.epochs = 2\ntrain.batch = 4\n";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", "data", "--num", "6", "--val", "2", "--seed", "3", "--size", "24"], dir.path());
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn manifest_digest(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("manifest sha256 "))
        .unwrap()
        .to_string()
}

#[test]
fn gen_data_is_repeatable_and_validates_count() {
    let dir = tempfile::tempdir().unwrap();
    let digests: Vec<String> = (0..3)
        .map(|i| {
            let out = format!("d{i}");
            manifest_digest(&ok(&["gen-data", "--out", &out, "--num", "4", "--seed", "9", "--size", "24"], dir.path()))
        })
        .collect();
    assert!(digests.iter().all(|d| *d == digests[0]));
    let other = ok(&["gen-data", "--out", "e", "--num", "4", "--seed", "10", "--size", "24"], dir.path());
    assert_ne!(manifest_digest(&other), digests[0]);

    let err = fails(&["gen-data", "--out", "z", "--num", "0"], dir.path());
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    ok(&["gen-data", "--out", "big", "--num", "1"], dir.path());
    let head = std::fs::read(dir.path().join("big/train/00000.ppm")).unwrap();
    assert!(head.starts_with(b"P6\n48 48\n255\n"));
}

#[test]
fn train_requires_a_config() {
    let dir = setup();
    let err = fails(&["train", "--data", "data", "--out", "run"], dir.path());
    assert!(err.contains("--config"), "{err}");
    let err = fails(&["train", "--config", "missing.cfg", "--data", "data", "--out", "run"], dir.path());
    assert!(err.contains("missing.cfg"), "{err}");
}

fn param_count(stdout: &str) -> usize {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("parameters: "))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn ablation_flags_shrink_the_parameter_count() {
    let dir = setup();
    let base = &["train", "--config", "tiny.cfg", "--data", "data", "--set", "train.epochs=1"];
    let full = param_count(&ok(&[&base[..], &["--out", "full"]].concat(), dir.path()));
    for flag in ["--no-fusion", "--no-noise", "--no-msrc", "--zero-text"] {
        let n = param_count(&ok(&[&base[..], &["--out", "abl", flag]].concat(), dir.path()));
        assert!(n < full, "{flag}: {n} vs {full}");
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = setup();
    let train = ["train", "--config", "tiny.cfg", "--data", "data"];
    ok(&[&train[..], &["--out", "straight"]].concat(), dir.path());
    ok(&[&train[..], &["--out", "split", "--stop-after", "1"]].concat(), dir.path());
    let stdout = ok(&[&train[..], &["--out", "split", "--resume", "split/last.ckpt"]].concat(), dir.path());
    assert!(stdout.contains("resuming from split/last.ckpt at epoch 1"), "{stdout}");
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    for f in ["metrics.csv", "last.ckpt", "best.ckpt"] {
        assert_eq!(read(&format!("straight/{f}")), read(&format!("split/{f}")), "{f}");
    }
    let err = fails(&[&train[..], &["--out", "x", "--resume", "split/last.ckpt", "--no-msrc"]].concat(), dir.path());
    assert!(err.contains("different configuration"), "{err}");
}

#[test]
fn eval_prints_the_csv_values_in_table_order() {
    let dir = setup();
    ok(&["train", "--config", "tiny.cfg", "--data", "data", "--out", "run"], dir.path());
    let stdout = ok(&["eval", "--checkpoint", "run/best.ckpt", "--data", "data", "--csv", "eval.csv"], dir.path());
    let lines: Vec<&str> = stdout.lines().collect();
    let at = lines.iter().position(|l| l.trim_start().starts_with("P@0.5")).unwrap();
    let head: Vec<&str> = lines[at].split_whitespace().collect();
    assert_eq!(head, ["P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9", "oIoU", "mIoU"]);
    let shown: Vec<f64> = lines[at + 1].split_whitespace().map(|v| v.parse().unwrap()).collect();
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let reordered = [row[2], row[3], row[4], row[5], row[6], row[0], row[1]];
    for (a, b) in shown.iter().zip(reordered) {
        assert!((a - b).abs() <= 5e-5, "{a} vs {b}");
    }
}

#[test]
fn infer_writes_a_deterministic_mask_of_input_size() {
    let dir = setup();
    ok(&["train", "--config", "tiny.cfg", "--data", "data", "--out", "run", "--set", "train.epochs=1"], dir.path());
    let args = |out: &'static str| {
        vec!["infer", "--checkpoint", "run/last.ckpt", "--image", "data/val/00000.ppm", "--expr", "red circle left", "--out", out]
    };
    ok(&args("a.pgm"), dir.path());
    ok(&[&args("b.pgm")[..], &["--dump-features", "feat"]].concat(), dir.path());
    let a = std::fs::read(dir.path().join("a.pgm")).unwrap();
    assert!(a.starts_with(b"P5\n24 24\n255\n"));
    assert_eq!(a, std::fs::read(dir.path().join("b.pgm")).unwrap());
    for name in ["embed", "stage1_visual", "stage4_fused", "probability"] {
        assert!(dir.path().join(format!("feat/{name}.pgm")).exists(), "{name}");
    }

    let err = fails(
        &["infer", "--checkpoint", "run/last.ckpt", "--image", "data/val/00000.ppm", "--expr", "purple circle", "--out", "c.pgm"],
        dir.path(),
    );
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.contains("purple") && err.contains("triangle"), "{err}");
}

#[test]
fn verify_passes_and_names_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let report = ok(&["verify"], dir.path());
    assert!(report.contains(" 0 failed"), "{report}");
    assert!(!report.contains("FAIL"));

    let out = mafn(&["verify", "--inject-sign-flip"], dir.path());
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL") && l.contains("grad:sigmoid")), "{stdout}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("grad:sigmoid"));
}

#[test]
fn config_presets_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["default", "experiment", "pretrained"] {
        let text = ok(&["config", "--preset", preset], dir.path());
        mafn_core::RunConfig::parse(&text).unwrap();
    }
}

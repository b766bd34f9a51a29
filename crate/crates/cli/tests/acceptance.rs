//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 1–6 reuse the property suite, 7 trains the toy experiment on a
//! 500/100 corpus, 8 and 9 drive the `mafn` binary.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use mafn_core::checkpoint::Checkpoint;
use mafn_core::dataset;
use mafn_core::synth::SceneSpec;
use mafn_core::text::Vocabulary;
use mafn_core::train::{self, TrainOptions};
use mafn_core::verify::{self, Check};
use mafn_core::{model, RunConfig};

struct Outcome {
    criterion: u8,
    passed: bool,
    summary: String,
}

fn from_checks(criterion: u8, checks: Vec<Check>) -> Outcome {
    for c in &checks {
        println!("    {}", c.line());
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let worst = checks
        .iter()
        .filter(|c| c.tolerance < 1.0)
        .map(|c| c.max_error / c.tolerance)
        .fold(0.0f64, f64::max);
    Outcome {
        criterion,
        passed: failed.is_empty() && !checks.is_empty(),
        summary: if failed.is_empty() {
            format!("{} checks, worst error/tolerance {worst:.2e}", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    }
}

fn mafn(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mafn"))
        .args(args)
        .current_dir(cwd)
        .env("MAFN_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("mafn {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

const EXPERIMENT_BUDGET_SECS: f64 = 30.0 * 60.0;
const FULL_TARGET: f64 = 0.70;
const BLIND_SLACK: f64 = 0.05;

/// Best validation mIoU over all logged epochs of a run.
fn best_miou(cfg: RunConfig, data: &dataset::Dataset, out: &Path, label: &str) -> mafn_core::Result<(f64, usize)> {
    let params = model::init_params(&cfg, data.vocab.len());
    let ck = Checkpoint::new(cfg, data.vocab.clone(), params);
    let opts = TrainOptions {
        threads: train::threads_from_env(),
        ..TrainOptions::default()
    };
    let mut best = 0.0f64;
    let s = train::train(ck, data, out, &opts, |e| {
        best = best.max(e.metrics.miou);
        println!(
            "    {label} epoch {:>2} loss {:.4} val mIoU {:.4} {:.1}s",
            e.epoch, e.mean_loss, e.metrics.miou, e.seconds
        );
    })?;
    Ok((best, s.epochs))
}

fn toy_experiment(work: &Path) -> Outcome {
    let started = Instant::now();
    let run = || -> mafn_core::Result<(String, bool)> {
        let vocab = Vocabulary::standard();
        let items = dataset::generate(0, &[("train", 500), ("val", 100)], &SceneSpec::default(), &vocab)?;
        let dir = work.join("corpus");
        dataset::write_dataset(&dir, &vocab, &items)?;
        let data = dataset::read_dataset(&dir)?;
        let ceiling = dataset::blind_ceiling(&data.split("val"));
        println!("    language-blind ceiling on val: {ceiling:.4}");

        let cfg = RunConfig::toy_experiment();
        let (full, full_epochs) = best_miou(cfg.clone(), &data, &work.join("full"), "full")?;
        let mut blind_cfg = cfg;
        blind_cfg.ablation.zero_text = true;
        let (blind, blind_epochs) = best_miou(blind_cfg, &data, &work.join("blind"), "zero_text")?;

        let secs = started.elapsed().as_secs_f64();
        let ok = full >= FULL_TARGET && blind < ceiling + BLIND_SLACK && secs <= EXPERIMENT_BUDGET_SECS;
        Ok((
            format!(
                "full mIoU {full:.4} (>= {FULL_TARGET}, {full_epochs} epochs); zero_text best mIoU {blind:.4} \
                 (< {:.4}, {blind_epochs} epochs); {secs:.0}s (<= {EXPERIMENT_BUDGET_SECS:.0}s)",
                ceiling + BLIND_SLACK
            ),
            ok,
        ))
    };
    match run() {
        Ok((summary, passed)) => Outcome {
            criterion: 7,
            passed,
            summary,
        },
        Err(e) => Outcome {
            criterion: 7,
            passed: false,
            summary: e.to_string(),
        },
    }
}

const SMALL_CONFIG: &str = "model.channels = 4\nmodel.text_width = 6\nmodel.msrc_width = 4\n\
data.image_size = 24\ntrain.epochs = 3\ntrain.batch = 4\ntrain.lr = 3e-3\ntrain.seed = 5\n";

fn small_corpus(work: &Path) -> Result<(), String> {
    if work.join("data").join(dataset::MANIFEST).exists() {
        return Ok(());
    }
    std::fs::write(work.join("small.cfg"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    mafn(&["gen-data", "--out", "data", "--num", "12", "--val", "4", "--seed", "2", "--size", "24"], work)?;
    Ok(())
}

fn determinism(work: &Path) -> Outcome {
    let run = || -> Result<String, String> {
        small_corpus(work)?;
        for out in ["a", "b"] {
            mafn(&["train", "--config", "small.cfg", "--data", "data", "--out", out], work)?;
        }
        let mut compared = Vec::new();
        for f in [train::LOG_FILE, train::LAST_FILE, train::BEST_FILE] {
            let a = std::fs::read(work.join("a").join(f)).map_err(|e| e.to_string())?;
            let b = std::fs::read(work.join("b").join(f)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{f} differs between identical runs"));
            }
            compared.push(format!("{f} ({} bytes)", a.len()));
        }
        Ok(format!("byte-identical: {}", compared.join(", ")))
    };
    match run() {
        Ok(summary) => Outcome {
            criterion: 8,
            passed: true,
            summary,
        },
        Err(summary) => Outcome {
            criterion: 8,
            passed: false,
            summary,
        },
    }
}

fn table_rows(stdout: &str, title: &str) -> Vec<String> {
    let lines: Vec<&str> = stdout.lines().collect();
    let Some(at) = lines.iter().position(|l| l.starts_with(title) && l.contains("mIoU")) else {
        return Vec::new();
    };
    lines[at + 1..]
        .iter()
        .take_while(|l| !l.trim().is_empty() && !l.starts_with("wrote"))
        .map(|l| l.to_string())
        .collect()
}

fn configuration(work: &Path) -> Outcome {
    let run = || -> Result<String, String> {
        let d = RunConfig::default();
        let defaults = (d.model.stages, d.model.msrc_kernels.len(), d.model.msrc_kernels.clone());
        if defaults != (4, 3, vec![1, 3, 5]) {
            return Err(format!("defaults (N, K, kernels) = {defaults:?}"));
        }
        small_corpus(work)?;
        let base = ["--data", "data", "--config", "small.cfg", "--set", "train.epochs=1"];
        let kernels = mafn(&[&["ablate-kernels", "--out", "abl_k"][..], &base[..]].concat(), work)?;
        let modules = mafn(&[&["ablate-modules", "--out", "abl_m"][..], &base[..]].concat(), work)?;
        let k_rows = table_rows(&kernels, "kernels");
        let m_rows = table_rows(&modules, "modules");
        for row in k_rows.iter().chain(&m_rows) {
            println!("    {row}");
        }
        let want_k = ["[1]", "[1,3]", "[1,3,5]", "[1,3,5,7]"];
        let want_m = ["baseline", "+fusion", "+fusion+noise", "+fusion+noise+msrc"];
        let names = |rows: &[String]| -> Vec<String> {
            rows.iter().map(|r| r.split_whitespace().next().unwrap_or("").to_string()).collect()
        };
        if names(&k_rows) != want_k || names(&m_rows) != want_m {
            return Err(format!("unexpected table rows {:?} / {:?}", names(&k_rows), names(&m_rows)));
        }
        for f in ["abl_k/ablation_kernels.csv", "abl_m/ablation_modules.csv"] {
            let csv = std::fs::read_to_string(work.join(f)).map_err(|e| format!("{f}: {e}"))?;
            if csv.lines().count() != 5 {
                return Err(format!("{f} has {} lines", csv.lines().count()));
            }
        }
        Ok("defaults N=4, K=3, kernels [1,3,5]; 4-row kernel and module tables emitted".into())
    };
    match run() {
        Ok(summary) => Outcome {
            criterion: 9,
            passed: true,
            summary,
        },
        Err(summary) => Outcome {
            criterion: 9,
            passed: false,
            summary,
        },
    }
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut out = from_checks(1, verify::gradient_checks(verify::GRAD_SEEDS));
    let secs = started.elapsed().as_secs_f64();
    out.summary.push_str(&format!("; {secs:.1}s"));
    out.passed &= secs < verify::GRAD_SUITE_BUDGET_SECS;
    out
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temporary directory");
    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        println!(
            "criterion {} {}: {}",
            o.criterion,
            if o.passed { "PASS" } else { "FAIL" },
            o.summary
        );
        outcomes.push(o.passed);
    };
    record(gradient_suite());
    record(from_checks(2, verify::reduction_checks()));
    record(from_checks(3, verify::correlation_checks()));
    record(from_checks(4, verify::rotation_checks()));
    record(from_checks(5, verify::transcription_checks()));
    record(from_checks(6, verify::metric_checks()));
    record(toy_experiment(work.path()));
    record(determinism(work.path()));
    record(configuration(work.path()));
    let failed = outcomes.iter().filter(|&&p| !p).count();
    println!("acceptance: {} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use mafn_core::checkpoint::Checkpoint;
use mafn_core::dataset::{self, Dataset};
use mafn_core::metrics::MetricsReport;
use mafn_core::train::{self, TrainOptions, BEST_FILE};
use mafn_core::{model, RunConfig};

use crate::commands::{apply_overrides, load_data, print_epoch};
use crate::AblateArgs;

struct Row {
    name: String,
    params: usize,
    epochs: usize,
    best_epoch: usize,
    report: MetricsReport,
}

fn base_config(a: &AblateArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &a.overrides)?;
    Ok(cfg)
}

/// Trains one variant from scratch and scores its best checkpoint on the
/// validation split.
fn run_variant(name: &str, cfg: RunConfig, data: &Dataset, out: &Path) -> Result<Row> {
    cfg.validate()?;
    let params = model::init_params(&cfg, data.vocab.len());
    let count = params.count();
    println!("== {name} ({count} parameters)");
    let total = cfg.train.epochs;
    let opts = TrainOptions {
        threads: train::threads_from_env(),
        ..TrainOptions::default()
    };
    let ck = Checkpoint::new(cfg, data.vocab.clone(), params);
    let s = train::train(ck, data, out, &opts, |e| print_epoch(e, total))
        .with_context(|| format!("training variant {name}"))?;
    let best = Checkpoint::load(&out.join(BEST_FILE))?;
    let val = data.split(&best.config.data.val_split);
    let report = train::evaluate(&best.params, &best.config, &val, opts.threads)?;
    Ok(Row {
        name: name.to_string(),
        params: count,
        epochs: s.epochs,
        best_epoch: s.best_epoch,
        report,
    })
}

const HEAD: [&str; 7] = ["P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9", "oIoU", "mIoU"];

fn values(r: &MetricsReport) -> [f64; 7] {
    let p = r.precision;
    [p[0], p[1], p[2], p[3], p[4], r.oiou, r.miou]
}

fn table(title: &str, rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(title.len());
    let mut s = format!("{title:<width$} {:>9} {:>6}", "params", "best");
    for h in HEAD {
        let _ = write!(s, " {h:>7}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<width$} {:>9} {:>6}", r.name, r.params, format!("{}/{}", r.best_epoch, r.epochs));
        for v in values(&r.report) {
            let _ = write!(s, " {v:>7.4}");
        }
        s.push('\n');
    }
    s
}

fn csv(rows: &[Row]) -> String {
    let mut s = format!("variant,params,epochs,best_epoch,{}\n", HEAD.join(","));
    for r in rows {
        let _ = write!(s, "{},{},{},{}", r.name, r.params, r.epochs, r.best_epoch);
        for v in values(&r.report) {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

fn run(a: &AblateArgs, title: &str, file: &str, variants: Vec<(String, RunConfig)>) -> Result<()> {
    let data = load_data(&a.data)?;
    let mut rows = Vec::new();
    for (name, cfg) in variants {
        let dir = a.out.join(name.replace(|c: char| !c.is_ascii_alphanumeric(), "_"));
        rows.push(run_variant(&name, cfg, &data, &dir)?);
    }
    let text = table(title, &rows);
    print!("\n{text}");
    let path = a.out.join(file);
    dataset::write_file(&path, csv(&rows).as_bytes())?;
    dataset::write_file(&a.out.join(file.replace(".csv", ".txt")), text.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

pub const KERNEL_SETS: [&[usize]; 4] = [&[1], &[1, 3], &[1, 3, 5], &[1, 3, 5, 7]];

pub fn kernels(a: &AblateArgs) -> Result<()> {
    let base = base_config(a)?;
    let variants = KERNEL_SETS
        .iter()
        .map(|k| {
            let mut cfg = base.clone();
            cfg.model.msrc_kernels = k.to_vec();
            let name = format!("[{}]", k.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
            (name, cfg)
        })
        .collect();
    run(a, "kernels", "ablation_kernels.csv", variants)
}

pub fn modules(a: &AblateArgs) -> Result<()> {
    let base = base_config(a)?;
    let ladder = [
        ("baseline", true, true, true),
        ("+fusion", false, true, true),
        ("+fusion+noise", false, false, true),
        ("+fusion+noise+msrc", false, false, false),
    ];
    let variants = ladder
        .iter()
        .map(|&(name, no_fusion, no_noise, no_msrc)| {
            let mut cfg = base.clone();
            cfg.ablation.no_fusion = no_fusion;
            cfg.ablation.no_noise = no_noise;
            cfg.ablation.no_msrc = no_msrc;
            (name.to_string(), cfg)
        })
        .collect();
    run(a, "modules", "ablation_modules.csv", variants)
}

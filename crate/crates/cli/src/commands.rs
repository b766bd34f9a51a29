use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mafn_core::checkpoint::Checkpoint;
use mafn_core::dataset::{self, Dataset};
use mafn_core::nn::Ctx;
use mafn_core::synth::{self, SceneSpec};
use mafn_core::text::Vocabulary;
use mafn_core::train::{self, EpochLog, TrainOptions};
use mafn_core::{metrics, model, verify, RunConfig};
use mafn_tensor::fault::{with_fault, Fault};
use mafn_tensor::{Graph, Tensor};
use sha2::{Digest, Sha256};

use crate::{Overrides, Preset};

pub fn preset(p: Preset) -> RunConfig {
    match p {
        Preset::Default => RunConfig::default(),
        Preset::Experiment => RunConfig::toy_experiment(),
        Preset::Pretrained => RunConfig::pretrained_preset(),
    }
}

/// Scene parameters for a `size`-pixel image, scaled from the 48-pixel layout.
pub fn scene_spec(size: usize) -> SceneSpec {
    let base = SceneSpec::default();
    let s = size as f64 / base.size as f64;
    SceneSpec {
        size,
        min_radius: base.min_radius * s,
        max_radius: base.max_radius * s,
        margin: base.margin * s,
        ..base
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn gen_data(out: &Path, num: usize, val: Option<usize>, seed: u64, size: usize) -> Result<()> {
    if num == 0 {
        bail!("--num must be at least 1");
    }
    let val = val.unwrap_or((num / 5).max(1));
    let vocab = Vocabulary::standard();
    let items = dataset::generate(seed, &[("train", num), ("val", val)], &scene_spec(size), &vocab)?;
    dataset::write_dataset(out, &vocab, &items)?;
    let manifest = std::fs::read(out.join(dataset::MANIFEST))
        .with_context(|| format!("reading back {}", out.display()))?;
    let ceiling = |split: &str| {
        let metas: Vec<f64> = items
            .iter()
            .filter(|g| g.split == split)
            .map(|g| synth::blind_ceiling(&g.sample.meta))
            .collect();
        metas.iter().sum::<f64>() / metas.len() as f64
    };
    println!("wrote {num} train + {val} val samples ({size}x{size}, seed {seed}) to {}", out.display());
    println!("manifest sha256 {}", hex(&Sha256::digest(&manifest)));
    println!("language-blind mIoU ceiling: train {:.4}  val {:.4}", ceiling("train"), ceiling("val"));
    Ok(())
}

pub fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> Result<()> {
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.ablation.no_fusion |= o.no_fusion;
    cfg.ablation.no_noise |= o.no_noise;
    cfg.ablation.no_msrc |= o.no_msrc;
    cfg.ablation.zero_text |= o.zero_text;
    cfg.validate()?;
    Ok(())
}

pub fn load_data(dir: &Path) -> Result<Dataset> {
    dataset::read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn print_epoch(e: &EpochLog, total: usize) {
    println!(
        "epoch {:>3}/{total}  steps {:>3}  loss {:.4}  val mIoU {:.4}  oIoU {:.4}  {:.1}s{}",
        e.epoch,
        e.steps,
        e.mean_loss,
        e.metrics.miou,
        e.metrics.oiou,
        e.seconds,
        if e.improved { "  *" } else { "" }
    );
}

pub fn train(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
    o: &Overrides,
) -> Result<()> {
    let data = load_data(data_dir)?;
    let ckpt = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut cfg = RunConfig::from_file(config)?;
            apply_overrides(&mut cfg, o)?;
            if cfg != ck.config {
                bail!("{} was trained with a different configuration", path.display());
            }
            println!("resuming from {} at epoch {}", path.display(), ck.state.epoch);
            ck
        }
        None => {
            let mut cfg = RunConfig::from_file(config)?;
            apply_overrides(&mut cfg, o)?;
            let params = model::init_params(&cfg, data.vocab.len());
            Checkpoint::new(cfg, data.vocab.clone(), params)
        }
    };
    println!("parameters: {}", ckpt.params.count());
    let total = ckpt.config.train.epochs;
    let opts = TrainOptions {
        threads: train::threads_from_env(),
        stop_after,
    };
    let s = train::train(ckpt, &data, out, &opts, |e| print_epoch(e, total))?;
    println!(
        "done: {} epochs, {} steps, best val mIoU {:.4} at epoch {}; outputs in {}",
        s.epochs,
        s.steps,
        s.best_miou,
        s.best_epoch,
        s.out_dir.display()
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, data_dir: &Path, split: Option<&str>, csv: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = load_data(data_dir)?;
    let split = split.unwrap_or(&ck.config.data.val_split);
    let samples = data.split(split);
    if samples.is_empty() {
        bail!("split {split:?} has no samples in {}", data_dir.display());
    }
    let report = train::evaluate(&ck.params, &ck.config, &samples, train::threads_from_env())?;
    println!("{} samples from split {split:?}, checkpoint epoch {}", report.count, ck.state.epoch);
    println!("{}", report.table());
    let path: PathBuf = match csv {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("eval.csv"),
    };
    dataset::write_file(&path, train::csv_text(&[report.csv_row(ck.state.epoch)]).as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Channel-mean of `|x|` over a `[C, H, W]` map, stretched to 0..255.
fn feature_image(t: &Tensor<f32>) -> (usize, usize, Vec<u8>) {
    let &[c, h, w] = t.shape() else {
        unreachable!("feature maps are [C, H, W]")
    };
    let mean: Vec<f32> = (0..h * w)
        .map(|p| (0..c).map(|k| t.data()[k * h * w + p].abs()).sum::<f32>() / c as f32)
        .collect();
    let lo = mean.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = mean.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray = mean.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
    (w, h, gray)
}

pub fn infer(checkpoint: &Path, image: &Path, expr: &str, out: &Path, dump: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let tokens = ck.vocab.encode(expr)?;
    let (w, h, rgb) = dataset::read_ppm(image)?;
    let img = synth::image_tensor(&rgb, h, w);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &ck.params, &ck.config);
    let fwd = model::forward(&mut ctx, &img, &tokens)?;
    let logits = g.value(fwd.logits);
    let mask: Vec<u8> = metrics::binarize(logits)
        .into_iter()
        .map(|b| if b { 255 } else { 0 })
        .collect();
    dataset::write_file(out, &dataset::encode_pgm(w, h, &mask))?;
    let area = mask.iter().filter(|&&b| b == 255).count();
    println!("wrote {} ({w}x{h}, {area} foreground pixels)", out.display());
    if let Some(dir) = dump {
        let mut maps = vec![("embed".to_string(), fwd.embed)];
        for (i, s) in fwd.stages.iter().enumerate() {
            let i = i + 1;
            maps.push((format!("stage{i}_visual"), s.v_e));
            if let Some(corr) = s.corr {
                maps.push((format!("stage{i}_correlation"), corr));
            }
            maps.push((format!("stage{i}_fused"), s.f_e));
        }
        for (name, v) in &maps {
            let (fw, fh, gray) = feature_image(g.value(*v));
            dataset::write_file(&dir.join(format!("{name}.pgm")), &dataset::encode_pgm(fw, fh, &gray))?;
        }
        let prob: Vec<u8> = logits
            .data()
            .iter()
            .map(|&x| (255.0 / (1.0 + (-x).exp())).round() as u8)
            .collect();
        dataset::write_file(&dir.join("probability.pgm"), &dataset::encode_pgm(w, h, &prob))?;
        println!("wrote {} feature maps to {}", maps.len() + 1, dir.display());
    }
    Ok(())
}

pub fn verify(inject_sign_flip: bool) -> Result<()> {
    let checks = if inject_sign_flip {
        with_fault(Fault::SigmoidBackwardSign, || verify::gradient_checks(verify::GRAD_SEEDS))
    } else {
        verify::run_all()
    };
    print!("{}", verify::report(&checks));
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("{} checks failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}

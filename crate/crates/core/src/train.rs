//! Training loop, evaluation and the per-epoch metric log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mafn_tensor::Graph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, CSV_HEADER};
use crate::model;
use crate::nn::Ctx;
use crate::params::ParamStore;

pub const LOG_FILE: &str = "metrics.csv";
pub const BEST_FILE: &str = "best.ckpt";
pub const LAST_FILE: &str = "last.ckpt";

/// Worker count from `MAFN_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("MAFN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Seeded visiting order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    params: &ParamStore<f32>,
    cfg: &RunConfig,
    sample: &Sample,
) -> Result<(f64, Vec<(String, Vec<f32>)>)> {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, params, cfg);
    let out = model::forward(&mut ctx, &sample.image, &sample.record.tokens)?;
    let loss = model::loss(&mut g, out.logits, &sample.mask)?;
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?;
    let list = grads
        .params(&g)
        .into_iter()
        .map(|(name, t)| (name, t.into_data()))
        .collect();
    Ok((value, list))
}

/// Runs `f` over `items` on up to `threads` workers; results keep item order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean loss and mean gradients over a batch, summed in batch order.
pub fn batch_gradients(
    params: &ParamStore<f32>,
    cfg: &RunConfig,
    batch: &[&Sample],
    threads: usize,
) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let per = par_map(batch, threads, |s| sample_gradients(params, cfg, s))?;
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    let mut acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (loss, grads) in per {
        total += loss;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    for g in acc.values_mut() {
        g.iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total / batch.len() as f64, acc))
}

/// Thresholded predictions for every sample.
pub fn predict_masks(
    params: &ParamStore<f32>,
    cfg: &RunConfig,
    samples: &[&Sample],
    threads: usize,
) -> Result<Vec<Vec<bool>>> {
    par_map(samples, threads, |s| {
        let logits = model::predict(params, cfg, &s.image, &s.record.tokens)?;
        Ok(metrics::binarize(&logits))
    })
}

pub fn evaluate(
    params: &ParamStore<f32>,
    cfg: &RunConfig,
    samples: &[&Sample],
    threads: usize,
) -> Result<MetricsReport> {
    let preds = predict_masks(params, cfg, samples, threads)?;
    let truths: Vec<Vec<bool>> = samples.iter().map(|s| metrics::mask_bits(&s.mask)).collect();
    metrics::compute_metrics(&preds, &truths)
}

/// Progress report handed to the caller after every epoch.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub metrics: MetricsReport,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub threads: usize,
    /// Stop after this many epochs in this invocation (simulates an
    /// interruption; the run can be resumed from `last.ckpt`).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub best_miou: f64,
    pub best_epoch: usize,
    pub last: MetricsReport,
    pub out_dir: PathBuf,
}

pub fn csv_text(rows: &[String]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Trains from `start` (a fresh or resumed checkpoint) on the configured
/// train split, evaluating on the validation split after every epoch.
/// Writes `metrics.csv`, `last.ckpt` and `best.ckpt` under `out`.
pub fn train(
    mut ckpt: Checkpoint,
    data: &Dataset,
    out: &Path,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainSummary> {
    let cfg = ckpt.config.clone();
    let train_set = data.split(&cfg.data.train_split);
    let val_set = data.split(&cfg.data.val_split);
    if train_set.is_empty() {
        return Err(Error::Train(format!("split {:?} is empty", cfg.data.train_split)));
    }
    if val_set.is_empty() {
        return Err(Error::Train(format!("split {:?} is empty", cfg.data.val_split)));
    }
    if ckpt.vocab != data.vocab {
        return Err(Error::Train("checkpoint vocabulary differs from the dataset's".into()));
    }
    for s in train_set.iter().chain(&val_set) {
        let &[h, w] = s.mask.shape() else { unreachable!() };
        if h != cfg.data.image_size || w != cfg.data.image_size {
            return Err(Error::Train(format!(
                "sample {}/{} is {h}x{w}, config expects {}",
                s.record.split, s.record.index, cfg.data.image_size
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let threads = opts.threads.max(1);
    let mut last = None;
    let mut ran = 0;
    while ckpt.state.epoch < cfg.train.epochs {
        if opts.stop_after.is_some_and(|n| ran >= n) {
            break;
        }
        if cfg.train.patience > 0 && ckpt.state.since_best >= cfg.train.patience {
            break;
        }
        if cfg.train.target_miou > 0.0 && ckpt.state.best_miou() >= cfg.train.target_miou {
            break;
        }
        let started = std::time::Instant::now();
        let epoch = ckpt.state.epoch + 1;
        let order = epoch_order(cfg.train.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for idx in order.chunks(cfg.train.batch) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train_set[i]).collect();
            let (loss, grads) = batch_gradients(&ckpt.params, &cfg, &batch, threads)?;
            ckpt.optimizer.step(&mut ckpt.params, &grads)?;
            loss_sum += loss;
            steps += 1;
        }
        let report = evaluate(&ckpt.params, &cfg, &val_set, threads)?;
        let st = &mut ckpt.state;
        st.epoch = epoch;
        st.step = ckpt.optimizer.step;
        st.log.push(report.csv_row(epoch));
        let improved = st.log.len() == 1 || report.miou > st.best_miou();
        if improved {
            st.best_miou_bits = report.miou.to_bits();
            st.best_epoch = epoch;
            st.since_best = 0;
        } else {
            st.since_best += 1;
        }
        crate::dataset::write_file(&out.join(LOG_FILE), csv_text(&ckpt.state.log).as_bytes())?;
        ckpt.save(&out.join(LAST_FILE))?;
        if improved {
            ckpt.save(&out.join(BEST_FILE))?;
        }
        on_epoch(&EpochLog {
            epoch,
            steps,
            mean_loss: loss_sum / steps as f64,
            metrics: report.clone(),
            improved,
            seconds: started.elapsed().as_secs_f64(),
        });
        last = Some(report);
        ran += 1;
    }
    let last = match last {
        Some(r) => r,
        None => evaluate(&ckpt.params, &cfg, &val_set, threads)?,
    };
    Ok(TrainSummary {
        epochs: ckpt.state.epoch,
        steps: ckpt.optimizer.step,
        best_miou: ckpt.state.best_miou(),
        best_epoch: ckpt.state.best_epoch,
        last,
        out_dir: out.to_path_buf(),
    })
}

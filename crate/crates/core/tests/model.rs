mod common;

use common::*;
use mafn_core::nn::Ctx;
use mafn_core::swin::WindowGeometry;
use mafn_core::{model, ParamStore, RunConfig};
use mafn_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const TOKENS: [u32; 3] = [1, 5, 8];

fn mask(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![24, 24], |_| rng.random_bool(0.3) as u8 as f64)
}

fn loss(p: &ParamStore<f64>, cfg: &RunConfig, img: &Tensor<f64>, m: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, p, cfg);
    let out = model::forward(&mut ctx, img, &TOKENS).unwrap();
    let l = model::loss(&mut g, out.logits, m).unwrap();
    g.value(l).data()[0]
}

fn nudge(p: &ParamStore<f64>, name: &str, idx: usize, delta: f64) -> ParamStore<f64> {
    let mut q = p.clone();
    let t = p.get(name).unwrap();
    let mut data = t.data().to_vec();
    data[idx] += delta;
    q.set(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
    q
}

#[test]
fn full_model_gradient_spot_check() {
    let cfg = tiny();
    let p = params(&cfg, 1);
    let img = randn(&[3, 24, 24], 2);
    let m = mask(3);
    let mut g = Graph::new();
    let grads = {
        let mut ctx = Ctx::new(&mut g, &p, &cfg);
        let out = model::forward(&mut ctx, &img, &TOKENS).unwrap();
        let l = model::loss(&mut g, out.logits, &m).unwrap();
        g.backward(l).unwrap().params(&g)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (name, grad) = &grads[rng.random_range(0..grads.len())];
        let idx = rng.random_range(0..grad.numel());
        let numeric = (loss(&nudge(&p, name, idx, h), &cfg, &img, &m)
            - loss(&nudge(&p, name, idx, -h), &cfg, &img, &m))
            / (2.0 * h);
        let analytic = grad.data()[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-3, "{name}[{idx}]: analytic {analytic:e} numeric {numeric:e}");
        worst = worst.max(rel);
    }
    assert!(worst.is_finite());
}

fn golden_digest(cfg: &RunConfig) -> String {
    let p: ParamStore<f64> = model::init_params(cfg, VOCAB).cast();
    let img = mafn_core::reference::map(&randn(&[3, 24, 24], 5), |x| 0.5 + 0.25 * x);
    let logits = model::predict(&p, cfg, &img, &TOKENS).unwrap();
    let text: Vec<String> = logits.data().iter().map(|x| format!("{:.3}", x + 0.0)).collect();
    let digest = Sha256::digest(text.join(",").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn golden_logits_checksum() {
    assert_eq!(
        golden_digest(&tiny()),
        "d30e2a077428087d4703a56d27824c7a9c4b319c9fb46f68801b78926f903117"
    );
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let cfg = tiny();
    let p = params(&cfg, 6);
    let img = randn(&[3, 24, 24], 7);
    let a = model::predict(&p, &cfg, &img, &TOKENS).unwrap();
    let b = model::predict(&p, &cfg, &img, &TOKENS).unwrap();
    assert_eq!(a.shape(), &[1, 24, 24]);
    assert_eq!(a.data(), b.data());
    let c = model::predict(&p, &cfg, &img, &[2, 6, 9]).unwrap();
    assert!(a.max_abs_diff(&c) > 1e-9);
}

#[test]
fn wrong_image_shape_is_rejected() {
    let cfg = tiny();
    let p = params(&cfg, 8);
    assert!(model::predict(&p, &cfg, &randn(&[1, 24, 24], 9), &TOKENS).is_err());
}

fn count_with(f: impl Fn(&mut RunConfig)) -> (usize, ParamStore<f32>) {
    let mut cfg = RunConfig::default();
    f(&mut cfg);
    let p = model::init_params(&cfg, VOCAB);
    (p.count(), p)
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn conv(i: usize, o: usize, k: usize) -> usize {
    i * o * k * k + o
}

#[test]
fn ablations_remove_exactly_their_parameters() {
    let cfg = RunConfig::default();
    let m = &cfg.model;
    let (full, _) = count_with(|_| {});

    let mut noise = 0;
    for i in 1..=m.stages {
        let c = m.stage_channels(i);
        let e = m.stage_extent(cfg.data.image_size, i);
        let t = WindowGeometry::new(e, e, m.window).tokens_per_window();
        let hidden = (c / 2).max(1);
        noise += 2 * t * c + linear(c, hidden) + linear(hidden, 1);
    }
    let (n, p) = count_with(|c| c.ablation.no_noise = true);
    assert_eq!(full - n, noise);
    assert!(!p.names().any(|n| n.contains("noise") || n.contains("disc")));

    let side = 2 * m.displacement + 1;
    let nb = m.fusion_windows.len();
    let mut fusion = 0;
    for i in 1..=m.stages {
        let c = m.stage_channels(i);
        let hidden = (c / 4).max(4);
        fusion += conv(2 * c + side * side, c, 3)
            + m.fusion_windows.iter().map(|&k| conv(c, c, k)).sum::<usize>()
            + linear(nb * c, nb)
            + 2 * conv(c, c, 3)
            + linear(c, hidden)
            + linear(hidden, c);
    }
    let (n, p) = count_with(|c| c.ablation.no_fusion = true);
    assert_eq!(full - n, fusion);
    assert!(!p.names().any(|n| n.contains(".fuse.") || n.contains(".ci.")));

    let (n, p) = count_with(|c| c.ablation.no_msrc = true);
    assert!(n < full);
    assert!(!p.names().any(|n| n.contains("msrc")));

    let (n, p) = count_with(|c| c.ablation.zero_text = true);
    assert!(n < full);
    assert!(!p.names().any(|n| n.starts_with("text.")));

    let (all, _) = count_with(|c| {
        c.ablation.no_noise = true;
        c.ablation.no_fusion = true;
        c.ablation.no_msrc = true;
    });
    assert!(all < full - noise - fusion);
}

#[test]
fn msrc_parameters_scale_with_the_kernel_list() {
    let counts: Vec<usize> = [vec![1], vec![1, 3], vec![1, 3, 5], vec![1, 3, 5, 7]]
        .into_iter()
        .map(|k| count_with(|c| c.model.msrc_kernels = k.clone()).0)
        .collect();
    let mw = RunConfig::default().model.msrc_width;
    let decoders = RunConfig::default().model.stages - 1;
    for (w, k) in counts.windows(2).zip([3, 5, 7]) {
        assert_eq!(w[1] - w[0], decoders * mw * mw * k * k);
    }
}

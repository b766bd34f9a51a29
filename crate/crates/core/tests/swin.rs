mod common;

use common::*;
use mafn_core::config::TrainConfig;
use mafn_core::model;
use mafn_core::nn::Ctx;
use mafn_core::optim::AdamW;
use mafn_core::swin::{self, effective_window, WindowGeometry};
use mafn_core::ParamStore;
use mafn_tensor::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn zero_image_embeds_to_bias() {
    let cfg = tiny();
    let p = params(&cfg, 1);
    let img = Tensor::zeros(vec![3, 24, 24]);
    let out = eval(&p, &cfg, &[&img], |ctx, v| swin::patch_embed(ctx, v[0]));
    let b = p.get("embed.b").unwrap();
    let hw = 36;
    assert_eq!(out.shape(), &[cfg.model.channels, 6, 6]);
    for (i, &x) in out.data().iter().enumerate() {
        assert_eq!(x, b.data()[i / hw]);
    }
}

#[test]
fn default_input_embeds_to_twelve_by_twelve() {
    let mut cfg = tiny();
    cfg.data.image_size = 48;
    let p = params(&cfg, 2);
    let img = randn(&[3, 48, 48], 3);
    let out = eval(&p, &cfg, &[&img], |ctx, v| swin::patch_embed(ctx, v[0]));
    assert_eq!(out.shape(), &[cfg.model.channels, 12, 12]);
}

#[test]
fn embedding_is_linear_before_bias() {
    let cfg = tiny();
    let mut p = params(&cfg, 4);
    zero(&mut p, "embed.b");
    let img = randn(&[3, 24, 24], 5);
    let doubled = Tensor::from_fn(vec![3, 24, 24], |i| 2.0 * img.data()[i]);
    let a = eval(&p, &cfg, &[&img], |ctx, v| swin::patch_embed(ctx, v[0]));
    let b = eval(&p, &cfg, &[&doubled], |ctx, v| swin::patch_embed(ctx, v[0]));
    let twice = Tensor::from_fn(a.shape().to_vec(), |i| 2.0 * a.data()[i]);
    assert_close(&b, &twice, 1e-12);
}

#[test]
fn indivisible_image_is_rejected() {
    let cfg = tiny();
    let p = params(&cfg, 6);
    let img = randn(&[3, 22, 24], 7);
    let r = mafn_core::verify::eval_graph(&p, &cfg, &[&img], |ctx, v| swin::patch_embed(ctx, v[0]));
    assert!(r.is_err());
}

fn scores(p: &ParamStore<f64>, f: &Tensor<f64>) -> Tensor<f64> {
    let cfg = tiny();
    eval(p, &cfg, &[f], |ctx, v| swin::discriminator_scores(ctx, "stage1.attn", v[0]))
}

#[test]
fn identical_tokens_get_uniform_scores() {
    let cfg = tiny();
    let p = params(&cfg, 8);
    let row = randn(&[1, 4], 9);
    let f = Tensor::from_fn(vec![5, 4], |i| row.data()[i % 4]);
    for &s in scores(&p, &f).data() {
        assert!((s - 0.2).abs() < 1e-12);
    }
}

#[test]
fn single_token_scores_one() {
    let cfg = tiny();
    let p = params(&cfg, 10);
    assert_eq!(scores(&p, &randn(&[1, 4], 11)).data(), &[1.0]);
}

#[test]
fn random_window_scores_sum_to_one() {
    let mut cfg = tiny();
    cfg.model.channels = 8;
    let p = params(&cfg, 12);
    let s = scores(&p, &randn(&[4, 8], 13));
    assert_eq!(s.shape(), &[4]);
    assert!((s.sum() - 1.0).abs() < 1e-6);
}

#[test]
fn single_token_window_reduces_to_value_row() {
    let mut cfg = tiny();
    cfg.hooks.force_unit_discriminator = true;
    let c = 4;
    let mut p = ParamStore::new();
    for name in ["wq", "wk", "wv"] {
        p.insert(format!("stage1.attn.{name}"), randn(&[c, c], name.len() as u64 + 20));
    }
    p.insert("stage1.attn.noise_k", Tensor::zeros(vec![1, c]));
    p.insert("stage1.attn.noise_v", Tensor::zeros(vec![1, c]));
    let f = randn(&[1, c], 14);
    let out = eval(&p, &cfg, &[&f], |ctx, v| swin::noisy_window_attention(ctx, "stage1.attn", v[0]));
    let wv = p.get("stage1.attn.wv").unwrap();
    let fv = mafn_core::reference::matmul(&f, wv);
    assert_close(&out, &mafn_core::reference::add(&fv, &f), 1e-12);
}

#[test]
fn keys_and_values_have_two_rows_per_token() {
    let cfg = tiny();
    let p = params(&cfg, 15);
    let t = WindowGeometry::new(6, 6, cfg.model.window).tokens_per_window();
    let f = randn(&[t, cfg.model.channels], 16);
    let mut g = Graph::new();
    let fv = g.constant(f);
    let mut ctx = Ctx::new(&mut g, &p, &cfg);
    swin::noisy_window_attention(&mut ctx, "stage1.attn", fv).unwrap();
    let concat_rows: Vec<usize> = g
        .vars()
        .filter(|&v| g.op_name(v) == "concat")
        .map(|v| g.shape(v)[0])
        .collect();
    assert_eq!(concat_rows, vec![2 * t, 2 * t]);
}

#[test]
fn window_geometry_examples() {
    assert_eq!(WindowGeometry::new(12, 12, 4).num_windows(), 9);
    assert_eq!(effective_window(3, 4), 3);
    assert_eq!(effective_window(6, 4), 3);
    assert_eq!(effective_window(12, 4), 4);
    assert_eq!(effective_window(7, 4), 4);
    assert_eq!(WindowGeometry::new(7, 7, 4).num_windows(), 4);
}

#[test]
fn stages_halve_spatial_extent_and_are_deterministic() {
    let cfg = tiny();
    let p = params(&cfg, 17);
    let mut x = randn(&[cfg.model.channels, 6, 6], 18);
    for i in 1..=cfg.model.stages {
        let a = eval(&p, &cfg, &[&x], |ctx, v| swin::stage_forward(ctx, i, v[0]));
        let b = eval(&p, &cfg, &[&x], |ctx, v| swin::stage_forward(ctx, i, v[0]));
        assert_eq!(a.data(), b.data());
        let (c, h, w) = swin::stage_dims(&cfg, i);
        assert_eq!(a.shape(), &[c, h, w]);
        if i > 1 {
            assert_eq!(h, x.shape()[1].div_ceil(2));
        }
        x = a;
    }
}

#[test]
fn noise_parameters_receive_updates() {
    let cfg = tiny();
    let mut p = model::init_params(&cfg, VOCAB);
    let img: Tensor<f32> = randn(&[3, 24, 24], 19).cast();
    let mask = Tensor::from_fn(vec![24, 24], |i| if i % 5 == 0 { 1.0f32 } else { 0.0 });
    let mut g = Graph::new();
    let grads = {
        let mut ctx = Ctx::new(&mut g, &p, &cfg);
        let out = model::forward(&mut ctx, &img, &[1, 5, 8]).unwrap();
        let loss = model::loss(&mut g, out.logits, &mask).unwrap();
        g.backward(loss).unwrap().params(&g)
    };
    let grads = grads.into_iter().map(|(n, t)| (n, t.into_data())).collect();
    let before = p.clone();
    AdamW::new(&TrainConfig::default()).step(&mut p, &grads).unwrap();
    for i in 1..=cfg.model.stages {
        for name in ["noise_k", "noise_v"] {
            let key = format!("stage{i}.attn.{name}");
            let a = before.get(&key).unwrap();
            let b = p.get(&key).unwrap();
            assert!(a.max_abs_diff(b) > 0.0, "{key} unchanged");
        }
    }
}

proptest! {
    #[test]
    fn partition_then_merge_is_identity(h in 1usize..10, w in 1usize..10, window in 1usize..6, c in 1usize..4) {
        let geo = WindowGeometry::new(h, w, window);
        let x = randn(&[c, h, w], (h * 100 + w * 10 + c) as u64);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = geo.tokens_per_window() * geo.num_windows();
        let tok = g.gather(xv, geo.partition_index(c), &[t, c]).unwrap();
        let back = g.gather(tok, geo.merge_index(c), &[c, h, w]).unwrap();
        prop_assert_eq!(g.value(back).data(), x.data());
    }
}

mod common;

use common::*;
use mafn_core::cfm::{self, offset_channel};
use mafn_core::nn::Ctx;
use mafn_core::reference as oracle;
use mafn_core::{ParamStore, RunConfig};
use mafn_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn stage1_map(cfg: &RunConfig, seed: u64) -> Tensor<f64> {
    randn(&[cfg.model.channels, 6, 6], seed)
}

fn text(cfg: &RunConfig, m: usize, seed: u64) -> Tensor<f64> {
    randn(&[cfg.model.text_width, m], seed)
}

fn scaled(t: &Tensor<f64>, a: f64) -> Tensor<f64> {
    oracle::map(t, |x| x * a)
}

#[test]
fn zero_integration_kernels_halve_the_input() {
    let cfg = tiny();
    let mut p = params(&cfg, 1);
    zero(&mut p, "cfm1.vis0.w");
    zero(&mut p, "cfm1.vis1.w");
    let v = stage1_map(&cfg, 2);
    let out = eval(&p, &cfg, &[&v], |ctx, x| cfm::visual_integration(ctx, "cfm1", x[0]));
    assert_close(&out, &scaled(&v, 0.5), 0.0);
}

#[test]
fn zero_input_integrates_to_zero() {
    let cfg = tiny();
    let p = params(&cfg, 3);
    let v = Tensor::zeros(vec![cfg.model.channels, 6, 6]);
    let out = eval(&p, &cfg, &[&v], |ctx, x| cfm::visual_integration(ctx, "cfm1", x[0]));
    assert!(out.data().iter().all(|&x| x == 0.0));
}

#[test]
fn gates_pass_zero_and_close_with_zero_weights() {
    let cfg = tiny();
    let mut p = params(&cfg, 4);
    for prefix in ["cfm1.gate_v", "cfm1.gate_l"] {
        let z = Tensor::zeros(vec![cfg.model.channels, 6, 6]);
        let out = eval(&p, &cfg, &[&z], |ctx, x| cfm::gate(ctx, prefix, x[0]));
        assert!(out.data().iter().all(|&x| x == 0.0));
        zero(&mut p, &format!("{prefix}.l2.w"));
        zero(&mut p, &format!("{prefix}.l2.b"));
        let v = stage1_map(&cfg, 5);
        let out = eval(&p, &cfg, &[&v], |ctx, x| cfm::gate(ctx, prefix, x[0]));
        assert!(out.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn single_text_token_attends_fully() {
    let cfg = tiny();
    let c = cfg.model.channels;
    let mut p = params(&cfg, 6);
    let eye = Tensor::from_fn(vec![c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    p.set("cfm1.mm.we", eye.clone()).unwrap();
    p.set("cfm1.mm.proj.w", eye).unwrap();
    zero(&mut p, "cfm1.mm.proj.b");
    let v = stage1_map(&cfg, 7);
    let t = text(&cfg, 1, 8);
    let out = eval(&p, &cfg, &[&v, &t], |ctx, x| cfm::multimodal_attention(ctx, "cfm1.mm", x[0], x[1]));
    let val = oracle::matmul(&oracle::transpose(&t), p.get("cfm1.mm.wlv").unwrap());
    let want = Tensor::from_fn(vec![c, 6, 6], |i| val.data()[i / 36] * v.data()[i]);
    assert_close(&out, &want, 1e-12);
}

#[test]
fn zero_modulation_leaves_projection_bias() {
    let cfg = tiny();
    let mut p = params(&cfg, 9);
    zero(&mut p, "cfm1.mm.we");
    let v = stage1_map(&cfg, 10);
    let t = text(&cfg, 3, 11);
    let out = eval(&p, &cfg, &[&v, &t], |ctx, x| cfm::multimodal_attention(ctx, "cfm1.mm", x[0], x[1]));
    let b = p.get("cfm1.mm.proj.b").unwrap();
    for (i, &x) in out.data().iter().enumerate() {
        assert_eq!(x, b.data()[i / 36]);
    }
}

fn corr(a: &Tensor<f64>, b: &Tensor<f64>, d: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = cfm::correlation_volume(&mut g, va, vb, d).unwrap();
    g.value(out).clone()
}

#[test]
fn correlation_of_ones() {
    let ones = Tensor::full(vec![1, 4, 5], 1.0);
    let v = corr(&ones, &ones, 0);
    assert_eq!(v.shape(), &[1, 4, 5]);
    assert!(v.data().iter().all(|&x| x == 1.0));

    let v = corr(&ones, &ones, 1);
    assert_eq!(v.shape(), &[9, 4, 5]);
    let at = |ch: usize, y: usize, x: usize| v.data()[(ch * 4 + y) * 5 + x];
    for ch in 0..9 {
        for y in 1..3 {
            for x in 1..4 {
                assert_eq!(at(ch, y, x), 1.0);
            }
        }
    }
    assert_eq!(at(offset_channel(1, -1, -1), 0, 0), 0.0);
    assert_eq!(at(offset_channel(1, 1, 1), 3, 4), 0.0);
    assert_eq!(at(offset_channel(1, 1, 1), 0, 0), 1.0);
    assert_eq!(at(offset_channel(1, -1, 0), 0, 2), 0.0);
    assert_eq!(at(offset_channel(1, 0, -1), 0, 2), 1.0);
}

#[test]
fn correlation_matches_loop_oracle_on_4x6x6() {
    let a = randn(&[4, 6, 6], 12);
    let b = randn(&[4, 6, 6], 13);
    assert_close(&corr(&a, &b, 2), &oracle::correlation(&a, &b, 2), 1e-12);
}

proptest! {
    #[test]
    fn correlation_is_bilinear_and_mirror_symmetric(
        c in 1usize..5, h in 1usize..8, w in 1usize..8, d in 0usize..4, alpha in -3.0f64..3.0, seed in 0u64..1000,
    ) {
        let a = randn(&[c, h, w], seed);
        let b = randn(&[c, h, w], seed + 1);
        let v = corr(&a, &b, d);
        let side = 2 * d + 1;
        prop_assert_eq!(v.shape(), &[side * side, h, w]);
        let va = corr(&scaled(&a, alpha), &b, d);
        prop_assert!(va.max_abs_diff(&scaled(&v, alpha)) < 1e-9);
        let swapped = corr(&b, &a, d);
        let di = d as isize;
        for dx in -di..=di {
            for dy in -di..=di {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (sy, sx) = (y + dx, x + dy);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let here = v.data()[(offset_channel(d, dx, dy) * h + y as usize) * w + x as usize];
                        let there = swapped.data()[(offset_channel(d, -dx, -dy) * h + sy as usize) * w + sx as usize];
                        prop_assert!((here - there).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

fn fusion_stack(cfg: &RunConfig, seed: u64) -> Tensor<f64> {
    let side = 2 * cfg.model.displacement + 1;
    randn(&[2 * cfg.model.channels + side * side, 6, 6], seed)
}

fn smooth(p: &ParamStore<f64>, stack: &Tensor<f64>) -> Tensor<f64> {
    oracle::conv_named(p, "cfm1.fuse.smooth", stack, true).unwrap()
}

#[test]
fn zero_branches_leave_the_smoothed_residual() {
    let cfg = tiny();
    let mut p = params(&cfg, 14);
    for j in 0..cfg.model.fusion_windows.len() {
        zero(&mut p, &format!("cfm1.fuse.branch{j}.w"));
        zero(&mut p, &format!("cfm1.fuse.branch{j}.b"));
    }
    let s = fusion_stack(&cfg, 15);
    let out = eval(&p, &cfg, &[&s], |ctx, x| cfm::multi_window_fusion(ctx, "cfm1.fuse", x[0]));
    assert_close(&out, &smooth(&p, &s), 1e-12);
}

#[test]
fn one_hot_coefficients_select_a_branch() {
    let mut cfg = tiny();
    let p = params(&cfg, 16);
    let s = fusion_stack(&cfg, 17);
    for b in 0..cfg.model.fusion_windows.len() {
        cfg.hooks.force_one_hot_coefficients = Some(b);
        let out = eval(&p, &cfg, &[&s], |ctx, x| cfm::multi_window_fusion(ctx, "cfm1.fuse", x[0]));
        let sm = smooth(&p, &s);
        let branch = oracle::conv_named(&p, &format!("cfm1.fuse.branch{b}"), &sm, true).unwrap();
        assert_close(&out, &oracle::add(&sm, &branch), 1e-12);
    }
}

#[test]
fn fusion_coefficients_sum_to_one() {
    let cfg = tiny();
    let p = params(&cfg, 18);
    let s = fusion_stack(&cfg, 19);
    let alpha = eval(&p, &cfg, &[&s], |ctx, x| {
        let sm = ctx.conv(x[0], "cfm1.fuse.smooth", true)?;
        let branches = (0..3)
            .map(|j| ctx.conv(sm, &format!("cfm1.fuse.branch{j}"), true))
            .collect::<mafn_core::Result<Vec<_>>>()?;
        cfm::fusion_coefficients(ctx, "cfm1.fuse", &branches)
    });
    assert_eq!(alpha.shape(), &[3]);
    assert!((alpha.sum() - 1.0).abs() < 1e-6);
    assert!(alpha.data().iter().all(|&a| a > 0.0));
}

#[test]
fn intensify_is_residual_with_unit_attention_and_zero_convs() {
    let mut cfg = tiny();
    cfg.hooks.force_unit_ca = true;
    let mut p = params(&cfg, 20);
    for name in ["conv1", "conv2"] {
        zero(&mut p, &format!("cfm1.ci.{name}.w"));
        zero(&mut p, &format!("cfm1.ci.{name}.b"));
    }
    let v = stage1_map(&cfg, 21);
    let out = eval(&p, &cfg, &[&v], |ctx, x| cfm::channel_intensify(ctx, "cfm1.ci", x[0]));
    assert_close(&out, &v, 0.0);
}

#[test]
fn intensify_of_zero_is_a_bias_map() {
    let cfg = tiny();
    let p = params(&cfg, 22);
    let z = Tensor::zeros(vec![cfg.model.channels, 6, 6]);
    let out = eval(&p, &cfg, &[&z], |ctx, x| cfm::channel_intensify(ctx, "cfm1.ci", x[0]));
    // Zero padding makes the border differ; the interior is constant per channel.
    for ch in 0..cfg.model.channels {
        let first = out.data()[ch * 36 + 2 * 6 + 2];
        for y in 2..4 {
            for x in 2..4 {
                assert!((out.data()[ch * 36 + y * 6 + x] - first).abs() < 1e-12);
            }
        }
    }
    assert_close(&out, &oracle::channel_intensify(&p, "cfm1.ci", &z, false).unwrap(), 1e-12);
}

fn layer(cfg: &RunConfig, p: &ParamStore<f64>, i: usize, f: &Tensor<f64>, t: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let (fv, tv) = (g.constant(f.clone()), g.constant(t.clone()));
    let tr = {
        let mut ctx = Ctx::new(&mut g, p, cfg);
        cfm::cfm_layer(&mut ctx, i, fv, tv).unwrap()
    };
    let val = |v| g.value(v).clone();
    (val(tr.v_e), val(tr.t_v), val(tr.t_l), val(tr.f_e))
}

#[test]
fn zeroed_fusion_path_returns_stage_output() {
    let mut cfg = tiny();
    cfg.hooks.zero_fusion_path = true;
    let p = params(&cfg, 23);
    let (v_e, _, _, f_e) = layer(&cfg, &p, 1, &stage1_map(&cfg, 24), &text(&cfg, 3, 25));
    assert_eq!(v_e.data(), f_e.data());
}

#[test]
fn layers_halve_extent_after_the_first() {
    let cfg = tiny();
    let p = params(&cfg, 26);
    let t = text(&cfg, 3, 27);
    let mut f = stage1_map(&cfg, 28);
    for i in 1..=cfg.model.stages {
        let (_, _, _, out) = layer(&cfg, &p, i, &f, &t);
        if i > 1 {
            assert_eq!(out.shape()[1], f.shape()[1].div_ceil(2));
        }
        assert_eq!(out.shape()[0], cfg.model.stage_channels(i));
        f = out;
    }
}

#[test]
fn output_depends_on_text() {
    let cfg = tiny();
    let p = params(&cfg, 29);
    let f = stage1_map(&cfg, 30);
    let (_, _, _, a) = layer(&cfg, &p, 1, &f, &text(&cfg, 3, 31));
    let (_, _, _, b) = layer(&cfg, &p, 1, &f, &text(&cfg, 3, 32));
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn gated_maps_never_exceed_their_inputs() {
    let cfg = tiny();
    let p = params(&cfg, 33);
    let f = stage1_map(&cfg, 34);
    let t = text(&cfg, 3, 35);
    let (v_e, t_v, _, _) = layer(&cfg, &p, 1, &f, &t);
    let g_v = oracle::visual_integration(&p, "cfm1", &v_e, 2).unwrap();
    for (a, b) in t_v.data().iter().zip(g_v.data()) {
        assert!(a.abs() < b.abs() || *b == 0.0);
    }
    for (a, b) in g_v.data().iter().zip(v_e.data()) {
        assert!(a.abs() < b.abs() || *b == 0.0);
    }
}

#[test]
fn variants_match_the_monolithic_oracle() {
    let base = tiny();
    let mut variants = vec![base.clone()];
    let mut c = base.clone();
    c.ablation.no_fusion = true;
    variants.push(c);
    let mut c = base.clone();
    c.ablation.no_noise = true;
    variants.push(c);
    let mut c = base.clone();
    c.hooks.force_one_hot_coefficients = Some(2);
    c.hooks.force_unit_ca = true;
    c.hooks.force_unit_discriminator = true;
    variants.push(c);
    for (k, cfg) in variants.iter().enumerate() {
        let p = params(cfg, 40 + k as u64);
        let t = text(cfg, 4, 50);
        let mut f = stage1_map(cfg, 51);
        for i in 1..=cfg.model.stages {
            let (_, _, _, out) = layer(cfg, &p, i, &f, &t);
            let want = oracle::cfm_layer(&p, cfg, i, &f, &t).unwrap();
            let scale = want.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
            let rel = out.max_abs_diff(&want) / scale;
            assert!(rel <= 1e-5, "variant {k} layer {i}: relative error {rel:e}");
            f = out;
        }
    }
}


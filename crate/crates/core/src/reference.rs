//! Plain-loop `f64` implementations of the network's formulas, written
//! without the graph so they can serve as independent oracles for it.
//!
//! Every function reads parameters by the same names the graph modules use.

use mafn_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::Result;
use crate::params::ParamStore;

type P = ParamStore<f64>;

fn get<'a>(p: &'a P, name: &str) -> Result<&'a Tensor<f64>> {
    Ok(p.get(name)?.as_ref())
}

fn dims3(t: &Tensor<f64>) -> (usize, usize, usize) {
    match *t.shape() {
        [c, h, w] => (c, h, w),
        ref s => panic!("expected [C, H, W], got {s:?}"),
    }
}

fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![c, h, w], data).expect("shape")
}

/// Direct convolution with zero padding; optional bias.
pub fn conv2d(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, w) = dims3(x);
    let &[co, kci, kh, kw] = k.shape() else { panic!("kernel rank") };
    assert_eq!(ci, kci);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xx in 0..wo {
                let mut s = bias.map_or(0.0, |b| b.data()[o]);
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += xd[(c * h + iy as usize) * w + ix as usize]
                                * kd[((o * ci + c) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = s;
            }
        }
    }
    t3(co, ho, wo, out)
}

/// Same-padded convolution using `{prefix}.w` and optionally `{prefix}.b`.
pub fn conv_named(p: &P, prefix: &str, x: &Tensor<f64>, bias: bool) -> Result<Tensor<f64>> {
    let k = get(p, &format!("{prefix}.w"))?;
    let b = if bias { Some(get(p, &format!("{prefix}.b"))?) } else { None };
    let pad = (k.shape()[2] - 1) / 2;
    Ok(conv2d(x, k, b, 1, pad))
}

pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let &[n, k] = a.shape() else { panic!("matmul lhs") };
    let &[k2, m] = b.shape() else { panic!("matmul rhs") };
    assert_eq!(k, k2);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * m + j]).sum();
        }
    }
    Tensor::new(vec![n, m], out).expect("shape")
}

pub fn transpose(a: &Tensor<f64>) -> Tensor<f64> {
    let &[n, m] = a.shape() else { panic!("transpose rank") };
    Tensor::from_fn(vec![m, n], |i| a.data()[(i % n) * m + i / n])
}

pub fn map(a: &Tensor<f64>, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("shape")
}

pub fn zip(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape")
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    zip(a, b, |x, y| x + y)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows(a: &Tensor<f64>) -> Tensor<f64> {
    let m = *a.shape().last().expect("rank");
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(m) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        row.iter_mut().zip(e).for_each(|(r, v)| *r = v / s);
    }
    Tensor::new(a.shape().to_vec(), out).expect("shape")
}

/// `softmax(Q·Kᵀ / sqrt(d)) · V` in two explicit steps.
pub fn attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let d = q.shape()[1] as f64;
    let logits = map(&matmul(q, &transpose(k)), |x| x / d.sqrt());
    matmul(&softmax_rows(&logits), v)
}

/// `x·W + b` over rows, parameters `{prefix}.w` / `{prefix}.b`.
pub fn linear(p: &P, prefix: &str, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let y = matmul(x, get(p, &format!("{prefix}.w"))?);
    let b = get(p, &format!("{prefix}.b"))?;
    let m = b.numel();
    Ok(Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] + b.data()[i % m]))
}

pub fn layer_norm(p: &P, prefix: &str, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let g = get(p, &format!("{prefix}.g"))?;
    let b = get(p, &format!("{prefix}.b"))?;
    let d = g.numel();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for (j, r) in row.iter_mut().enumerate() {
            *r = (*r - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j];
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("shape"))
}

/// `[C, H, W]` -> `[H·W, C]`.
pub fn tokens(x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = dims3(x);
    Tensor::from_fn(vec![h * w, c], |i| x.data()[(i % c) * h * w + i / c])
}

/// `[H·W, C]` -> `[C, H, W]`.
pub fn untokens(x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let c = x.shape()[1];
    Tensor::from_fn(vec![c, h, w], |i| x.data()[(i % (h * w)) * c + i / (h * w)])
}

/// Local correlation `(1/C) Σ_c a(c,h,w) · b(c,h+Δx,w+Δy)`, zero out of range.
pub fn correlation(a: &Tensor<f64>, b: &Tensor<f64>, d: usize) -> Tensor<f64> {
    let (c, h, w) = dims3(a);
    let side = 2 * d + 1;
    let di = d as isize;
    let mut out = vec![0.0; side * side * h * w];
    for ddx in -di..=di {
        for ddy in -di..=di {
            let ch = ((ddx + di) as usize) * side + (ddy + di) as usize;
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y as isize + ddx, x as isize + ddy);
                    let mut s = 0.0;
                    for k in 0..c {
                        let bv = if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            b.data()[(k * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                        s += a.data()[(k * h + y) * w + x] * bv;
                    }
                    out[(ch * h + y) * w + x] = s / c as f64;
                }
            }
        }
    }
    t3(side * side, h, w, out)
}

fn sample_zero(plane: &[f64], k: usize, r: f64, c: f64) -> f64 {
    let read = |ri: f64, ci: f64| {
        if ri < 0.0 || ci < 0.0 || ri > (k - 1) as f64 || ci > (k - 1) as f64 {
            0.0
        } else {
            plane[ri as usize * k + ci as usize]
        }
    };
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let mut v = 0.0;
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            if wr * wc != 0.0 {
                v += wr * wc * read(r0 + dr, c0 + dc);
            }
        }
    }
    v
}

/// Bilinear rotation of every `k×k` plane about its centre: output cell
/// `(y, x)` samples row `−sinθ·(x−c) + cosθ·(y−c) + c`, column
/// `cosθ·(x−c) + sinθ·(y−c) + c`.
pub fn rotate_kernel(w: &Tensor<f64>, theta: f64) -> Tensor<f64> {
    let k = w.shape()[3];
    let c = (k - 1) as f64 / 2.0;
    let mut out = vec![0.0; w.numel()];
    for (plane, o) in w.data().chunks(k * k).zip(out.chunks_mut(k * k)) {
        for y in 0..k {
            for x in 0..k {
                let (u, v) = (x as f64 - c, y as f64 - c);
                let row = -theta.sin() * u + theta.cos() * v + c;
                let col = theta.cos() * u + theta.sin() * v + c;
                o[y * k + x] = sample_zero(plane, k, row, col);
            }
        }
    }
    Tensor::new(w.shape().to_vec(), out).expect("shape")
}

/// Quarter turn of each `k×k` grid: `out[y][x] = w[k−1−x][y]`.
pub fn quarter_turn(w: &Tensor<f64>) -> Tensor<f64> {
    let k = w.shape()[3];
    let mut out = vec![0.0; w.numel()];
    for (plane, o) in w.data().chunks(k * k).zip(out.chunks_mut(k * k)) {
        for y in 0..k {
            for x in 0..k {
                o[y * k + x] = plane[(k - 1 - x) * k + y];
            }
        }
    }
    Tensor::new(w.shape().to_vec(), out).expect("shape")
}

/// Noisy window attention for one window `f: [T, C]`.
pub fn noisy_window_attention(p: &P, prefix: &str, f: &Tensor<f64>, unit_scores: bool) -> Result<Tensor<f64>> {
    let wq = get(p, &format!("{prefix}.wq"))?;
    let wk = get(p, &format!("{prefix}.wk"))?;
    let wv = get(p, &format!("{prefix}.wv"))?;
    let dk = get(p, &format!("{prefix}.noise_k"))?;
    let dv = get(p, &format!("{prefix}.noise_v"))?;
    let (t, c) = (f.shape()[0], f.shape()[1]);
    let scores: Vec<f64> = if unit_scores {
        vec![1.0; t]
    } else {
        let h = map(&linear(p, &format!("{prefix}.disc1"), f)?, |x| x.max(0.0));
        let z = linear(p, &format!("{prefix}.disc2"), &h)?;
        let row = Tensor::new(vec![1, t], z.data().to_vec()).expect("shape");
        softmax_rows(&row).into_data()
    };
    let scaled = Tensor::from_fn(vec![t, c], |i| f.data()[i] * scores[i / c]);
    let q = matmul(f, wq);
    let mut kd = matmul(&add(dk, f), wk).into_data();
    kd.extend(matmul(&scaled, wk).into_data());
    let mut vd = matmul(&add(dv, f), wv).into_data();
    vd.extend(matmul(f, wv).into_data());
    let k = Tensor::new(vec![2 * t, c], kd).expect("shape");
    let v = Tensor::new(vec![2 * t, c], vd).expect("shape");
    Ok(add(&attention(&q, &k, &v), f))
}

/// `attention(F·W_q, F·W_k, F·W_v) + F`.
pub fn plain_window_attention(p: &P, prefix: &str, f: &Tensor<f64>) -> Result<Tensor<f64>> {
    let q = matmul(f, get(p, &format!("{prefix}.wq"))?);
    let k = matmul(f, get(p, &format!("{prefix}.wk"))?);
    let v = matmul(f, get(p, &format!("{prefix}.wv"))?);
    Ok(add(&attention(&q, &k, &v), f))
}

/// Backbone stage `i` (patch merge for `i > 1`, windowed attention, token MLP).
pub fn stage_forward(p: &P, cfg: &RunConfig, i: usize, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let pre = format!("stage{i}");
    let x = if i > 1 {
        let (c, h, w) = dims3(x);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut st = vec![0.0; 4 * c * oh * ow];
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                        if sy < h && sx < w {
                            st[((q * c + ch) * oh + y) * ow + xx] = x.data()[(ch * h + sy) * w + sx];
                        }
                    }
                }
            }
        }
        conv_named(p, &format!("{pre}.merge"), &t3(4 * c, oh, ow, st), false)?
    } else {
        x.clone()
    };
    let (c, h, w) = dims3(&x);
    let wh = crate::swin::effective_window(h, cfg.model.window);
    let ww = crate::swin::effective_window(w, cfg.model.window);
    let mut y = vec![0.0; c * h * w];
    for wy in 0..h.div_ceil(wh) {
        for wx in 0..w.div_ceil(ww) {
            let mut f = vec![0.0; wh * ww * c];
            for ty in 0..wh {
                for tx in 0..ww {
                    let (yy, xx) = (wy * wh + ty, wx * ww + tx);
                    if yy < h && xx < w {
                        for ch in 0..c {
                            f[(ty * ww + tx) * c + ch] = x.data()[(ch * h + yy) * w + xx];
                        }
                    }
                }
            }
            let f = Tensor::new(vec![wh * ww, c], f).expect("shape");
            let attn = format!("{pre}.attn");
            let o = if cfg.ablation.no_noise {
                plain_window_attention(p, &attn, &f)?
            } else {
                noisy_window_attention(p, &attn, &f, cfg.hooks.force_unit_discriminator)?
            };
            for ty in 0..wh {
                for tx in 0..ww {
                    let (yy, xx) = (wy * wh + ty, wx * ww + tx);
                    if yy < h && xx < w {
                        for ch in 0..c {
                            y[(ch * h + yy) * w + xx] = o.data()[(ty * ww + tx) * c + ch];
                        }
                    }
                }
            }
        }
    }
    let tok = tokens(&t3(c, h, w, y));
    let z = layer_norm(p, &format!("{pre}.ln"), &tok)?;
    let z = map(&linear(p, &format!("{pre}.mlp1"), &z)?, gelu);
    let z = linear(p, &format!("{pre}.mlp2"), &z)?;
    Ok(untokens(&add(&tok, &z), h, w))
}

/// Sigmoid-gated visual integration.
pub fn visual_integration(p: &P, prefix: &str, v: &Tensor<f64>, branches: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = dims3(v);
    let mut s = vec![0.0; h * w];
    for j in 0..branches {
        let y = conv_named(p, &format!("{prefix}.vis{j}"), v, false)?;
        for (pos, acc) in s.iter_mut().enumerate() {
            *acc += (0..c).map(|ch| y.data()[ch * h * w + pos]).sum::<f64>() / c as f64;
        }
    }
    Ok(Tensor::from_fn(vec![c, h, w], |i| sigmoid(s[i % (h * w)]) * v.data()[i]))
}

/// Gate `tanh(L2(relu(L1(x)))) ⊙ x` with 1×1 maps.
pub fn gate(p: &P, prefix: &str, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let h = map(&conv_named(p, &format!("{prefix}.l1"), x, true)?, |v| v.max(0.0));
    let m = map(&conv_named(p, &format!("{prefix}.l2"), &h, true)?, f64::tanh);
    Ok(zip(&m, x, |a, b| a * b))
}

/// Text-conditioned attention in token space.
pub fn multimodal_attention(p: &P, prefix: &str, v: &Tensor<f64>, text: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (_, h, w) = dims3(v);
    let x = tokens(v);
    let ft = transpose(text);
    let q = matmul(&x, get(p, &format!("{prefix}.weq"))?);
    let k = matmul(&ft, get(p, &format!("{prefix}.wlk"))?);
    let val = matmul(&ft, get(p, &format!("{prefix}.wlv"))?);
    let e = matmul(&x, get(p, &format!("{prefix}.we"))?);
    let a = zip(&attention(&q, &k, &val), &e, |a, b| a * b);
    Ok(untokens(&linear(p, &format!("{prefix}.proj"), &a)?, h, w))
}

fn mean_pool(x: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = dims3(x);
    (0..c)
        .map(|ch| x.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect()
}

/// Multi-window fusion of `stack` with `branches` window convolutions.
pub fn multi_window_fusion(p: &P, prefix: &str, stack: &Tensor<f64>, branches: usize, one_hot: Option<usize>) -> Result<Tensor<f64>> {
    let s = conv_named(p, &format!("{prefix}.smooth"), stack, true)?;
    let outs = (0..branches)
        .map(|j| conv_named(p, &format!("{prefix}.branch{j}"), &s, true))
        .collect::<Result<Vec<_>>>()?;
    let alpha: Vec<f64> = match one_hot {
        Some(b) => (0..branches).map(|j| if j == b { 1.0 } else { 0.0 }).collect(),
        None => {
            let pooled: Vec<f64> = outs.iter().flat_map(mean_pool).collect();
            let row = Tensor::new(vec![1, pooled.len()], pooled).expect("shape");
            softmax_rows(&linear(p, &format!("{prefix}.coef"), &row)?).into_data()
        }
    };
    let mut out = s.data().to_vec();
    for (b, a) in outs.iter().zip(&alpha) {
        out.iter_mut().zip(b.data()).for_each(|(o, v)| *o += a * v);
    }
    Ok(Tensor::new(s.shape().to_vec(), out).expect("shape"))
}

/// conv–ReLU–conv, channel attention, residual.
pub fn channel_intensify(p: &P, prefix: &str, x: &Tensor<f64>, unit_ca: bool) -> Result<Tensor<f64>> {
    let (c, h, w) = dims3(x);
    let y = map(&conv_named(p, &format!("{prefix}.conv1"), x, true)?, |v| v.max(0.0));
    let y = conv_named(p, &format!("{prefix}.conv2"), &y, true)?;
    let ca: Vec<f64> = if unit_ca {
        vec![1.0; c]
    } else {
        let row = Tensor::new(vec![1, c], mean_pool(&y)).expect("shape");
        let hdn = map(&linear(p, &format!("{prefix}.ca1"), &row)?, |v| v.max(0.0));
        map(&linear(p, &format!("{prefix}.ca2"), &hdn)?, sigmoid).into_data()
    };
    Ok(Tensor::from_fn(vec![c, h, w], |i| y.data()[i] * ca[i / (h * w)] + x.data()[i]))
}

/// `F_e = V_e + T_e` for fusion layer `i`, given the stage output.
pub fn cfm_from_stage(p: &P, cfg: &RunConfig, i: usize, v_e: &Tensor<f64>, text: &Tensor<f64>) -> Result<Tensor<f64>> {
    let pre = format!("cfm{i}");
    let m = &cfg.model;
    let g_v = visual_integration(p, &pre, v_e, m.vis_kernels.len())?;
    let t_v = gate(p, &format!("{pre}.gate_v"), &g_v)?;
    let g_l = multimodal_attention(p, &format!("{pre}.mm"), v_e, text)?;
    let t_l = gate(p, &format!("{pre}.gate_l"), &g_l)?;
    if cfg.hooks.zero_fusion_path {
        return Ok(v_e.clone());
    }
    let t_e = if cfg.ablation.no_fusion {
        add(&t_v, &t_l)
    } else {
        let corr = correlation(&t_v, &t_l, m.displacement);
        let (c, h, w) = dims3(&t_v);
        let side = 2 * m.displacement + 1;
        let mut st = t_v.data().to_vec();
        st.extend_from_slice(t_l.data());
        st.extend_from_slice(corr.data());
        let stack = t3(2 * c + side * side, h, w, st);
        let fused = multi_window_fusion(
            p,
            &format!("{pre}.fuse"),
            &stack,
            m.fusion_windows.len(),
            cfg.hooks.force_one_hot_coefficients,
        )?;
        channel_intensify(p, &format!("{pre}.ci"), &fused, cfg.hooks.force_unit_ca)?
    };
    Ok(add(v_e, &t_e))
}

/// Whole fusion layer `i` including its backbone stage.
pub fn cfm_layer(p: &P, cfg: &RunConfig, i: usize, f_prev: &Tensor<f64>, text: &Tensor<f64>) -> Result<Tensor<f64>> {
    let v_e = stage_forward(p, cfg, i, f_prev)?;
    cfm_from_stage(p, cfg, i, &v_e, text)
}

/// Adaptive rotated convolution by linearity: `Σ_i λ_i · (V * rotate(W_i, θ_i))`.
pub fn arc_conv(p: &P, prefix: &str, v: &Tensor<f64>, theta: &[f64], lambda: &[f64]) -> Result<Tensor<f64>> {
    let bank = get(p, &format!("{prefix}.w"))?;
    let shape = &bank.shape()[1..];
    let per: usize = shape.iter().product();
    let pad = (shape[2] - 1) / 2;
    let mut out: Option<Tensor<f64>> = None;
    for i in 0..bank.shape()[0] {
        let wi = Tensor::new(shape.to_vec(), bank.data()[i * per..(i + 1) * per].to_vec()).expect("shape");
        let r = map(&conv2d(v, &rotate_kernel(&wi, theta[i]), None, 1, pad), |x| x * lambda[i]);
        out = Some(match out {
            Some(o) => add(&o, &r),
            None => r,
        });
    }
    Ok(out.expect("non-empty bank"))
}

/// Predicted `(θ, λ)` of a kernel bank.
pub fn predict_angles_weights(p: &P, prefix: &str, v: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let dw = get(p, &format!("{prefix}.dw"))?;
    let (c, h, w) = dims3(v);
    let mut pooled = vec![0.0; c];
    for (ch, slot) in pooled.iter_mut().enumerate() {
        let plane = Tensor::new(vec![1, h, w], v.data()[ch * h * w..(ch + 1) * h * w].to_vec()).expect("shape");
        let k = Tensor::new(vec![1, 1, 3, 3], dw.data()[ch * 9..(ch + 1) * 9].to_vec()).expect("shape");
        *slot = conv2d(&plane, &k, None, 1, 1).data().iter().sum::<f64>() / (h * w) as f64;
    }
    let row = Tensor::new(vec![1, c], pooled).expect("shape");
    let theta = map(&linear(p, &format!("{prefix}.theta"), &row)?, |z| z.tanh() * std::f64::consts::FRAC_PI_2);
    let lambda = softmax_rows(&linear(p, &format!("{prefix}.lambda"), &row)?);
    Ok((theta.into_data(), lambda.into_data()))
}

/// `V_k = V_{k−1} * S_k + ARC(V_{k−1})`.
pub fn msrc_layer(p: &P, prefix: &str, kidx: usize, v: &Tensor<f64>, forced: Option<(&[f64], &[f64])>) -> Result<Tensor<f64>> {
    let s = conv_named(p, &format!("{prefix}.s{kidx}"), v, false)?;
    let bank = format!("{prefix}.bank");
    let (theta, lambda) = match forced {
        Some((t, l)) => (t.to_vec(), l.to_vec()),
        None => predict_angles_weights(p, &bank, v)?,
    };
    Ok(add(&s, &arc_conv(p, &bank, v, &theta, &lambda)?))
}

//! Top-down decoder with multi-scale refinement convolution: stacked layers
//! that each add a fixed-size convolution to an adaptive rotated convolution
//! whose kernels are rotated by predicted angles and mixed by predicted
//! weights.

use std::f64::consts::FRAC_PI_2;

use mafn_tensor::{CustomOp, Graph, Scalar, Tensor, Var};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{decl_conv, decl_linear, Ctx, RELU_GAIN};
use crate::params::{Init, ParamBuilder};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Bilinear taps of one output cell of a rotated `k×k` kernel.
#[derive(Clone, Copy, Debug)]
struct RotTap {
    /// Source cells `(row, col)` of the four corners, `None` outside the kernel.
    src: [Option<usize>; 4],
    weight: [f64; 4],
    /// Derivative of each corner weight with respect to θ.
    dweight: [f64; 4],
}

fn rotation_taps(k: usize, theta: f64) -> Vec<RotTap> {
    let c = (k as f64 - 1.0) / 2.0;
    let (s, co) = theta.sin_cos();
    let mut taps = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let sx = co * dx + s * dy + c;
            let sy = -s * dx + co * dy + c;
            let dsx = -s * dx + co * dy;
            let dsy = -co * dx - s * dy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let corners = [(y0, x0), (y0, x0 + 1.0), (y0 + 1.0, x0), (y0 + 1.0, x0 + 1.0)];
            let weight = [
                (1.0 - fy) * (1.0 - fx),
                (1.0 - fy) * fx,
                fy * (1.0 - fx),
                fy * fx,
            ];
            let dfx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
            let dfy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
            let mut src = [None; 4];
            let mut dweight = [0.0; 4];
            for i in 0..4 {
                let (r, q) = corners[i];
                if r >= 0.0 && q >= 0.0 && r < k as f64 && q < k as f64 {
                    src[i] = Some(r as usize * k + q as usize);
                }
                dweight[i] = dfx[i] * dsx + dfy[i] * dsy;
            }
            taps.push(RotTap {
                src,
                weight,
                dweight,
            });
        }
    }
    taps
}

struct RotateKernel {
    inputs: [Var; 2],
    k: usize,
    theta: f64,
}

impl<T: Scalar> CustomOp<T> for RotateKernel {
    fn name(&self) -> &'static str {
        "rotate_kernel"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let w = graph.value(self.inputs[0]).data();
        let kk = self.k * self.k;
        let taps = rotation_taps(self.k, self.theta);
        let mut gw = vec![T::zero(); w.len()];
        let mut gtheta = 0.0;
        for (plane, (wp, gp)) in w.chunks(kk).zip(grad_out.chunks(kk)).enumerate() {
            let gwp = &mut gw[plane * kk..(plane + 1) * kk];
            for (tap, &g) in taps.iter().zip(gp) {
                for i in 0..4 {
                    if let Some(s) = tap.src[i] {
                        gwp[s] += g * T::lit(tap.weight[i]);
                        gtheta += g.as_f64() * tap.dweight[i] * wp[s].as_f64();
                    }
                }
            }
        }
        vec![Some(gw), Some(vec![T::lit(gtheta)])]
    }
}

/// Rotates every `k×k` plane of `w: [C_out, C_in, k, k]` by angle `theta`
/// (a single-element node) about the kernel centre, resampling bilinearly.
/// Output cell `(y, x)` reads the source at
/// `(−sinθ·dx + cosθ·dy + c, cosθ·dx + sinθ·dy + c)` (row, column) with
/// `(dx, dy) = (x − c, y − c)`; source cells outside the kernel read as 0.
pub fn rotate_kernel<T: Scalar>(g: &mut Graph<T>, w: Var, theta: Var) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    let &[_, _, k, k2] = shape.as_slice() else {
        return Err(Error::Model(format!("rotate_kernel: expected [O, I, k, k], got {shape:?}")));
    };
    if k != k2 || g.value(theta).numel() != 1 {
        return Err(Error::Model(format!(
            "rotate_kernel: kernel {shape:?} with angle of shape {:?}",
            g.shape(theta)
        )));
    }
    let th = g.value(theta).data()[0].as_f64();
    let taps = rotation_taps(k, th);
    let kk = k * k;
    let src = g.value(w).data();
    let mut out = vec![T::zero(); src.len()];
    for (plane, op) in src.chunks(kk).zip(out.chunks_mut(kk)) {
        for (tap, o) in taps.iter().zip(op.iter_mut()) {
            let mut acc = T::zero();
            for i in 0..4 {
                if let Some(s) = tap.src[i] {
                    if tap.weight[i] != 0.0 {
                        acc += T::lit(tap.weight[i]) * plane[s];
                    }
                }
            }
            *o = acc;
        }
    }
    let value = Tensor::new(shape, out)?;
    Ok(g.custom(
        value,
        Box::new(RotateKernel {
            inputs: [w, theta],
            k,
            theta: th,
        }),
    )?)
}

fn level_width(cfg: &RunConfig, j: usize) -> usize {
    cfg.model.stage_channels(j + 1) + cfg.model.stage_channels(j)
}

pub(crate) fn declare(b: &mut ParamBuilder, cfg: &RunConfig) {
    let m = &cfg.model;
    for j in (1..m.stages).rev() {
        let cx = level_width(cfg, j);
        let p = format!("dec{j}");
        if !cfg.ablation.no_msrc {
            let mw = m.msrc_width;
            let q = format!("{p}.msrc");
            decl_conv(b, &format!("{q}.expand"), mw, cx, 1, true, 1.0);
            let scale = 1.0 / (m.msrc_kernels.len() as f64).sqrt();
            for (kidx, &k) in m.msrc_kernels.iter().enumerate() {
                decl_conv(b, &format!("{q}.s{kidx}"), mw, mw, k, false, scale);
            }
            let ak = m.arc_kernel_size;
            b.declare(
                format!("{q}.bank.w"),
                &[m.arc_kernels, mw, mw, ak, ak],
                Init::FanIn {
                    fan_in: mw * ak * ak,
                    gain: scale,
                },
            );
            b.declare(
                format!("{q}.bank.dw"),
                &[mw, 1, 3, 3],
                Init::FanIn { fan_in: 9, gain: 1.0 },
            );
            decl_linear(b, &format!("{q}.bank.theta"), mw, m.arc_kernels, 0.1);
            decl_linear(b, &format!("{q}.bank.lambda"), mw, m.arc_kernels, 0.1);
            decl_conv(b, &format!("{q}.contract"), cx, mw, 1, true, 1.0);
        }
        decl_conv(b, &format!("{p}.conv"), m.stage_channels(j), cx, 3, false, RELU_GAIN);
        b.declare(format!("{p}.norm.g"), &[m.stage_channels(j)], Init::Ones);
        b.declare(format!("{p}.norm.b"), &[m.stage_channels(j)], Init::Zeros);
    }
    decl_conv(b, "head", 1, m.channels, 1, true, 1.0);
}

/// Angles `θ ∈ (−π/2, π/2)` and softmax weights `λ`, both `[n]`, predicted
/// from a depthwise convolution followed by global average pooling.
pub fn predict_angles_weights<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    v: Var,
) -> Result<(Var, Var)> {
    let hooks = &ctx.cfg.hooks;
    let (forced_theta, forced_lambda) = (hooks.force_theta.clone(), hooks.force_lambda.clone());
    let needs_predictor = forced_theta.is_none() || forced_lambda.is_none();
    let pooled = if needs_predictor {
        let dw = ctx.p(&format!("{prefix}.dw"))?;
        let y = ctx.g.depthwise_conv2d(v, dw)?;
        let p = ctx.g.global_avg_pool(y)?;
        let c = ctx.g.shape(p)[0];
        Some(ctx.g.reshape(p, &[1, c])?)
    } else {
        None
    };
    let theta = match forced_theta {
        Some(t) => ctx.constant(Tensor::from_f64(vec![t.len()], &t)?),
        None => {
            let z = ctx.linear(pooled.expect("predictor"), &format!("{prefix}.theta"))?;
            let z = ctx.g.tanh(z)?;
            let z = ctx.g.scale(z, FRAC_PI_2)?;
            let n = ctx.g.shape(z)[1];
            ctx.g.reshape(z, &[n])?
        }
    };
    let lambda = match forced_lambda {
        Some(l) => ctx.constant(Tensor::from_f64(vec![l.len()], &l)?),
        None => {
            let z = ctx.linear(pooled.expect("predictor"), &format!("{prefix}.lambda"))?;
            let z = ctx.g.softmax(z)?;
            let n = ctx.g.shape(z)[1];
            ctx.g.reshape(z, &[n])?
        }
    };
    Ok((theta, lambda))
}

/// The rotated, weighted kernel `Σ_i λ_i · rotate(W_i, θ_i)`.
pub fn combined_kernel<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    theta: Var,
    lambda: Var,
) -> Result<Var> {
    let bank = ctx.p(&format!("{prefix}.w"))?;
    let shape = ctx.g.shape(bank).to_vec();
    let n = shape[0];
    if ctx.g.shape(theta) != [n] || ctx.g.shape(lambda) != [n] {
        return Err(Error::Model(format!(
            "bank of {n} kernels with θ {:?} and λ {:?}",
            ctx.g.shape(theta),
            ctx.g.shape(lambda)
        )));
    }
    let mut acc: Option<Var> = None;
    for i in 0..n {
        let wi = ctx.g.narrow(bank, 0, i, 1)?;
        let wi = ctx.g.reshape(wi, &shape[1..])?;
        let ti = ctx.pick(theta, i)?;
        let rot = rotate_kernel(ctx.g, wi, ti)?;
        let li = ctx.pick(lambda, i)?;
        let term = ctx.g.mul_scalar_var(rot, li)?;
        acc = Some(match acc {
            Some(a) => ctx.g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Model("empty kernel bank".into()))
}

/// Adaptive rotated convolution `R = V * Σ_i λ_i W_i′`.
pub fn arc_conv<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, v: Var) -> Result<Var> {
    let (theta, lambda) = predict_angles_weights(ctx, prefix, v)?;
    let kernel = combined_kernel(ctx, prefix, theta, lambda)?;
    let k = ctx.g.shape(kernel)[2];
    Ok(ctx.g.conv2d(v, kernel, 1, (k - 1) / 2)?)
}

/// `V_k = V_{k−1} * S_k + ARC(V_{k−1})`.
pub fn msrc_layer<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, kidx: usize, v: Var) -> Result<Var> {
    let s = ctx.conv(v, &format!("{prefix}.s{kidx}"), false)?;
    if ctx.cfg.hooks.zero_arc {
        return Ok(s);
    }
    let r = arc_conv(ctx, &format!("{prefix}.bank"), v)?;
    Ok(ctx.g.add(s, r)?)
}

/// Point-wise expand, stacked refinement layers, sum of every layer output,
/// point-wise contract back to the input width.
pub fn msrc_block<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let mut v = ctx.conv(x, &format!("{prefix}.expand"), true)?;
    let mut sum: Option<Var> = None;
    for kidx in 0..ctx.cfg.model.msrc_kernels.len() {
        v = msrc_layer(ctx, prefix, kidx, v)?;
        sum = Some(match sum {
            Some(s) => ctx.g.add(s, v)?,
            None => v,
        });
    }
    let sum = sum.ok_or_else(|| Error::Model("empty refinement kernel list".into()))?;
    ctx.conv(sum, &format!("{prefix}.contract"), true)
}

/// 3×3 convolution, per-channel normalisation, ReLU.
pub fn dec<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let y = ctx.conv(x, &format!("{prefix}.conv"), false)?;
    let gamma = ctx.p(&format!("{prefix}.norm.g"))?;
    let beta = ctx.p(&format!("{prefix}.norm.b"))?;
    let y = ctx.g.channel_norm(y, gamma, beta, NORM_EPS)?;
    Ok(ctx.g.relu(y)?)
}

/// Decodes stage maps `[F_e^1 .. F_e^N]` (finest first) into mask logits
/// `[1, out_h, out_w]`.
pub fn top_down_decode<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    stages: &[Var],
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let n = stages.len();
    if n < 2 {
        return Err(Error::Model(format!("decoder needs at least 2 stages, got {n}")));
    }
    let mut used = vec![0usize; n];
    let mut g = stages[n - 1];
    used[n - 1] += 1;
    for j in (1..n).rev() {
        let f = stages[j - 1];
        used[j - 1] += 1;
        let (_, h, w) = ctx.shape3(f)?;
        let up = ctx.g.bilinear_resize(g, h, w)?;
        let x = ctx.g.concat(&[up, f], 0)?;
        let p = format!("dec{j}");
        let x = if ctx.cfg.ablation.no_msrc {
            x
        } else {
            msrc_block(ctx, &format!("{p}.msrc"), x)?
        };
        g = dec(ctx, &p, x)?;
    }
    if used.iter().any(|&u| u != 1) {
        return Err(Error::Model(format!("decoder stage usage {used:?}")));
    }
    let logits = ctx.conv(g, "head", true)?;
    Ok(ctx.g.bilinear_resize(logits, out_h, out_w)?)
}

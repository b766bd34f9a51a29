//! Correlation fusion layer: visual integration and multimodal attention
//! branches with their gates, a correlation volume between the two gated
//! maps, multi-window fusion and channel intensification.

use mafn_tensor::{CustomOp, Graph, Scalar, Tensor, Var};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{decl_conv, decl_linear, Ctx, RELU_GAIN};
use crate::params::{Init, ParamBuilder};
use crate::swin;

/// Channel index of offset `(dx, dy)` in a correlation volume of radius `d`.
pub fn offset_channel(d: usize, dx: isize, dy: isize) -> usize {
    let side = 2 * d + 1;
    (dx + d as isize) as usize * side + (dy + d as isize) as usize
}

/// Calls `visit(output index, position, shifted position)` for every
/// in-range (offset, position) pair.
fn correlate(h: usize, w: usize, d: usize, mut visit: impl FnMut(usize, usize, usize)) {
    let side = 2 * d + 1;
    for ox in 0..side {
        for oy in 0..side {
            let ch = ox * side + oy;
            for y in 0..h {
                let sy = y as isize + ox as isize - d as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + oy as isize - d as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let (p, q) = (y * w + x, sy as usize * w + sx as usize);
                    visit(ch * h * w + p, p, q);
                }
            }
        }
    }
}

struct Correlation {
    inputs: [Var; 2],
    c: usize,
    h: usize,
    w: usize,
    d: usize,
}

impl<T: Scalar> CustomOp<T> for Correlation {
    fn name(&self) -> &'static str {
        "correlation_volume"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let a = graph.value(self.inputs[0]).data();
        let b = graph.value(self.inputs[1]).data();
        let (c, hw) = (self.c, self.h * self.w);
        let inv = T::lit(1.0 / c as f64);
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); b.len()];
        correlate(self.h, self.w, self.d, |o, p, q| {
            let g = grad_out[o] * inv;
            for ch in 0..c {
                ga[ch * hw + p] += g * b[ch * hw + q];
                gb[ch * hw + q] += g * a[ch * hw + p];
            }
        });
        vec![Some(ga), Some(gb)]
    }
}

/// Correlation volume `[(2d+1)², H, W]` between two `[C, H, W]` maps:
/// channel `(Δx+d)(2d+1) + (Δy+d)` at `(h, w)` holds
/// `(1/C) Σ_c a(c, h, w) · b(c, h+Δx, w+Δy)`, zero where the shifted
/// position leaves the map.
pub fn correlation_volume<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, d: usize) -> Result<Var> {
    let &[c, h, w] = g.shape(a) else {
        return Err(Error::Model(format!(
            "correlation_volume: expected [C, H, W], got {:?}",
            g.shape(a)
        )));
    };
    if g.shape(b) != g.shape(a) {
        return Err(Error::Model(format!(
            "correlation_volume: shape mismatch {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let side = 2 * d + 1;
    let hw = h * w;
    let (av, bv) = (g.value(a).data(), g.value(b).data());
    let inv = T::lit(1.0 / c as f64);
    let mut out = vec![T::zero(); side * side * hw];
    correlate(h, w, d, |o, p, q| {
        let mut s = T::zero();
        for ch in 0..c {
            s += av[ch * hw + p] * bv[ch * hw + q];
        }
        out[o] = s * inv;
    });
    let value = Tensor::new(vec![side * side, h, w], out)?;
    Ok(g.custom(
        value,
        Box::new(Correlation {
            inputs: [a, b],
            c,
            h,
            w,
            d,
        }),
    )?)
}

fn decl_gate(b: &mut ParamBuilder, prefix: &str, c: usize) {
    decl_conv(b, &format!("{prefix}.l1"), c, c, 1, true, RELU_GAIN);
    decl_conv(b, &format!("{prefix}.l2"), c, c, 1, true, 1.0);
}

pub(crate) fn declare(b: &mut ParamBuilder, cfg: &RunConfig, i: usize) {
    let m = &cfg.model;
    let (c, _, _) = swin::stage_dims(cfg, i);
    let p = format!("cfm{i}");
    for (j, &k) in m.vis_kernels.iter().enumerate() {
        decl_conv(b, &format!("{p}.vis{j}"), c, c, k, false, 1.0);
    }
    decl_gate(b, &format!("{p}.gate_v"), c);
    decl_gate(b, &format!("{p}.gate_l"), c);
    let sq = Init::FanIn { fan_in: c, gain: 1.0 };
    b.declare(format!("{p}.mm.weq"), &[c, c], sq);
    b.declare(
        format!("{p}.mm.wlk"),
        &[m.text_width, c],
        Init::FanIn {
            fan_in: m.text_width,
            gain: 1.0,
        },
    );
    b.declare(
        format!("{p}.mm.wlv"),
        &[m.text_width, c],
        Init::FanIn {
            fan_in: m.text_width,
            gain: 1.0,
        },
    );
    b.declare(format!("{p}.mm.we"), &[c, c], sq);
    decl_linear(b, &format!("{p}.mm.proj"), c, c, 1.0);
    if !cfg.ablation.no_fusion {
        let side = 2 * m.displacement + 1;
        decl_conv(b, &format!("{p}.fuse.smooth"), c, 2 * c + side * side, 3, true, 1.0);
        for (j, &k) in m.fusion_windows.iter().enumerate() {
            decl_conv(b, &format!("{p}.fuse.branch{j}"), c, c, k, true, 1.0);
        }
        let nb = m.fusion_windows.len();
        decl_linear(b, &format!("{p}.fuse.coef"), nb * c, nb, 1.0);
        decl_conv(b, &format!("{p}.ci.conv1"), c, c, 3, true, RELU_GAIN);
        decl_conv(b, &format!("{p}.ci.conv2"), c, c, 3, true, 0.5);
        let hidden = (c / 4).max(4);
        decl_linear(b, &format!("{p}.ci.ca1"), c, hidden, RELU_GAIN);
        decl_linear(b, &format!("{p}.ci.ca2"), hidden, c, 1.0);
    }
}

/// `G_v = sig(Σ_j mean_c(k_j * V)) ⊗ V`.
pub fn visual_integration<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, v: Var) -> Result<Var> {
    let (c, _, _) = ctx.shape3(v)?;
    let mut acc: Option<Var> = None;
    for j in 0..ctx.cfg.model.vis_kernels.len() {
        let y = ctx.conv(v, &format!("{prefix}.vis{j}"), false)?;
        let m = ctx.g.channel_mean(y)?;
        acc = Some(match acc {
            Some(a) => ctx.g.add(a, m)?,
            None => m,
        });
    }
    let gate = ctx.g.sigmoid(acc.expect("at least one kernel"))?;
    let gate = ctx.g.repeat_leading(gate, c)?;
    Ok(ctx.g.mul(gate, v)?)
}

/// Position-wise gate: `tanh(L2(relu(L1(x)))) ⊙ x`.
pub fn gate<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = ctx.conv(x, &format!("{prefix}.l1"), true)?;
    let h = ctx.g.relu(h)?;
    let h = ctx.conv(h, &format!("{prefix}.l2"), true)?;
    let m = ctx.g.tanh(h)?;
    Ok(ctx.g.mul(m, x)?)
}

/// `G_l = Proj(attention(X·W_eq, F_tᵀ·W_lk, F_tᵀ·W_lv) ⊙ X·W_e)` over the
/// `H·W` tokens `X` of `v`.
pub fn multimodal_attention<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    v: Var,
    text: Var,
) -> Result<Var> {
    let (_, h, w) = ctx.shape3(v)?;
    if ctx.g.shape(text).get(1).copied().unwrap_or(0) == 0 {
        return Err(Error::Model("multimodal attention with no text tokens".into()));
    }
    let x = ctx.to_tokens(v)?;
    let ft = ctx.g.transpose(text)?;
    let weq = ctx.p(&format!("{prefix}.weq"))?;
    let wlk = ctx.p(&format!("{prefix}.wlk"))?;
    let wlv = ctx.p(&format!("{prefix}.wlv"))?;
    let we = ctx.p(&format!("{prefix}.we"))?;
    let q = ctx.g.matmul(x, weq)?;
    let k = ctx.g.matmul(ft, wlk)?;
    let val = ctx.g.matmul(ft, wlv)?;
    let a = ctx.g.attention(q, k, val)?;
    let e = ctx.g.matmul(x, we)?;
    let a = ctx.g.mul(a, e)?;
    let y = ctx.linear(a, &format!("{prefix}.proj"))?;
    ctx.from_tokens(y, h, w)
}

/// Branch weights of multi-window fusion, `[branches]`, summing to one.
pub fn fusion_coefficients<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    branches: &[Var],
) -> Result<Var> {
    let nb = branches.len();
    if let Some(b) = ctx.cfg.hooks.force_one_hot_coefficients {
        let t = Tensor::from_fn(vec![nb], |i| if i == b { T::one() } else { T::zero() });
        return Ok(ctx.constant(t));
    }
    let pooled = branches
        .iter()
        .map(|&b| ctx.g.global_avg_pool(b))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = ctx.g.concat(&pooled, 0)?;
    let len = ctx.g.shape(stacked)[0];
    let row = ctx.g.reshape(stacked, &[1, len])?;
    let logits = ctx.linear(row, &format!("{prefix}.coef"))?;
    let s = ctx.g.softmax(logits)?;
    Ok(ctx.g.reshape(s, &[nb])?)
}

/// Smoothing 3×3 conv, parallel window convs weighted by learned
/// coefficients, plus a residual from the smoothed input.
pub fn multi_window_fusion<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, stack: Var) -> Result<Var> {
    let s = ctx.conv(stack, &format!("{prefix}.smooth"), true)?;
    let branches = (0..ctx.cfg.model.fusion_windows.len())
        .map(|j| ctx.conv(s, &format!("{prefix}.branch{j}"), true))
        .collect::<Result<Vec<_>>>()?;
    let alpha = fusion_coefficients(ctx, prefix, &branches)?;
    let mut out = s;
    for (j, &b) in branches.iter().enumerate() {
        let a = ctx.pick(alpha, j)?;
        let wb = ctx.g.mul_scalar_var(b, a)?;
        out = ctx.g.add(out, wb)?;
    }
    Ok(out)
}

/// Channel-attention weights `[C]` in (0, 1) from globally pooled statistics.
pub fn channel_attention<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, y: Var) -> Result<Var> {
    let (c, _, _) = ctx.shape3(y)?;
    if ctx.cfg.hooks.force_unit_ca {
        return Ok(ctx.constant(Tensor::full(vec![c], T::one())));
    }
    let pooled = ctx.g.global_avg_pool(y)?;
    let row = ctx.g.reshape(pooled, &[1, c])?;
    let h = ctx.linear(row, &format!("{prefix}.ca1"))?;
    let h = ctx.g.relu(h)?;
    let h = ctx.linear(h, &format!("{prefix}.ca2"))?;
    let s = ctx.g.sigmoid(h)?;
    Ok(ctx.g.reshape(s, &[c])?)
}

/// conv–ReLU–conv, channel attention, residual.
pub fn channel_intensify<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let y = ctx.conv(x, &format!("{prefix}.conv1"), true)?;
    let y = ctx.g.relu(y)?;
    let y = ctx.conv(y, &format!("{prefix}.conv2"), true)?;
    let ca = channel_attention(ctx, prefix, y)?;
    let y = ctx.g.mul_leading(y, ca)?;
    Ok(ctx.g.add(y, x)?)
}

/// Intermediate maps of one fusion layer.
#[derive(Clone, Copy, Debug)]
pub struct CfmTrace {
    pub v_e: Var,
    pub t_v: Var,
    pub t_l: Var,
    pub corr: Option<Var>,
    pub t_e: Option<Var>,
    pub f_e: Var,
}

/// `F_e^i = V_e^i + T_e^i` with `V_e^i` the backbone stage output.
pub fn cfm_layer<T: Scalar>(ctx: &mut Ctx<'_, T>, i: usize, f_prev: Var, text: Var) -> Result<CfmTrace> {
    let v_e = swin::stage_forward(ctx, i, f_prev)?;
    let p = format!("cfm{i}");
    let g_v = visual_integration(ctx, &p, v_e)?;
    let t_v = gate(ctx, &format!("{p}.gate_v"), g_v)?;
    let g_l = multimodal_attention(ctx, &format!("{p}.mm"), v_e, text)?;
    let t_l = gate(ctx, &format!("{p}.gate_l"), g_l)?;
    if ctx.cfg.hooks.zero_fusion_path {
        return Ok(CfmTrace {
            v_e,
            t_v,
            t_l,
            corr: None,
            t_e: None,
            f_e: v_e,
        });
    }
    let (corr, t_e) = if ctx.cfg.ablation.no_fusion {
        (None, ctx.g.add(t_v, t_l)?)
    } else {
        let corr = correlation_volume(ctx.g, t_v, t_l, ctx.cfg.model.displacement)?;
        let stack = ctx.g.concat(&[t_v, t_l, corr], 0)?;
        let fused = multi_window_fusion(ctx, &format!("{p}.fuse"), stack)?;
        (Some(corr), channel_intensify(ctx, &format!("{p}.ci"), fused)?)
    };
    let f_e = ctx.g.add(v_e, t_e)?;
    Ok(CfmTrace {
        v_e,
        t_v,
        t_l,
        corr,
        t_e: Some(t_e),
        f_e,
    })
}

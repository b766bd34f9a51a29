//! Visual backbone: patch embedding, windowed self-attention whose keys and
//! values carry learnable noise plus a discriminator-scaled duplicate key
//! set, and 2×2 patch merging between stages.

use std::sync::Arc;

use mafn_tensor::{Scalar, Tensor, Var, ZERO_INDEX};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{decl_conv, decl_layer_norm, decl_linear, Ctx, RELU_GAIN};
use crate::params::{Init, ParamBuilder};

/// Window extent actually used on an axis of length `extent`.
///
/// Maps no larger than the window form one window. Otherwise the largest
/// divisor of `extent` not below half the configured window is used, so
/// common extents need no padding; when no such divisor exists the map is
/// zero-padded to a multiple of `window`.
pub fn effective_window(extent: usize, window: usize) -> usize {
    if extent <= window {
        return extent;
    }
    (window.div_ceil(2)..=window)
        .rev()
        .find(|w| extent % w == 0)
        .unwrap_or(window)
}

/// Window layout of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub h: usize,
    pub w: usize,
    pub wh: usize,
    pub ww: usize,
}

impl WindowGeometry {
    pub fn new(h: usize, w: usize, window: usize) -> Self {
        WindowGeometry {
            h,
            w,
            wh: effective_window(h, window),
            ww: effective_window(w, window),
        }
    }

    pub fn tokens_per_window(&self) -> usize {
        self.wh * self.ww
    }

    pub fn windows(&self) -> (usize, usize) {
        (self.h.div_ceil(self.wh), self.w.div_ceil(self.ww))
    }

    pub fn num_windows(&self) -> usize {
        let (a, b) = self.windows();
        a * b
    }

    /// Gather index `[C, H, W]` -> `[windows · T, C]`, zero for padding.
    pub fn partition_index(&self, c: usize) -> Arc<[u32]> {
        let (_, nx) = self.windows();
        let t = self.tokens_per_window();
        let mut index = vec![ZERO_INDEX; self.num_windows() * t * c];
        for win in 0..self.num_windows() {
            let (wy, wx) = (win / nx, win % nx);
            for tok in 0..t {
                let y = wy * self.wh + tok / self.ww;
                let x = wx * self.ww + tok % self.ww;
                if y >= self.h || x >= self.w {
                    continue;
                }
                for ch in 0..c {
                    index[(win * t + tok) * c + ch] = (ch * self.h * self.w + y * self.w + x) as u32;
                }
            }
        }
        index.into()
    }

    /// Gather index `[windows · T, C]` -> `[C, H, W]`, dropping padding.
    pub fn merge_index(&self, c: usize) -> Arc<[u32]> {
        let (_, nx) = self.windows();
        let t = self.tokens_per_window();
        let mut index = Vec::with_capacity(c * self.h * self.w);
        for ch in 0..c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let win = (y / self.wh) * nx + x / self.ww;
                    let tok = (y % self.wh) * self.ww + x % self.ww;
                    index.push(((win * t + tok) * c + ch) as u32);
                }
            }
        }
        index.into()
    }
}

/// Per-stage geometry `(channels, height, width)` for a square image.
pub fn stage_dims(cfg: &RunConfig, i: usize) -> (usize, usize, usize) {
    let e = cfg.model.stage_extent(cfg.data.image_size, i);
    (cfg.model.stage_channels(i), e, e)
}

pub(crate) fn declare(b: &mut ParamBuilder, cfg: &RunConfig) {
    let m = &cfg.model;
    let patch_in = 3 * m.patch * m.patch;
    decl_linear(b, "embed", patch_in, m.channels, 1.0);
    for i in 1..=m.stages {
        let (c, h, w) = stage_dims(cfg, i);
        let p = format!("stage{i}");
        if i > 1 {
            decl_conv(b, &format!("{p}.merge"), c, 2 * c, 1, false, 1.0);
        }
        for name in ["wq", "wk", "wv"] {
            b.declare(
                format!("{p}.attn.{name}"),
                &[c, c],
                Init::FanIn { fan_in: c, gain: 1.0 },
            );
        }
        if !cfg.ablation.no_noise {
            let t = WindowGeometry::new(h, w, m.window).tokens_per_window();
            b.declare(format!("{p}.attn.noise_k"), &[t, c], Init::Normal(m.noise_std));
            b.declare(format!("{p}.attn.noise_v"), &[t, c], Init::Normal(m.noise_std));
            let hidden = (c / 2).max(1);
            decl_linear(b, &format!("{p}.attn.disc1"), c, hidden, RELU_GAIN);
            decl_linear(b, &format!("{p}.attn.disc2"), hidden, 1, 1.0);
        }
        decl_layer_norm(b, &format!("{p}.ln"), c);
        decl_linear(b, &format!("{p}.mlp1"), c, m.mlp_ratio * c, RELU_GAIN);
        decl_linear(b, &format!("{p}.mlp2"), m.mlp_ratio * c, c, 0.5);
    }
}

/// Space-to-depth gather index: `[3, H, W]` -> `[(H/p)·(W/p), 3·p·p]`.
fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Arc<[u32]> {
    let (bh, bw) = (h / p, w / p);
    let mut index = Vec::with_capacity(c * h * w);
    for by in 0..bh {
        for bx in 0..bw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        index.push((ch * h * w + (by * p + dy) * w + bx * p + dx) as u32);
                    }
                }
            }
        }
    }
    index.into()
}

/// Linear patch embedding: `[3, H, W]` image -> `[C_1, H/p, W/p]`.
pub fn patch_embed<T: Scalar>(ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
    let (c, h, w) = ctx.shape3(image)?;
    let p = ctx.cfg.model.patch;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Model(format!(
            "image {h}x{w} is not divisible by patch size {p}"
        )));
    }
    let tokens = ctx
        .g
        .gather(image, patch_index(c, h, w, p), &[(h / p) * (w / p), c * p * p])?;
    let x = ctx.linear(tokens, "embed")?;
    ctx.from_tokens(x, h / p, w / p)
}

/// 2×2 patch merging: zero-pad to even extents, stack each 2×2 block along
/// channels, project `4C -> 2C` with a 1×1 convolution.
pub fn patch_merge<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let (c, h, w) = ctx.shape3(x)?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut index = Vec::with_capacity(4 * c * oh * ow);
    for dy in 0..2 {
        for dx in 0..2 {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                        index.push(if sy < h && sx < w {
                            (ch * h * w + sy * w + sx) as u32
                        } else {
                            ZERO_INDEX
                        });
                    }
                }
            }
        }
    }
    let stacked = ctx.g.gather(x, index.into(), &[4 * c, oh, ow])?;
    ctx.conv(stacked, &format!("{prefix}.merge"), false)
}

/// Per-token discriminator scores for one window `[T, C]`: a two-layer MLP
/// followed by a softmax over the window's tokens. Returns `[T]`.
pub fn discriminator_scores<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    tokens: Var,
) -> Result<Var> {
    let t = ctx.g.shape(tokens)[0];
    if t == 0 {
        return Err(Error::Model("discriminator on an empty window".into()));
    }
    if ctx.cfg.hooks.force_unit_discriminator {
        return Ok(ctx.constant(Tensor::full(vec![t], T::one())));
    }
    let h = ctx.linear(tokens, &format!("{prefix}.disc1"))?;
    let h = ctx.g.relu(h)?;
    let logits = ctx.linear(h, &format!("{prefix}.disc2"))?;
    let logits = ctx.g.reshape(logits, &[1, t])?;
    let s = ctx.g.softmax(logits)?;
    Ok(ctx.g.reshape(s, &[t])?)
}

/// One window of noisy attention with residual:
/// `Q = F·W_q`, `K = [(δ_k + F)·W_k ; (s ⊙ F)·W_k]`, `V = [(δ_v + F)·W_v ; F·W_v]`,
/// output `attention(Q, K, V) + F`. With noise disabled this is plain
/// `attention(F·W_q, F·W_k, F·W_v) + F`.
pub fn noisy_window_attention<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    f: Var,
) -> Result<Var> {
    let wq = ctx.p(&format!("{prefix}.wq"))?;
    let wk = ctx.p(&format!("{prefix}.wk"))?;
    let wv = ctx.p(&format!("{prefix}.wv"))?;
    let q = ctx.g.matmul(f, wq)?;
    let att = if ctx.cfg.ablation.no_noise {
        let k = ctx.g.matmul(f, wk)?;
        let v = ctx.g.matmul(f, wv)?;
        ctx.g.attention(q, k, v)?
    } else {
        let dk = ctx.p(&format!("{prefix}.noise_k"))?;
        let dv = ctx.p(&format!("{prefix}.noise_v"))?;
        if ctx.g.shape(dk) != ctx.g.shape(f) {
            return Err(Error::Model(format!(
                "noise shape {:?} does not match window {:?}",
                ctx.g.shape(dk),
                ctx.g.shape(f)
            )));
        }
        let scores = discriminator_scores(ctx, prefix, f)?;
        let noisy_k = ctx.g.add(dk, f)?;
        let k1 = ctx.g.matmul(noisy_k, wk)?;
        let scaled = ctx.g.mul_leading(f, scores)?;
        let k2 = ctx.g.matmul(scaled, wk)?;
        let k = ctx.g.concat(&[k1, k2], 0)?;
        let noisy_v = ctx.g.add(dv, f)?;
        let v1 = ctx.g.matmul(noisy_v, wv)?;
        let v2 = ctx.g.matmul(f, wv)?;
        let v = ctx.g.concat(&[v1, v2], 0)?;
        ctx.g.attention(q, k, v)?
    };
    Ok(ctx.g.add(att, f)?)
}

/// One backbone stage: optional patch merge, windowed noisy attention over
/// every window, then a pre-normalised token MLP with residual.
pub fn stage_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, i: usize, x: Var) -> Result<Var> {
    let p = format!("stage{i}");
    let x = if i > 1 { patch_merge(ctx, x, &p)? } else { x };
    let (c, h, w) = ctx.shape3(x)?;
    let geo = WindowGeometry::new(h, w, ctx.cfg.model.window);
    let t = geo.tokens_per_window();
    let n = geo.num_windows();
    let tokens = ctx.g.gather(x, geo.partition_index(c), &[n * t, c])?;
    let windows = ctx.g.split(tokens, 0, &vec![t; n])?;
    let attn = format!("{p}.attn");
    let mut outs = Vec::with_capacity(n);
    for win in windows {
        outs.push(noisy_window_attention(ctx, &attn, win)?);
    }
    let tokens = ctx.g.concat(&outs, 0)?;
    let y = ctx.g.gather(tokens, geo.merge_index(c), &[c, h, w])?;

    let tok = ctx.to_tokens(y)?;
    let z = ctx.layer_norm(tok, &format!("{p}.ln"))?;
    let z = ctx.linear(z, &format!("{p}.mlp1"))?;
    let z = ctx.g.gelu(z)?;
    let z = ctx.linear(z, &format!("{p}.mlp2"))?;
    let tok = ctx.g.add(tok, z)?;
    ctx.from_tokens(tok, h, w)
}

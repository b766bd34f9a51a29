//! Full network: text encoder, backbone stages each followed by a fusion
//! layer, and the top-down decoder.

use mafn_tensor::{Graph, Scalar, Tensor, Var};

use crate::cfm::{self, CfmTrace};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::msrc;
use crate::nn::Ctx;
use crate::params::{ParamBuilder, ParamStore};
use crate::swin;
use crate::text;

/// Fresh parameters for `cfg`, drawn from `cfg.train.seed`.
pub fn init_params(cfg: &RunConfig, vocab_size: usize) -> ParamStore<f32> {
    let mut b = ParamBuilder::new(cfg.train.seed);
    if !cfg.ablation.zero_text {
        text::declare(&mut b, vocab_size, cfg.model.text_width);
    }
    swin::declare(&mut b, cfg);
    for i in 1..=cfg.model.stages {
        cfm::declare(&mut b, cfg, i);
    }
    msrc::declare(&mut b, cfg);
    b.finish()
}

/// Nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub embed: Var,
    pub text: Var,
    pub stages: Vec<CfmTrace>,
    /// Mask logits `[1, H, W]`.
    pub logits: Var,
}

pub fn forward<T: Scalar>(ctx: &mut Ctx<'_, T>, image: &Tensor<T>, tokens: &[u32]) -> Result<Forward> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Model(format!(
            "expected a [3, H, W] image, got {:?}",
            image.shape()
        )));
    };
    let text = if ctx.cfg.ablation.zero_text {
        if tokens.is_empty() {
            return Err(Error::Text("empty token sequence".into()));
        }
        ctx.constant(Tensor::zeros(vec![ctx.cfg.model.text_width, tokens.len()]))
    } else {
        text::encode_text(ctx, tokens)?
    };
    let img = ctx.constant(image.clone());
    let embed = swin::patch_embed(ctx, img)?;
    let mut f = embed;
    let mut stages = Vec::with_capacity(ctx.cfg.model.stages);
    for i in 1..=ctx.cfg.model.stages {
        let trace = cfm::cfm_layer(ctx, i, f, text)?;
        f = trace.f_e;
        stages.push(trace);
    }
    let maps: Vec<Var> = stages.iter().map(|s| s.f_e).collect();
    let logits = msrc::top_down_decode(ctx, &maps, h, w)?;
    Ok(Forward {
        embed,
        text,
        stages,
        logits,
    })
}

/// Mask logits `[1, H, W]` without recording gradients for later use.
pub fn predict<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &RunConfig,
    image: &Tensor<T>,
    tokens: &[u32],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, params, cfg);
    let out = forward(&mut ctx, image, tokens)?;
    Ok(g.value(out.logits).clone())
}

/// Mean per-pixel BCE-with-logits against a binary mask.
pub fn loss<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &Tensor<T>) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 3 || shape[0] != 1 || shape[1..] != *mask.shape() {
        return Err(Error::Model(format!(
            "loss: logits {:?} vs mask {:?}",
            shape,
            mask.shape()
        )));
    }
    let target = mask.clone().reshape(shape.to_vec())?;
    Ok(g.bce_with_logits(logits, &target)?)
}

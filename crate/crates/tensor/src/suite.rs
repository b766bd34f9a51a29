//! Gradient-check suite over every differentiable primitive.
//!
//! Each case is checked at two shape sets and several seeds in `f64`; the
//! op output is contracted against fixed random weights so that every output
//! entry contributes to the checked scalar.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub type CaseFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

pub struct PrimitiveCase {
    pub name: &'static str,
    /// Alternative input shape sets; each is checked.
    pub shapes: Vec<Vec<Vec<usize>>>,
    pub op: CaseFn,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checks: usize,
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `Σ y ⊙ W` for a fixed random `W` derived from `seed`.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(randn(g.shape(y), seed ^ 0x5eed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn case(name: &'static str, shapes: Vec<Vec<Vec<usize>>>, op: CaseFn) -> PrimitiveCase {
    PrimitiveCase { name, shapes, op }
}

fn bce(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
    let shape = g.shape(v[0]).to_vec();
    let target = Tensor::from_fn(shape, |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    g.bce_with_logits(v[0], &target)
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let s = |sets: &[&[&[usize]]]| -> Vec<Vec<Vec<usize>>> {
        sets.iter()
            .map(|set| set.iter().map(|sh| sh.to_vec()).collect())
            .collect()
    };
    vec![
        case("add", s(&[&[&[3, 4], &[3, 4]], &[&[2, 3, 2], &[2, 3, 2]]]), |g, v| g.add(v[0], v[1])),
        case("sub", s(&[&[&[2, 5], &[2, 5]], &[&[4], &[4]]]), |g, v| g.sub(v[0], v[1])),
        case("mul", s(&[&[&[3, 4], &[3, 4]], &[&[2, 2, 3], &[2, 2, 3]]]), |g, v| g.mul(v[0], v[1])),
        case("scale", s(&[&[&[6]], &[&[2, 3]]]), |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", s(&[&[&[2, 3]], &[&[5]]]), |g, v| g.add_scalar(v[0], 0.3)),
        case("mul_scalar_var", s(&[&[&[2, 3], &[1]], &[&[4, 1, 2], &[1]]]), |g, v| {
            g.mul_scalar_var(v[0], v[1])
        }),
        case("add_leading", s(&[&[&[3, 2, 2], &[3]], &[&[4, 3], &[4]]]), |g, v| g.add_leading(v[0], v[1])),
        case("mul_leading", s(&[&[&[3, 2, 2], &[3]], &[&[4, 3], &[4]]]), |g, v| g.mul_leading(v[0], v[1])),
        case("repeat_leading", s(&[&[&[1, 2, 3]], &[&[1, 4]]]), |g, v| g.repeat_leading(v[0], 3)),
        case("matmul", s(&[&[&[3, 4], &[4, 2]], &[&[1, 5], &[5, 3]]]), |g, v| g.matmul(v[0], v[1])),
        case("transpose", s(&[&[&[3, 5]], &[&[1, 4]]]), |g, v| g.transpose(v[0])),
        case("softmax", s(&[&[&[3, 5]], &[&[2, 2, 4]]]), |g, v| g.softmax(v[0])),
        case("sigmoid", s(&[&[&[4, 3]], &[&[7]]]), |g, v| g.sigmoid(v[0])),
        case("tanh", s(&[&[&[4, 3]], &[&[7]]]), |g, v| g.tanh(v[0])),
        case("relu", s(&[&[&[4, 3]], &[&[7]]]), |g, v| g.relu(v[0])),
        case("gelu", s(&[&[&[4, 3]], &[&[7]]]), |g, v| g.gelu(v[0])),
        case("reshape", s(&[&[&[2, 6]], &[&[3, 4]]]), |g, v| g.reshape(v[0], &[4, 3])),
        case("permute", s(&[&[&[2, 3, 4]], &[&[3, 2, 2]]]), |g, v| g.permute(v[0], &[2, 0, 1])),
        case("narrow", s(&[&[&[3, 5]], &[&[2, 4, 2]]]), |g, v| g.narrow(v[0], 1, 1, 2)),
        case("gather", s(&[&[&[3, 4]], &[&[2, 6]]]), |g, v| {
            let index: std::sync::Arc<[u32]> = vec![5, 0, crate::ZERO_INDEX, 5, 11, 2].into();
            g.gather(v[0], index, &[2, 3])
        }),
        case("concat", s(&[&[&[2, 3], &[1, 3]], &[&[1, 2, 2], &[3, 2, 2]]]), |g, v| {
            g.concat(&[v[0], v[1]], 0)
        }),
        case("concat_inner", s(&[&[&[2, 3, 2], &[2, 1, 2]], &[&[3, 1, 1], &[3, 2, 1]]]), |g, v| {
            g.concat(&[v[0], v[1]], 1)
        }),
        case("split", s(&[&[&[5, 3]], &[&[5, 1, 2]]]), |g, v| {
            let parts = g.split(v[0], 0, &[2, 3])?;
            let a = g.sum(parts[0])?;
            let b = g.mean(parts[1])?;
            let b = g.scale(b, 2.0)?;
            g.add(a, b)
        }),
        case("sum", s(&[&[&[3, 4]], &[&[5]]]), |g, v| g.sum(v[0])),
        case("mean", s(&[&[&[3, 4]], &[&[2, 2, 2]]]), |g, v| g.mean(v[0])),
        case("channel_mean", s(&[&[&[3, 4, 5]], &[&[2, 3, 3]]]), |g, v| g.channel_mean(v[0])),
        case("global_avg_pool", s(&[&[&[3, 4, 5]], &[&[2, 3, 3]]]), |g, v| g.global_avg_pool(v[0])),
        case(
            "conv2d",
            s(&[&[&[2, 5, 5], &[3, 2, 3, 3]], &[&[3, 4, 6], &[2, 3, 3, 3]]]),
            |g, v| g.conv2d(v[0], v[1], 1, 1),
        ),
        case(
            "conv2d_stride2",
            s(&[&[&[2, 6, 6], &[2, 2, 3, 3]], &[&[1, 7, 5], &[3, 1, 3, 3]]]),
            |g, v| g.conv2d(v[0], v[1], 2, 1),
        ),
        case(
            "conv2d_pointwise",
            s(&[&[&[3, 4, 4], &[2, 3, 1, 1]], &[&[2, 3, 5], &[4, 2, 1, 1]]]),
            |g, v| g.conv2d(v[0], v[1], 1, 0),
        ),
        case(
            "conv2d_5x5",
            s(&[&[&[2, 3, 4], &[2, 2, 5, 5]], &[&[1, 5, 5], &[2, 1, 5, 5]]]),
            |g, v| g.conv2d(v[0], v[1], 1, 2),
        ),
        case(
            "depthwise_conv2d",
            s(&[&[&[3, 5, 4], &[3, 1, 3, 3]], &[&[2, 4, 4], &[2, 1, 5, 5]]]),
            |g, v| g.depthwise_conv2d(v[0], v[1]),
        ),
        case(
            "layer_norm",
            s(&[&[&[3, 5], &[5], &[5]], &[&[2, 4], &[4], &[4]]]),
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case(
            "channel_norm",
            s(&[&[&[3, 3, 4], &[3], &[3]], &[&[2, 4, 4], &[2], &[2]]]),
            |g, v| g.channel_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("bilinear_up", s(&[&[&[2, 3, 3]], &[&[1, 2, 4]]]), |g, v| g.bilinear_resize(v[0], 7, 5)),
        case("bilinear_down", s(&[&[&[2, 6, 5]], &[&[1, 5, 7]]]), |g, v| g.bilinear_resize(v[0], 3, 2)),
        case(
            "attention",
            s(&[&[&[2, 4], &[3, 4], &[3, 3]], &[&[4, 2], &[5, 2], &[5, 3]]]),
            |g, v| g.attention(v[0], v[1], v[2]),
        ),
        case("bce_with_logits", s(&[&[&[1, 3, 4]], &[&[1, 5, 2]]]), bce),
    ]
}

/// Worst relative error of one case over all shape sets and `seeds` seeds.
pub fn run_case(case: &PrimitiveCase, seeds: u64, eps: f64) -> Result<CaseResult> {
    let mut worst = 0.0f64;
    let mut checks = 0;
    for set in &case.shapes {
        for seed in 0..seeds {
            let inputs: Vec<Tensor<f64>> = set
                .iter()
                .enumerate()
                .map(|(i, s)| randn(s, seed * 31 + i as u64))
                .collect();
            let err = grad_check(
                |g, v| {
                    let y = (case.op)(g, v)?;
                    if g.value(y).numel() == 1 {
                        Ok(y)
                    } else {
                        weighted_sum(g, y, seed)
                    }
                },
                &inputs,
                eps,
            )?;
            worst = worst.max(err);
            checks += 1;
        }
    }
    Ok(CaseResult {
        name: case.name,
        max_rel_error: worst,
        checks,
    })
}

pub fn run_gradient_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    primitive_cases()
        .iter()
        .map(|c| run_case(c, seeds, 1e-5))
        .collect()
}

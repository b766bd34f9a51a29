#![allow(dead_code)]

use mafn_core::nn::Ctx;
use mafn_core::verify;
use mafn_core::{ParamStore, Result, RunConfig};
use mafn_tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 12;

pub fn tiny() -> RunConfig {
    verify::oracle_config()
}

pub fn params(cfg: &RunConfig, seed: u64) -> ParamStore<f64> {
    verify::jittered_params(cfg, VOCAB, seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn eval(
    p: &ParamStore<f64>,
    cfg: &RunConfig,
    inputs: &[&Tensor<f64>],
    f: impl FnOnce(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
) -> Tensor<f64> {
    verify::eval_graph(p, cfg, inputs, f).expect("graph evaluation")
}

pub fn set(p: &mut ParamStore<f64>, name: &str, f: impl Fn(f64) -> f64) {
    let t = p.get(name).unwrap_or_else(|e| panic!("{e}"));
    let data = t.data().iter().map(|&x| f(x)).collect();
    let shape = t.shape().to_vec();
    p.set(name, Tensor::new(shape, data).unwrap()).unwrap();
}

pub fn zero(p: &mut ParamStore<f64>, name: &str) {
    set(p, name, |_| 0.0);
}

pub fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} > {tol:e}");
}

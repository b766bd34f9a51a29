//! Property suite behind `mafn verify`: gradient checks, reductions,
//! brute-force and transcription oracles, and metric properties.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use mafn_tensor::fault::{with_fault, Fault};
use mafn_tensor::suite::{self, PrimitiveCase};
use mafn_tensor::{grad_check, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cfm;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model;
use crate::msrc;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::reference as oracle;
use crate::swin;

pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-6;
pub const GRAD_SEEDS: u64 = 5;
pub const GRAD_SUITE_BUDGET_SECS: f64 = 120.0;
pub const VERIFY_BUDGET_SECS: f64 = 300.0;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        let mut s = format!(
            "{} [{}] {:<34} err={:.3e} tol={:.0e} {:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.max_error,
            self.tolerance,
            self.seconds
        );
        if !self.detail.is_empty() {
            s.push_str("  ");
            s.push_str(&self.detail);
        }
        s
    }
}

/// Runs `f`, which returns the observed error, and compares it to `tol`.
/// An error from `f` counts as a failure.
fn check(criterion: u8, name: impl Into<String>, tol: f64, f: impl FnOnce() -> Result<(f64, String)>) -> Check {
    let started = Instant::now();
    let (passed, max_error, detail) = match f() {
        Ok((err, detail)) => (err <= tol && err.is_finite(), err, detail),
        Err(e) => (false, f64::NAN, e.to_string()),
    };
    Check {
        criterion,
        name: name.into(),
        passed,
        max_error,
        tolerance: tol,
        seconds: started.elapsed().as_secs_f64(),
        detail,
    }
}

/// Small configuration used by the oracle checks: a 24×24 input gives stage
/// extents 6, 3, 2, 1 and several windows in the first stage.
pub fn oracle_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.image_size = 24;
    cfg.model.channels = 4;
    cfg.model.text_width = 6;
    cfg.model.msrc_width = 4;
    cfg.model.max_tokens = 6;
    cfg
}

/// Initialised parameters with extra Gaussian jitter so that biases and
/// normalisation affine terms are non-trivial.
pub fn jittered_params(cfg: &RunConfig, vocab_size: usize, seed: u64) -> ParamStore<f64> {
    let base: ParamStore<f64> = model::init_params(cfg, vocab_size).cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamStore::new();
    for (name, t) in base.iter() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), 0.2, &mut rng);
        out.insert(name, oracle::add(t, &noise));
    }
    out
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Evaluates `f` on a fresh `f64` graph whose inputs are constants.
pub fn eval_graph(
    params: &ParamStore<f64>,
    cfg: &RunConfig,
    inputs: &[&Tensor<f64>],
    f: impl FnOnce(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = {
        let mut ctx = Ctx::new(&mut g, params, cfg);
        f(&mut ctx, &vars)?
    };
    Ok(g.value(out).clone())
}

fn diff(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Model(format!("shape {:?} vs oracle {:?}", a.shape(), b.shape())));
    }
    Ok(a.max_abs_diff(b))
}

fn grad_case_check(case: &PrimitiveCase, seeds: u64) -> Check {
    check(1, format!("grad:{}", case.name), GRAD_TOL, || {
        let r = suite::run_case(case, seeds, 1e-5)?;
        Ok((r.max_rel_error, format!("{} checks", r.checks)))
    })
}

fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> mafn_tensor::Result<Var> {
    suite::weighted_sum(g, y, seed)
}

/// Gradient checks of the two model-level custom ops.
fn custom_op_grad_checks(seeds: u64) -> Vec<Check> {
    let rotate = check(1, "grad:rotate_kernel", GRAD_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        let mut theta_worst = 0.0f64;
        for seed in 0..seeds {
            for k in [3, 5] {
                let w = randn(&[2, 3, k, k], &mut rng);
                let theta = Tensor::scalar(rng.random_range(-1.4..1.4));
                let err = grad_check(
                    |g, v| {
                        let y = msrc::rotate_kernel(g, v[0], v[1]).map_err(to_tensor_err)?;
                        weighted(g, y, seed)
                    },
                    &[w.clone(), theta.clone().reshape(vec![1])?],
                    1e-5,
                )?;
                worst = worst.max(err);
                let w_const = w.clone();
                let err_theta = grad_check(
                    |g, v| {
                        let wv = g.constant(w_const.clone());
                        let y = msrc::rotate_kernel(g, wv, v[0]).map_err(to_tensor_err)?;
                        weighted(g, y, seed)
                    },
                    &[theta.reshape(vec![1])?],
                    1e-5,
                )?;
                theta_worst = theta_worst.max(err_theta);
            }
        }
        Ok((worst.max(theta_worst), format!("θ-only max {theta_worst:.2e}")))
    });
    let corr = check(1, "grad:correlation_volume", GRAD_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            for (c, h, w, d) in [(3, 4, 5, 2), (2, 3, 3, 3)] {
                let a = randn(&[c, h, w], &mut rng);
                let b = randn(&[c, h, w], &mut rng);
                let err = grad_check(
                    |g, v| {
                        let y = cfm::correlation_volume(g, v[0], v[1], d).map_err(to_tensor_err)?;
                        weighted(g, y, seed)
                    },
                    &[a, b],
                    1e-5,
                )?;
                worst = worst.max(err);
            }
        }
        Ok((worst, String::new()))
    });
    vec![rotate, corr]
}

fn to_tensor_err(e: Error) -> mafn_tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => mafn_tensor::TensorError::Invalid {
            op: "model",
            detail: other.to_string(),
        },
    }
}

/// Criterion 1: central-difference checks of every differentiable
/// primitive (64-bit, `seeds` seeds), the custom ops, the suite runtime,
/// and a mutation check proving an injected sign flip is caught by name.
pub fn gradient_checks(seeds: u64) -> Vec<Check> {
    let started = Instant::now();
    let mut out: Vec<Check> = suite::primitive_cases()
        .iter()
        .map(|c| grad_case_check(c, seeds))
        .collect();
    out.extend(custom_op_grad_checks(seeds));
    let elapsed = started.elapsed().as_secs_f64();
    out.push(Check {
        criterion: 1,
        name: "grad:suite_runtime".into(),
        passed: elapsed < GRAD_SUITE_BUDGET_SECS,
        max_error: elapsed,
        tolerance: GRAD_SUITE_BUDGET_SECS,
        seconds: elapsed,
        detail: format!("{} checks in {elapsed:.1}s", out.len()),
    });
    out.push(mutation_check());
    out
}

/// Runs the primitive suite with the sigmoid backward rule negated; passes
/// when the suite reports `grad:sigmoid` as failed.
pub fn mutation_check() -> Check {
    let started = Instant::now();
    let failed: Vec<String> = with_fault(Fault::SigmoidBackwardSign, || {
        suite::primitive_cases()
            .iter()
            .map(|c| grad_case_check(c, 1))
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect()
    });
    let caught = failed.iter().any(|n| n == "grad:sigmoid");
    Check {
        criterion: 1,
        name: "mutation:sigmoid_backward_sign".into(),
        passed: caught,
        max_error: 0.0,
        tolerance: 0.0,
        seconds: started.elapsed().as_secs_f64(),
        detail: format!("flagged: {}", if failed.is_empty() { "none".into() } else { failed.join(", ") }),
    }
}

/// Criterion 2: with zero noise and unit discriminator scores the noisy
/// attention equals plain windowed attention.
pub fn reduction_checks() -> Vec<Check> {
    vec![check(2, "reduction:noisy_to_plain_attention", ORACLE_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cfg = RunConfig::default();
        cfg.hooks.force_unit_discriminator = true;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let t = [4, 6, 9, 16][rng.random_range(0..4)];
            let c = rng.random_range(2..=8);
            let mut p = ParamStore::new();
            for name in ["wq", "wk", "wv"] {
                p.insert(format!("stage1.attn.{name}"), oracle::map(&randn(&[c, c], &mut rng), |x| x * 0.5));
            }
            p.insert("stage1.attn.noise_k", Tensor::zeros(vec![t, c]));
            p.insert("stage1.attn.noise_v", Tensor::zeros(vec![t, c]));
            p.insert("stage1.attn.disc1.w", randn(&[c, 3], &mut rng));
            p.insert("stage1.attn.disc1.b", randn(&[3], &mut rng));
            p.insert("stage1.attn.disc2.w", randn(&[3, 1], &mut rng));
            p.insert("stage1.attn.disc2.b", randn(&[1], &mut rng));
            let f = randn(&[t, c], &mut rng);
            let got = eval_graph(&p, &cfg, &[&f], |ctx, v| {
                swin::noisy_window_attention(ctx, "stage1.attn", v[0])
            })?;
            let want = oracle::plain_window_attention(&p, "stage1.attn", &f)?;
            worst = worst.max(diff(&got, &want)?);
        }
        Ok((worst, "10 windows".into()))
    })]
}

/// Criterion 3: correlation volume against the quadruple-loop oracle.
pub fn correlation_checks() -> Vec<Check> {
    vec![check(3, "oracle:correlation_volume", ORACLE_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let fixed = [(1, 1, 1, 3), (8, 8, 8, 3), (3, 2, 7, 3), (5, 8, 1, 2), (2, 3, 3, 0)];
        let mut worst = 0.0f64;
        for case in 0..20 {
            let (c, h, w, d) = fixed.get(case).copied().unwrap_or_else(|| {
                (
                    rng.random_range(1..=8),
                    rng.random_range(1..=8),
                    rng.random_range(1..=8),
                    rng.random_range(0..=3),
                )
            });
            let a = randn(&[c, h, w], &mut rng);
            let b = randn(&[c, h, w], &mut rng);
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let out = cfm::correlation_volume(&mut g, va, vb, d)?;
            worst = worst.max(diff(g.value(out), &oracle::correlation(&a, &b, d))?);
        }
        Ok((worst, "20 cases".into()))
    })]
}

fn rotate_graph(w: &Tensor<f64>, theta: f64) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let tv = g.constant(Tensor::new(vec![1], vec![theta])?);
    let out = msrc::rotate_kernel(&mut g, wv, tv)?;
    Ok(g.value(out).clone())
}

/// Criterion 4: identity at θ=0 (bit-exact) and quarter turn at θ=π/2, plus
/// agreement with the reference sampler at arbitrary angles.
pub fn rotation_checks() -> Vec<Check> {
    let kernels = || {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        vec![randn(&[2, 3, 3, 3], &mut rng), randn(&[3, 2, 5, 5], &mut rng)]
    };
    vec![
        check(4, "rotation:identity_at_zero", 0.0, || {
            let mut mismatched = 0usize;
            for w in kernels() {
                let r = rotate_graph(&w, 0.0)?;
                mismatched += r
                    .data()
                    .iter()
                    .zip(w.data())
                    .filter(|(a, b)| a.to_bits() != b.to_bits())
                    .count();
            }
            Ok((mismatched as f64, format!("{mismatched} non-identical values")))
        }),
        check(4, "rotation:quarter_turn", ORACLE_TOL, || {
            let mut worst = 0.0f64;
            for w in kernels() {
                worst = worst.max(diff(&rotate_graph(&w, FRAC_PI_2)?, &oracle::quarter_turn(&w))?);
            }
            Ok((worst, "3×3 and 5×5".into()))
        }),
        check(4, "rotation:bilinear_sampler", ORACLE_TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut worst = 0.0f64;
            for w in kernels() {
                for _ in 0..5 {
                    let theta = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
                    worst = worst.max(diff(&rotate_graph(&w, theta)?, &oracle::rotate_kernel(&w, theta))?);
                }
            }
            Ok((worst, String::new()))
        }),
    ]
}

/// Criterion 5: each module formula against its literal transcription.
pub fn transcription_checks() -> Vec<Check> {
    let cfg = oracle_config();
    let vocab = 12;
    let params = jittered_params(&cfg, vocab, 51);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let (c1, e1) = (cfg.model.stage_channels(1), cfg.model.stage_extent(cfg.data.image_size, 1));
    let v = randn(&[c1, e1, e1], &mut rng);
    let text = randn(&[cfg.model.text_width, 5], &mut rng);
    let mw = cfg.model.msrc_width;
    let mv = randn(&[mw, 5, 4], &mut rng);
    let (p, cfg) = (&params, &cfg);
    let mut out = vec![
        check(5, "oracle:noisy_window_attention", ORACLE_TOL, || {
            let t = swin::WindowGeometry::new(e1, e1, cfg.model.window).tokens_per_window();
            let f = randn(&[t, c1], &mut ChaCha8Rng::seed_from_u64(53));
            let got = eval_graph(p, cfg, &[&f], |ctx, x| swin::noisy_window_attention(ctx, "stage1.attn", x[0]))?;
            Ok((diff(&got, &oracle::noisy_window_attention(p, "stage1.attn", &f, false)?)?, String::new()))
        }),
        check(5, "oracle:visual_integration", ORACLE_TOL, || {
            let got = eval_graph(p, cfg, &[&v], |ctx, x| cfm::visual_integration(ctx, "cfm1", x[0]))?;
            let want = oracle::visual_integration(p, "cfm1", &v, cfg.model.vis_kernels.len())?;
            Ok((diff(&got, &want)?, String::new()))
        }),
        check(5, "oracle:visual_gate", ORACLE_TOL, || {
            let got = eval_graph(p, cfg, &[&v], |ctx, x| cfm::gate(ctx, "cfm1.gate_v", x[0]))?;
            Ok((diff(&got, &oracle::gate(p, "cfm1.gate_v", &v)?)?, String::new()))
        }),
        check(5, "oracle:multimodal_attention", ORACLE_TOL, || {
            let got = eval_graph(p, cfg, &[&v, &text], |ctx, x| {
                cfm::multimodal_attention(ctx, "cfm1.mm", x[0], x[1])
            })?;
            Ok((diff(&got, &oracle::multimodal_attention(p, "cfm1.mm", &v, &text)?)?, String::new()))
        }),
        check(5, "oracle:language_gate", ORACLE_TOL, || {
            let got = eval_graph(p, cfg, &[&v], |ctx, x| cfm::gate(ctx, "cfm1.gate_l", x[0]))?;
            Ok((diff(&got, &oracle::gate(p, "cfm1.gate_l", &v)?)?, String::new()))
        }),
    ];
    for i in 1..=3 {
        out.push(check(5, format!("oracle:cfm_layer{i}"), ORACLE_TOL, || {
            let (c, e) = if i == 1 {
                (c1, e1)
            } else {
                (cfg.model.stage_channels(i - 1), cfg.model.stage_extent(cfg.data.image_size, i - 1))
            };
            let f_prev = randn(&[c, e, e], &mut ChaCha8Rng::seed_from_u64(54 + i as u64));
            let got = eval_graph(p, cfg, &[&f_prev, &text], |ctx, x| {
                Ok(cfm::cfm_layer(ctx, i, x[0], x[1])?.f_e)
            })?;
            Ok((diff(&got, &oracle::cfm_layer(p, cfg, i, &f_prev, &text)?)?, String::new()))
        }));
    }
    out.push(check(5, "oracle:arc_conv", ORACLE_TOL, || {
        let got = eval_graph(p, cfg, &[&mv], |ctx, x| msrc::arc_conv(ctx, "dec1.msrc.bank", x[0]))?;
        let (theta, lambda) = oracle::predict_angles_weights(p, "dec1.msrc.bank", &mv)?;
        let want = oracle::arc_conv(p, "dec1.msrc.bank", &mv, &theta, &lambda)?;
        Ok((diff(&got, &want)?, String::new()))
    }));
    for k in 0..cfg.model.msrc_kernels.len() {
        out.push(check(5, format!("oracle:msrc_layer{k}"), ORACLE_TOL, || {
            let got = eval_graph(p, cfg, &[&mv], |ctx, x| msrc::msrc_layer(ctx, "dec1.msrc", k, x[0]))?;
            Ok((diff(&got, &oracle::msrc_layer(p, "dec1.msrc", k, &mv, None)?)?, String::new()))
        }));
    }
    out
}

/// Criterion 6: the hand-derived two-sample row and P@X monotonicity.
pub fn metric_checks() -> Vec<Check> {
    vec![
        check(6, "metrics:hand_derived_row", 0.0, || {
            let gt: Vec<bool> = (0..40).map(|i| i < 20).collect();
            let pred_a: Vec<bool> = (0..40).map(|i| i < 11).collect();
            let pred_b: Vec<bool> = (0..40).map(|i| i < 19).collect();
            let r = metrics::compute_metrics(&[pred_a, pred_b], &[gt.clone(), gt])?;
            let expected = [(r.miou, 0.75), (r.precision[0], 1.0), (r.precision[1], 0.5), (r.precision[4], 0.5)];
            let err = expected.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok((err, format!("mIoU {} P@0.5 {} P@0.6 {} P@0.9 {}", r.miou, r.precision[0], r.precision[1], r.precision[4])))
        }),
        check(6, "metrics:precision_monotone", 0.0, || {
            let mut rng = ChaCha8Rng::seed_from_u64(61);
            let mut violations = 0usize;
            for _ in 0..100 {
                let n = rng.random_range(1..=12);
                let px = rng.random_range(1..=64);
                let mut preds = Vec::with_capacity(n);
                let mut truths = Vec::with_capacity(n);
                for _ in 0..n {
                    let (pa, pb) = (rng.random::<f64>(), rng.random::<f64>());
                    preds.push((0..px).map(|_| rng.random::<f64>() < pa).collect::<Vec<_>>());
                    truths.push((0..px).map(|_| rng.random::<f64>() < pb).collect::<Vec<_>>());
                }
                let r = metrics::compute_metrics(&preds, &truths)?;
                violations += r.precision.windows(2).filter(|w| w[1] > w[0]).count();
                violations += r.precision.iter().filter(|&&p| !(0.0..=1.0).contains(&p)).count();
            }
            Ok((violations as f64, format!("{violations} violations over 100 sets")))
        }),
    ]
}

/// Every check of criteria 1–6, followed by the overall runtime check.
pub fn run_all() -> Vec<Check> {
    let started = Instant::now();
    let mut out = gradient_checks(GRAD_SEEDS);
    out.extend(reduction_checks());
    out.extend(correlation_checks());
    out.extend(rotation_checks());
    out.extend(transcription_checks());
    out.extend(metric_checks());
    let elapsed = started.elapsed().as_secs_f64();
    out.push(Check {
        criterion: 0,
        name: "verify:runtime".into(),
        passed: elapsed < VERIFY_BUDGET_SECS,
        max_error: elapsed,
        tolerance: VERIFY_BUDGET_SECS,
        seconds: elapsed,
        detail: String::new(),
    });
    out
}

pub fn report(checks: &[Check]) -> String {
    let mut s: String = checks.iter().map(|c| c.line() + "\n").collect();
    let failed = checks.iter().filter(|c| !c.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    s
}

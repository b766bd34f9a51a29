//! Central-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest discrepancy found by [`grad_check_detailed`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input position, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max over all input entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`, where the numeric
/// derivative is `(f(x + eps) - f(x - eps)) / (2 eps)`.
///
/// `op` receives a fresh graph with one leaf per input and must return a
/// single-element node.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_detailed(op, inputs, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_detailed<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(TensorError::invalid(
            "grad_check",
            format!("eps {eps} outside [1e-6, 1e-4]"),
        ));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = op(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(TensorError::invalid(
                "grad_check",
                format!(
                    "op output must be scalar, got shape {:?}; reduce it first",
                    g.shape(out)
                ),
            ));
        }
        Ok((g, vars, out))
    };

    let (graph, vars, out) = eval(inputs)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.tensor(&graph, v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (pos, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let x0 = input.data()[idx];
            work[pos].data_mut()[idx] = x0 + eps;
            let (gp, _, op_) = eval(&work)?;
            let fp = gp.value(op_).data()[0];
            work[pos].data_mut()[idx] = x0 - eps;
            let (gm, _, om) = eval(&work)?;
            let fm = gm.value(om).data()[0];
            work[pos].data_mut()[idx] = x0;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pos].data()[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error || report.worst.is_none() {
                report = GradCheckReport {
                    max_rel_error: err.max(report.max_rel_error),
                    worst: Some((pos, idx)),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

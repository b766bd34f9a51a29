//! Layer helpers shared by the model components.

use mafn_tensor::{Graph, Scalar, Tensor, Var};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Forward-pass context: the graph being recorded, the parameters it reads
/// and the run configuration (ablations and hooks).
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub cfg: &'a RunConfig,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamStore<T>, cfg: &'a RunConfig) -> Self {
        Ctx { g, params, cfg }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let value = self.params.get(name)?;
        Ok(self.g.param(name, value))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn shape3(&self, x: Var) -> Result<(usize, usize, usize)> {
        match *self.g.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::Model(format!("expected a [C, H, W] map, got {s:?}"))),
        }
    }

    /// Adds a `[D]` bias to every row of `[N, D]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.g.shape(x)[0];
        let d = self.g.shape(b)[0];
        let b = self.g.reshape(b, &[1, d])?;
        let b = self.g.repeat_leading(b, n)?;
        Ok(self.g.add(x, b)?)
    }

    /// `x · W + b` with `W: [in, out]` at `{prefix}.w` and `b: [out]` at `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let y = self.g.matmul(x, w)?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.add_row_bias(y, b)
    }

    /// Same-padded stride-1 convolution with optional per-channel bias.
    pub fn conv(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let k = self.g.shape(w)[2];
        let y = self.g.conv2d(x, w, 1, (k - 1) / 2)?;
        if bias {
            let b = self.p(&format!("{prefix}.b"))?;
            Ok(self.g.add_leading(y, b)?)
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.g"))?;
        let beta = self.p(&format!("{prefix}.b"))?;
        Ok(self.g.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    /// `[C, H, W]` -> `[H·W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.shape3(x)?;
        let flat = self.g.reshape(x, &[c, h * w])?;
        Ok(self.g.transpose(flat)?)
    }

    /// `[H·W, C]` -> `[C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.g.shape(x)[1];
        let t = self.g.transpose(x)?;
        Ok(self.g.reshape(t, &[c, h, w])?)
    }

    /// Element `i` of a rank-1 node as a `[1]` node.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        Ok(self.g.narrow(x, 0, i, 1)?)
    }
}

pub(crate) fn decl_linear(b: &mut ParamBuilder, prefix: &str, fan_in: usize, out: usize, gain: f64) {
    b.declare(
        format!("{prefix}.w"),
        &[fan_in, out],
        Init::FanIn { fan_in, gain },
    );
    b.declare(format!("{prefix}.b"), &[out], Init::Zeros);
}

pub(crate) fn decl_conv(
    b: &mut ParamBuilder,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    bias: bool,
    gain: f64,
) {
    let fan_in = c_in * k * k;
    b.declare(
        format!("{prefix}.w"),
        &[c_out, c_in, k, k],
        Init::FanIn { fan_in, gain },
    );
    if bias {
        b.declare(format!("{prefix}.b"), &[c_out], Init::Zeros);
    }
}

pub(crate) fn decl_layer_norm(b: &mut ParamBuilder, prefix: &str, d: usize) {
    b.declare(format!("{prefix}.g"), &[d], Init::Ones);
    b.declare(format!("{prefix}.b"), &[d], Init::Zeros);
}

/// Gain for layers followed by a ReLU.
pub(crate) const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

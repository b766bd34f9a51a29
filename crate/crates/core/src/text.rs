//! Closed vocabulary and the small token encoder producing text features
//! `F_t: [D, M]` (one column per token).

use std::path::Path;
use std::sync::Arc;

use mafn_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{decl_layer_norm, decl_linear, Ctx, RELU_GAIN};
use crate::params::{Init, ParamBuilder};

pub const PAD: &str = "<pad>";
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const POSITIONS: [&str; 4] = ["left", "right", "top", "bottom"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// Padding token, colour words, shape words, position words.
    pub fn standard() -> Self {
        let words = std::iter::once(PAD)
            .chain(COLORS)
            .chain(SHAPES)
            .chain(POSITIONS)
            .map(String::from)
            .collect();
        Vocabulary { words }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Text("empty vocabulary".into()));
        }
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Text(format!("invalid vocabulary entry {w:?}")));
            }
            if words[..i].contains(w) {
                return Err(Error::Text(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocabulary { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, expr: &str) -> Result<Vec<u32>> {
        let ids: Vec<u32> = expr
            .split_whitespace()
            .map(|w| {
                self.id(w).ok_or_else(|| {
                    Error::Text(format!(
                        "unknown token {w:?}; vocabulary: {}",
                        self.words.join(" ")
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::Text("empty expression".into()));
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line index is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_words(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
        .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Sinusoidal position table `[M, D]`.
pub fn positional_encoding<T: Scalar>(m: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(vec![m, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((j - j % 2) as f64) / d as f64);
        T::lit(if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}

pub(crate) fn declare(b: &mut ParamBuilder, vocab_size: usize, d: usize) {
    b.declare("text.embed", &[vocab_size, d], Init::Normal(1.0));
    for name in ["wq", "wk", "wv", "wo"] {
        b.declare(
            format!("text.attn.{name}"),
            &[d, d],
            Init::FanIn { fan_in: d, gain: 1.0 },
        );
    }
    decl_layer_norm(b, "text.ln1", d);
    decl_linear(b, "text.ff1", d, 2 * d, RELU_GAIN);
    decl_linear(b, "text.ff2", 2 * d, d, 1.0);
    decl_layer_norm(b, "text.ln2", d);
}

/// Token ids -> `F_t: [D, M]`.
pub fn encode_text<T: Scalar>(ctx: &mut Ctx<'_, T>, tokens: &[u32]) -> Result<Var> {
    let m = tokens.len();
    if m == 0 {
        return Err(Error::Text("empty token sequence".into()));
    }
    if m > ctx.cfg.model.max_tokens {
        return Err(Error::Text(format!(
            "{m} tokens exceed the maximum of {}",
            ctx.cfg.model.max_tokens
        )));
    }
    let embed = ctx.p("text.embed")?;
    let &[vocab, d] = ctx.g.shape(embed) else {
        return Err(Error::Model("text.embed must be [V, D]".into()));
    };
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Text(format!(
            "token id {bad} outside vocabulary of {vocab}"
        )));
    }
    let index: Arc<[u32]> = tokens
        .iter()
        .flat_map(|&t| (0..d as u32).map(move |j| t * d as u32 + j))
        .collect();
    let mut x = ctx.g.gather(embed, index, &[m, d])?;
    if ctx.cfg.model.positional_encoding {
        let pe = ctx.constant(positional_encoding(m, d));
        x = ctx.g.add(x, pe)?;
    }

    let wq = ctx.p("text.attn.wq")?;
    let wk = ctx.p("text.attn.wk")?;
    let wv = ctx.p("text.attn.wv")?;
    let wo = ctx.p("text.attn.wo")?;
    let q = ctx.g.matmul(x, wq)?;
    let k = ctx.g.matmul(x, wk)?;
    let v = ctx.g.matmul(x, wv)?;
    let a = ctx.g.attention(q, k, v)?;
    let a = ctx.g.matmul(a, wo)?;
    let x = ctx.g.add(x, a)?;
    let x = ctx.layer_norm(x, "text.ln1")?;

    let f = ctx.linear(x, "text.ff1")?;
    let f = ctx.g.relu(f)?;
    let f = ctx.linear(f, "text.ff2")?;
    let x = ctx.g.add(x, f)?;
    let x = ctx.layer_norm(x, "text.ln2")?;
    Ok(ctx.g.transpose(x)?)
}

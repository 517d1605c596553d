//! Parameterized building blocks shared by the sequence and fusion modules.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Train/eval switch and dropout randomness for one forward pass.
pub struct ForwardCtx {
    train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            train: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Identity in eval mode.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.train {
            g.dropout(x, self.dropout, &mut self.rng)
        } else {
            Ok(x)
        }
    }
}

/// `y = x W + b` over the last axis; `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => g.bias_add(y, p[b]),
            None => Ok(y),
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }
}

/// Affine projection, optionally with one SiLU hidden layer of width
/// `max(in, out)`.
#[derive(Clone, Debug)]
pub enum Mlp {
    Affine(Linear),
    Hidden(Linear, Linear),
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize, hidden: bool) -> Self {
        if hidden {
            let h = Self::hidden_width(in_dim, out_dim);
            Mlp::Hidden(
                Linear::new(store, rng, &format!("{name}.0"), in_dim, h, true),
                Linear::new(store, rng, &format!("{name}.1"), h, out_dim, true),
            )
        } else {
            Mlp::Affine(Linear::new(store, rng, name, in_dim, out_dim, true))
        }
    }

    pub fn hidden_width(in_dim: usize, out_dim: usize) -> usize {
        in_dim.max(out_dim)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Mlp::Affine(l) => l.forward(g, p, x),
            Mlp::Hidden(l0, l1) => {
                let h = l0.forward(g, p, x)?;
                let h = g.silu(h)?;
                l1.forward(g, p, h)
            }
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize, hidden: bool) -> usize {
        if hidden {
            let h = Self::hidden_width(in_dim, out_dim);
            Linear::param_count(in_dim, h, true) + Linear::param_count(h, out_dim, true)
        } else {
            Linear::param_count(in_dim, out_dim, true)
        }
    }

    /// Multiply-accumulates for `rows` input vectors.
    pub fn macs(rows: usize, in_dim: usize, out_dim: usize, hidden: bool) -> u64 {
        let per_row = if hidden {
            let h = Self::hidden_width(in_dim, out_dim);
            in_dim * h + h * out_dim
        } else {
            in_dim * out_dim
        };
        (rows * per_row) as u64
    }
}

/// Depthwise causal 1-D convolution, `w: [C, K]` with tap 0 at the current
/// step.
#[derive(Clone, Debug)]
pub struct CausalConv {
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl CausalConv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, kernel: usize) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[channels, kernel], bound));
        let b = store.add(format!("{name}.bias"), uniform(rng, &[channels], bound));
        Self { w, b, channels, kernel }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.causal_conv(x, p[self.w], p[self.b])
    }

    pub fn param_count(channels: usize, kernel: usize) -> usize {
        channels * kernel + channels
    }
}

/// Two-layer regression head: `affine(dropout(silu(affine(x))))` with hidden
/// width `hidden` and a scalar output.
#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), in_dim, hidden, true),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, 1, true),
        }
    }

    /// `[B, in] -> [B, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.silu(h)?;
        let h = ctx.dropout(g, h)?;
        self.out.forward(g, p, h)
    }

    pub fn param_count(in_dim: usize, hidden: usize) -> usize {
        Linear::param_count(in_dim, hidden, true) + Linear::param_count(hidden, 1, true)
    }

    pub fn macs(in_dim: usize, hidden: usize) -> u64 {
        (in_dim * hidden + hidden) as u64
    }
}

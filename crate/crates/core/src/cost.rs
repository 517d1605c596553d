//! Parameter and FLOP accounting.
//!
//! Closed forms, with `d' = expand * d`, `N` the state size, `K` the
//! convolution kernel and `rows = B * L`:
//!
//! ```text
//! affine(i -> o)      i*o (+ o with bias)              MACs rows*i*o
//! ssm(d', N)          d'N + 2(d'N + N) + d'^2 + d'     MACs rows*(2d'N + d'^2) + 3*rows*d'N
//! bssm(d)             affine(d -> d') + affine(d' -> d') + affine(d' -> d)
//!                     + 2 * (conv(d', K) + ssm(d', N))  conv MACs rows*d'*K
//! gcmn layer          bssm(2f) + 2 bssm(f) + 2 affine(2f -> f, no bias)
//!                     + 2 affine(2f -> f)                gates
//! head(i)             affine(i -> f) + affine(f -> 1)
//! ```
//!
//! FLOPs are counted as 2 per multiply-accumulate, at batch 1 with
//! `L = max(K_t, K_a) + 1`. Elementwise operations are not counted.

use serde::{Deserialize, Serialize};

use crate::engine::Graph;
use crate::error::Result;
use crate::model::{Batch, Model, ModelConfig};
use crate::nn::ForwardCtx;

pub const CONVENTION: &str =
    "1 MAC = 2 FLOPs; batch 1; L = max(K_t, K_a) + 1; matmul, depthwise conv and scan MACs only; elementwise ops uncounted";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub param_count: usize,
    pub flops_forward: u64,
    /// Counts taken from a built model and a traced forward pass.
    pub instrumented_params: usize,
    pub instrumented_flops: u64,
    pub seq_len: usize,
    pub convention: String,
}

impl CostReport {
    pub fn consistent(&self) -> bool {
        self.param_count == self.instrumented_params && self.flops_forward == self.instrumented_flops
    }
}

pub fn analytic(cfg: &ModelConfig) -> (usize, u64) {
    (cfg.param_count(), 2 * cfg.macs(1))
}

/// Builds the model and traces one eval-mode forward pass on a zero sample
/// with full contexts.
pub fn instrumented(cfg: &ModelConfig) -> Result<(usize, u64)> {
    let model = Model::new(cfg.clone(), 0)?;
    let sample = crate::data::Sample {
        id: "probe".into(),
        label: 0.0,
        split: crate::data::Split::Test,
        text: vec![0.0; cfg.d_t],
        audio: vec![0.0; cfg.d_a],
        text_ctx: vec![vec![0.0; cfg.d_t]; cfg.k_t],
        audio_ctx: vec![vec![0.0; cfg.d_a]; cfg.k_a],
    };
    let batch = Batch::new(cfg, &[&sample])?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    model.forward(&mut g, &p, &batch, &mut ForwardCtx::eval())?;
    Ok((model.param_count(), 2 * g.macs()))
}

pub fn count_cost(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let (param_count, flops_forward) = analytic(cfg);
    let (instrumented_params, instrumented_flops) = instrumented(cfg)?;
    Ok(CostReport {
        param_count,
        flops_forward,
        instrumented_params,
        instrumented_flops,
        seq_len: cfg.seq_len(),
        convention: CONVENTION.into(),
    })
}

/// Fusion width in `1..=max_f` whose analytic parameter count is closest to
/// `target`, with the rest of `base` fixed.
pub fn nearest_width(base: &ModelConfig, target: usize, max_f: usize) -> (usize, usize, u64) {
    (1..=max_f)
        .map(|f| {
            let cfg = ModelConfig { f, ..base.clone() };
            let (p, fl) = analytic(&cfg);
            (f, p, fl)
        })
        .min_by_key(|(_, p, _)| p.abs_diff(target))
        .expect("non-empty range")
}

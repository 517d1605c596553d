#![allow(dead_code)]

pub mod oracle;

use ctxfuse::data::{Sample, Split};
use ctxfuse::engine::{Graph, Tensor, Var};
use ctxfuse::model::ModelConfig;
use ctxfuse::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// `sum(y * w)` with fixed pseudo-random `w`, so every output element gets a
/// distinct adjoint.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(&mut rng(seed ^ 0x9e37), g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let yw = g.mul(y, w)?;
    g.sum(yw)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_t: 5,
        d_a: 5,
        f: 4,
        layers: 1,
        state_dim: 2,
        kernel: 4,
        expand: 2,
        k_t: 1,
        k_a: 1,
        ..ModelConfig::default()
    }
}

pub fn random_sample(rng: &mut impl Rng, id: usize, cfg: &ModelConfig, n_t: usize, n_a: usize) -> Sample {
    let mut v = |d: usize| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let text = v(cfg.d_t);
    let audio = v(cfg.d_a);
    let text_ctx = (0..n_t).map(|_| v(cfg.d_t)).collect();
    let audio_ctx = (0..n_a).map(|_| v(cfg.d_a)).collect();
    Sample {
        id: format!("r{id}"),
        label: rng.random_range(-3.0..3.0),
        split: Split::Train,
        text,
        audio,
        text_ctx,
        audio_ctx,
    }
}

//! Selective state space layer: input-dependent `B`, `C` and step size over a
//! diagonal, strictly stable state matrix `A = -exp(A_log)`.

pub mod scan;
pub mod zoh;

use rand::Rng;

pub use scan::{ScanAlgo, ScanDims};
pub use zoh::{discretize, ZohMode};

use crate::engine::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::nn::Linear;

pub const DELTA_MIN: f64 = 0.1;
pub const DELTA_MAX: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `[D, N]`, `A = -exp(A_log)`.
    pub a_log: ParamId,
    /// `D -> N`, gives `B_t`.
    pub proj_b: Linear,
    /// `D -> N`, gives `C_t`.
    pub proj_c: Linear,
    /// `D -> D`, softplus of it gives the step size.
    pub proj_delta: Linear,
    pub channels: usize,
    pub state_dim: usize,
    pub zoh: ZohMode,
    pub algo: ScanAlgo,
}

impl SsmParams {
    /// `A[d, n] = -(n + 1)`, unit `B` and `C` biases and step sizes log-uniform in `[DELTA_MIN, DELTA_MAX]`
    /// through the delta bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        state_dim: usize,
        zoh: ZohMode,
        algo: ScanAlgo,
    ) -> Self {
        let a_log = (0..channels * state_dim)
            .map(|i| ((i % state_dim) as f64 + 1.0).ln())
            .collect();
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::new([channels, state_dim], a_log).expect("shape matches data"),
        );
        let proj_b = Linear::new(store, rng, &format!("{name}.proj_b"), channels, state_dim, true);
        let proj_c = Linear::new(store, rng, &format!("{name}.proj_c"), channels, state_dim, true);
        let proj_delta = Linear::new(store, rng, &format!("{name}.proj_delta"), channels, channels, true);
        let bias = (0..channels)
            .map(|_| {
                let dt = (rng.random_range(DELTA_MIN.ln()..DELTA_MAX.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        for proj in [&proj_b, &proj_c] {
            *store.get_mut(proj.b.expect("state projections have biases")) = Tensor::from_vec(vec![1.0; state_dim]);
        }
        *store.get_mut(proj_delta.b.expect("delta projection has a bias")) = Tensor::from_vec(bias);
        Self {
            a_log,
            proj_b,
            proj_c,
            proj_delta,
            channels,
            state_dim,
            zoh,
            algo,
        }
    }

    /// `x: [B, L, D] -> [B, L, D]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let a = g.exp(p[self.a_log])?;
        let a = g.scale(a, -1.0)?;
        let delta = self.proj_delta.forward(g, p, x)?;
        let delta = g.softplus(delta)?;
        let b = self.proj_b.forward(g, p, x)?;
        let c = self.proj_c.forward(g, p, x)?;
        g.selective_scan(x, delta, a, b, c, self.zoh, self.algo)
    }

    fn scan_with(&self, store: &ParamStore, z: &Tensor, algo: ScanAlgo) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(z.clone());
        let layer = Self { algo, ..self.clone() };
        let y = layer.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    /// Left-to-right evaluation of the recurrence on `z: [B, L, D]`.
    pub fn scan_sequential(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        self.scan_with(store, z, ScanAlgo::Sequential)
    }

    /// Tree-scan evaluation of the same recurrence.
    pub fn scan_parallel(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        self.scan_with(store, z, ScanAlgo::Parallel)
    }

    pub fn param_count(channels: usize, state_dim: usize) -> usize {
        channels * state_dim
            + 2 * Linear::param_count(channels, state_dim, true)
            + Linear::param_count(channels, channels, true)
    }

    /// Multiply-accumulates for `rows = B * L` steps.
    pub fn macs(rows: usize, channels: usize, state_dim: usize) -> u64 {
        let proj = rows * (2 * channels * state_dim + channels * channels);
        proj as u64 + 3 * (rows * channels * state_dim) as u64
    }
}

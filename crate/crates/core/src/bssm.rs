//! Bidirectional selective scanning block.
//!
//! ```text
//! Z     = MLP_in(X)                         [B, L, d']
//! Z_fwd = SiLU(conv_fwd(Z))
//! Z_bwd = SiLU(conv_bwd(flip(Z)))
//! O_bi  = SSM_fwd(Z_fwd) * flip(SSM_bwd(Z_bwd))
//! G     = SiLU(MLP_gate(Z))
//! out   = MLP_out(G * O_bi)                 [B, L, d]
//! ```

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{CausalConv, ForwardCtx, Mlp};
use crate::ssm::{ScanAlgo, SsmParams, ZohMode};

/// Per-row range `[start, end)` of real steps; everything else is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepMask {
    len: usize,
    spans: Vec<(usize, usize)>,
}

impl StepMask {
    pub fn full(batch: usize, len: usize) -> Self {
        Self {
            len,
            spans: vec![(0, len); batch],
        }
    }

    pub fn new(len: usize, spans: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(bad) = spans.iter().find(|(s, e)| s >= e || *e > len) {
            return Err(Error::invalid("step_mask", format!("span {bad:?} invalid for length {len}")));
        }
        Ok(Self { len, spans })
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn batch(&self) -> usize {
        self.spans.len()
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn is_full(&self) -> bool {
        self.spans.iter().all(|&(s, e)| s == 0 && e == self.len)
    }

    /// The same mask in reversed time order.
    pub fn flipped(&self) -> Self {
        Self {
            len: self.len,
            spans: self.spans.iter().map(|&(s, e)| (self.len - e, self.len - s)).collect(),
        }
    }

    /// Smallest span covering both masks, row by row.
    pub fn union(&self, other: &StepMask) -> Result<Self> {
        if self.len != other.len || self.batch() != other.batch() {
            return Err(Error::shape(
                "step_mask",
                &[self.batch(), self.len],
                &[other.batch(), other.len],
            ));
        }
        let spans = self
            .spans
            .iter()
            .zip(&other.spans)
            .map(|(a, b)| (a.0.min(b.0), a.1.max(b.1)))
            .collect();
        Ok(Self { len: self.len, spans })
    }

    /// Last real step of each row.
    pub fn readout(&self) -> Vec<usize> {
        self.spans.iter().map(|&(_, e)| e - 1).collect()
    }

    /// Row-major `[B, L]` 0/1 factors.
    pub fn values(&self) -> Rc<[f64]> {
        self.spans
            .iter()
            .flat_map(|&(s, e)| (0..self.len).map(move |t| if (s..e).contains(&t) { 1.0 } else { 0.0 }))
            .collect()
    }

    pub(crate) fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.is_full() {
            Ok(x)
        } else {
            g.mask_steps(x, self.values())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BssmConfig {
    /// Input and output width `d`.
    pub d: usize,
    /// `d' = expand * d`.
    pub expand: usize,
    pub state_dim: usize,
    pub kernel: usize,
    /// One SiLU hidden layer in the in/gate/out projections instead of a
    /// single affine map.
    pub hidden_mlp: bool,
    /// Share the convolution and SSM between the two scan directions.
    pub tied: bool,
    pub zoh: ZohMode,
    pub algo: ScanAlgo,
}

impl BssmConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            expand: 2,
            state_dim: 16,
            kernel: 4,
            hidden_mlp: false,
            tied: false,
            zoh: ZohMode::Exact,
            algo: ScanAlgo::Sequential,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d
    }

    pub fn param_count(&self) -> usize {
        let (d, di) = (self.d, self.inner());
        let directional = CausalConv::param_count(di, self.kernel) + SsmParams::param_count(di, self.state_dim);
        Mlp::param_count(d, di, self.hidden_mlp)
            + Mlp::param_count(di, di, self.hidden_mlp)
            + Mlp::param_count(di, d, self.hidden_mlp)
            + if self.tied { 1 } else { 2 } * directional
    }

    /// Multiply-accumulates for `rows = B * L` steps.
    pub fn macs(&self, rows: usize) -> u64 {
        let (d, di) = (self.d, self.inner());
        Mlp::macs(rows, d, di, self.hidden_mlp)
            + Mlp::macs(rows, di, di, self.hidden_mlp)
            + Mlp::macs(rows, di, d, self.hidden_mlp)
            + 2 * (rows * di * self.kernel) as u64
            + 2 * SsmParams::macs(rows, di, self.state_dim)
    }
}

#[derive(Clone, Debug)]
pub struct BssmBlock {
    pub cfg: BssmConfig,
    pub mlp_in: Mlp,
    pub conv_fwd: CausalConv,
    pub conv_bwd: CausalConv,
    pub ssm_fwd: SsmParams,
    pub ssm_bwd: SsmParams,
    pub mlp_gate: Mlp,
    pub mlp_out: Mlp,
}

impl BssmBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: BssmConfig) -> Result<Self> {
        if cfg.d == 0 || cfg.expand == 0 || cfg.state_dim == 0 || cfg.kernel == 0 {
            return Err(Error::invalid("bssm", format!("all dimensions must be positive: {cfg:?}")));
        }
        let (d, di) = (cfg.d, cfg.inner());
        let mlp_in = Mlp::new(store, rng, &format!("{name}.mlp_in"), d, di, cfg.hidden_mlp);
        let conv_fwd = CausalConv::new(store, rng, &format!("{name}.conv_fwd"), di, cfg.kernel);
        let ssm_fwd = SsmParams::new(store, rng, &format!("{name}.ssm_fwd"), di, cfg.state_dim, cfg.zoh, cfg.algo);
        let (conv_bwd, ssm_bwd) = if cfg.tied {
            (conv_fwd.clone(), ssm_fwd.clone())
        } else {
            (
                CausalConv::new(store, rng, &format!("{name}.conv_bwd"), di, cfg.kernel),
                SsmParams::new(store, rng, &format!("{name}.ssm_bwd"), di, cfg.state_dim, cfg.zoh, cfg.algo),
            )
        };
        let mlp_gate = Mlp::new(store, rng, &format!("{name}.mlp_gate"), di, di, cfg.hidden_mlp);
        let mlp_out = Mlp::new(store, rng, &format!("{name}.mlp_out"), di, d, cfg.hidden_mlp);
        Ok(Self {
            cfg,
            mlp_in,
            conv_fwd,
            conv_bwd,
            ssm_fwd,
            ssm_bwd,
            mlp_gate,
            mlp_out,
        })
    }

    /// `x: [B, L, d] -> [B, L, d]`. Padded steps of `mask` are zeroed before
    /// the convolutions and before both scans, so they never reach a real
    /// step.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mask: Option<&StepMask>, ctx: &mut ForwardCtx) -> Result<Var> {
        let (_, len, d) = g.value(x).dims3()?;
        if d != self.cfg.d {
            return Err(Error::shape("bssm", g.shape(x), &[self.cfg.d]));
        }
        if let Some(m) = mask {
            if m.len() != len || m.batch() != g.shape(x)[0] {
                return Err(Error::shape("bssm", g.shape(x), &[m.batch(), m.len()]));
            }
        }
        let mut z = self.mlp_in.forward(g, p, x)?;
        if let Some(m) = mask {
            z = m.apply(g, z)?;
        }

        let zf = self.conv_fwd.forward(g, p, z)?;
        let mut zf = g.silu(zf)?;
        let z_rev = g.flip(z, 1)?;
        let zb = self.conv_bwd.forward(g, p, z_rev)?;
        let mut zb = g.silu(zb)?;
        if let Some(m) = mask {
            zf = m.apply(g, zf)?;
            zb = m.flipped().apply(g, zb)?;
        }

        let of = self.ssm_fwd.forward(g, p, zf)?;
        let ob = self.ssm_bwd.forward(g, p, zb)?;
        let ob = g.flip(ob, 1)?;
        let o_bi = g.mul(of, ob)?;

        let gate = self.mlp_gate.forward(g, p, z)?;
        let gate = g.silu(gate)?;
        let gated = g.mul(gate, o_bi)?;
        let out = self.mlp_out.forward(g, p, gated)?;
        ctx.dropout(g, out)
    }

    /// Eval-mode forward on a plain tensor.
    pub fn apply(&self, store: &ParamStore, x: &crate::engine::Tensor) -> Result<crate::engine::Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(x.clone());
        let y = self.forward(&mut g, &p, x, None, &mut ForwardCtx::eval())?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_flip_and_union() {
        let m = StepMask::new(4, vec![(1, 4), (0, 4)]).unwrap();
        assert_eq!(m.flipped().spans(), &[(0, 3), (0, 4)]);
        assert_eq!(m.flipped().flipped(), m);
        assert_eq!(m.readout(), vec![3, 3]);
        assert_eq!(m.flipped().readout(), vec![2, 3]);
        let other = StepMask::new(4, vec![(2, 4), (3, 4)]).unwrap();
        assert_eq!(m.union(&other).unwrap().spans(), &[(1, 4), (0, 4)]);
        assert_eq!(&*m.values(), &[0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(StepMask::new(3, vec![(2, 2)]).is_err());
    }

    #[test]
    fn untied_directions_have_distinct_parameters() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let block = BssmBlock::new(&mut store, &mut rng, "b", BssmConfig::new(3)).unwrap();
        assert_ne!(block.conv_fwd.w, block.conv_bwd.w);
        assert_ne!(block.ssm_fwd.a_log, block.ssm_bwd.a_log);
        assert_eq!(store.param_count(), block.cfg.param_count());

        let mut tied_cfg = BssmConfig::new(3);
        tied_cfg.tied = true;
        let mut store = ParamStore::new();
        let tied = BssmBlock::new(&mut store, &mut rng, "b", tied_cfg).unwrap();
        assert_eq!(tied.conv_fwd.w, tied.conv_bwd.w);
        assert_eq!(store.param_count(), tied_cfg.param_count());
    }

    use rand_chacha::rand_core::SeedableRng;
}

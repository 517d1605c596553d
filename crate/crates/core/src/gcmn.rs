//! Gated cross-modal layer and its N-layer, two-direction stack.
//!
//! One layer, for `m` in {text, audio}:
//!
//! ```text
//! H_cross   = BSSM_cross([S_a || S_t])            feature-axis concat, padded steps zeroed
//! F_cross^m = H_cross[last] W_c->m
//! F_uni^m   = BSSM_m(S_m)[last]
//! G^m       = sigmoid([F_cross^t || F_cross^a] W_g^m + b_g^m)
//! F_final^m = F_uni^m + G^m * F_cross^m
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bssm::{BssmBlock, BssmConfig, StepMask};
use crate::engine::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Linear};
use crate::ssm::{ScanAlgo, ZohMode};

/// Weight of the cross-modal stream under [`GateMode::Fixed`].
pub const FIXED_GATE: f64 = 0.5;

/// How cross-modal and unimodal streams are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// `F_uni + sigmoid(..) * F_cross`.
    #[default]
    Learnable,
    /// `F_uni + 0.5 * F_cross`.
    Fixed,
    /// `F_cross` only; no unimodal blocks.
    Single,
}

/// Feature order of the cross-modal input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossOrder {
    #[default]
    AudioFirst,
    TextFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcmnConfig {
    /// Fusion width `f`.
    pub f: usize,
    pub gate: GateMode,
    pub cross_order: CrossOrder,
    pub expand: usize,
    pub state_dim: usize,
    pub kernel: usize,
    pub hidden_mlp: bool,
    pub zoh: ZohMode,
    pub algo: ScanAlgo,
}

impl GcmnConfig {
    pub fn new(f: usize) -> Self {
        Self {
            f,
            gate: GateMode::Learnable,
            cross_order: CrossOrder::AudioFirst,
            expand: 2,
            state_dim: 16,
            kernel: 4,
            hidden_mlp: false,
            zoh: ZohMode::Exact,
            algo: ScanAlgo::Sequential,
        }
    }

    pub fn bssm(&self, d: usize) -> BssmConfig {
        BssmConfig {
            d,
            expand: self.expand,
            state_dim: self.state_dim,
            kernel: self.kernel,
            hidden_mlp: self.hidden_mlp,
            tied: false,
            zoh: self.zoh,
            algo: self.algo,
        }
    }

    pub fn layer_param_count(&self) -> usize {
        let f = self.f;
        let mut n = self.bssm(2 * f).param_count() + 2 * Linear::param_count(2 * f, f, false);
        if self.gate != GateMode::Single {
            n += 2 * self.bssm(f).param_count();
        }
        if self.gate == GateMode::Learnable {
            n += 2 * Linear::param_count(2 * f, f, true);
        }
        n
    }

    /// Multiply-accumulates of one layer pass over `batch` rows of length `len`.
    pub fn layer_macs(&self, batch: usize, len: usize) -> u64 {
        let (f, rows) = (self.f, batch * len);
        let mut n = self.bssm(2 * f).macs(rows);
        if self.gate == GateMode::Single {
            n += 2 * (rows * 2 * f * f) as u64;
        } else {
            n += 2 * self.bssm(f).macs(rows) + 2 * (batch * 2 * f * f) as u64;
        }
        if self.gate == GateMode::Learnable {
            n += 2 * (batch * 2 * f * f) as u64;
        }
        n
    }
}

#[derive(Clone, Debug)]
pub struct GcmnLayer {
    pub cfg: GcmnConfig,
    pub cross: BssmBlock,
    pub text: Option<BssmBlock>,
    pub audio: Option<BssmBlock>,
    pub c2t: Linear,
    pub c2a: Linear,
    pub gate_t: Option<Linear>,
    pub gate_a: Option<Linear>,
}

/// Outputs of one layer pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub final_t: Var,
    pub final_a: Var,
    /// `(G_t, G_a)` under [`GateMode::Learnable`].
    pub gates: Option<(Var, Var)>,
    /// Per-step unimodal features `[B, L, f]` (decoupled cross features under
    /// [`GateMode::Single`]).
    pub steps_t: Var,
    pub steps_a: Var,
}

impl GcmnLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: GcmnConfig) -> Result<Self> {
        let f = cfg.f;
        let cross = BssmBlock::new(store, rng, &format!("{name}.cross"), cfg.bssm(2 * f))?;
        let (text, audio) = if cfg.gate == GateMode::Single {
            (None, None)
        } else {
            (
                Some(BssmBlock::new(store, rng, &format!("{name}.text"), cfg.bssm(f))?),
                Some(BssmBlock::new(store, rng, &format!("{name}.audio"), cfg.bssm(f))?),
            )
        };
        let c2t = Linear::new(store, rng, &format!("{name}.c2t"), 2 * f, f, false);
        let c2a = Linear::new(store, rng, &format!("{name}.c2a"), 2 * f, f, false);
        let (gate_t, gate_a) = if cfg.gate == GateMode::Learnable {
            (
                Some(Linear::new(store, rng, &format!("{name}.gate_t"), 2 * f, f, true)),
                Some(Linear::new(store, rng, &format!("{name}.gate_a"), 2 * f, f, true)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            cfg,
            cross,
            text,
            audio,
            c2t,
            c2a,
            gate_t,
            gate_a,
        })
    }

    /// One pass over `s_t, s_a: [B, L, f]`. Finals are read at the last real
    /// step of each mask.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        s_t: Var,
        s_a: Var,
        mask_t: &StepMask,
        mask_a: &StepMask,
        ctx: &mut ForwardCtx,
    ) -> Result<LayerOutput> {
        let (bt, lt, ft) = g.value(s_t).dims3()?;
        if g.shape(s_t) != g.shape(s_a) {
            return Err(Error::shape("gcmn_layer", g.shape(s_t), g.shape(s_a)));
        }
        if ft != self.cfg.f {
            return Err(Error::shape("gcmn_layer", g.shape(s_t), &[self.cfg.f]));
        }
        if [mask_t, mask_a].iter().any(|m| m.batch() != bt || m.len() != lt) {
            return Err(Error::shape("gcmn_layer", g.shape(s_t), &[mask_t.batch(), mask_t.len()]));
        }
        let mask_c = mask_t.union(mask_a)?;
        let masked_t = mask_t.apply(g, s_t)?;
        let masked_a = mask_a.apply(g, s_a)?;
        let cross_in = match self.cfg.cross_order {
            CrossOrder::AudioFirst => g.concat(&[masked_a, masked_t], 2)?,
            CrossOrder::TextFirst => g.concat(&[masked_t, masked_a], 2)?,
        };
        let h = self.cross.forward(g, p, cross_in, Some(&mask_c), ctx)?;
        let read_c = mask_c.readout();

        let (Some(text), Some(audio)) = (&self.text, &self.audio) else {
            let steps_t = self.c2t.forward(g, p, h)?;
            let steps_a = self.c2a.forward(g, p, h)?;
            return Ok(LayerOutput {
                final_t: g.select_steps(steps_t, &read_c)?,
                final_a: g.select_steps(steps_a, &read_c)?,
                gates: None,
                steps_t,
                steps_a,
            });
        };

        let h_last = g.select_steps(h, &read_c)?;
        let cross_t = self.c2t.forward(g, p, h_last)?;
        let cross_a = self.c2a.forward(g, p, h_last)?;
        let steps_t = text.forward(g, p, s_t, Some(mask_t), ctx)?;
        let steps_a = audio.forward(g, p, s_a, Some(mask_a), ctx)?;
        let uni_t = g.select_steps(steps_t, &mask_t.readout())?;
        let uni_a = g.select_steps(steps_a, &mask_a.readout())?;

        let (weighted_t, weighted_a, gates) = match (&self.gate_t, &self.gate_a) {
            (Some(wt), Some(wa)) => {
                let joint = g.concat(&[cross_t, cross_a], 1)?;
                let gt = wt.forward(g, p, joint)?;
                let gt = g.sigmoid(gt)?;
                let ga = wa.forward(g, p, joint)?;
                let ga = g.sigmoid(ga)?;
                (g.mul(gt, cross_t)?, g.mul(ga, cross_a)?, Some((gt, ga)))
            }
            _ => (g.scale(cross_t, FIXED_GATE)?, g.scale(cross_a, FIXED_GATE)?, None),
        };
        Ok(LayerOutput {
            final_t: g.add(uni_t, weighted_t)?,
            final_a: g.add(uni_a, weighted_a)?,
            gates,
            steps_t,
            steps_a,
        })
    }
}

/// Which passes a stack runs over the context-to-main sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionSchedule {
    /// Context-to-main only; no context finals.
    MainOnly,
    /// Context-to-main, plus a main-to-context pass of the last layer over
    /// the reversed sequence with the same parameters.
    #[default]
    Bidirectional,
}

#[derive(Clone, Debug)]
pub struct GcmnStack {
    pub layers: Vec<GcmnLayer>,
    pub schedule: DirectionSchedule,
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    pub final_t: Var,
    pub final_a: Var,
    /// Finals at the oldest real context step, from the reversed pass.
    pub ctx_t: Option<Var>,
    pub ctx_a: Option<Var>,
    /// Main-pass gates of every layer.
    pub gates: Vec<Option<(Var, Var)>>,
}

impl GcmnStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: GcmnConfig,
        layers: usize,
        schedule: DirectionSchedule,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("gcmn_stack", "at least one layer is required"));
        }
        let layers = (0..layers)
            .map(|k| GcmnLayer::new(store, rng, &format!("{name}.{k}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { layers, schedule })
    }

    /// Runs every layer over the sequence. Between layers the last (main)
    /// step of each modality is replaced by that layer's final feature while
    /// the earlier steps carry the layer's per-step unimodal outputs.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        s_t: Var,
        s_a: Var,
        mask_t: &StepMask,
        mask_a: &StepMask,
        ctx: &mut ForwardCtx,
    ) -> Result<StackOutput> {
        let (_, len, _) = g.value(s_t).dims3()?;
        if self.schedule == DirectionSchedule::Bidirectional && len < 2 {
            return Err(Error::invalid(
                "gcmn_stack",
                format!("context finals need at least 2 steps, got {len}"),
            ));
        }
        let (mut st, mut sa) = (s_t, s_a);
        let mut gates = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(g, p, st, sa, mask_t, mask_a, ctx)?;
            gates.push(out.gates);
            if k < last {
                st = reinject(g, out.steps_t, out.final_t)?;
                sa = reinject(g, out.steps_a, out.final_a)?;
                continue;
            }
            let (ctx_t, ctx_a) = if self.schedule == DirectionSchedule::Bidirectional {
                let rt = g.flip(st, 1)?;
                let ra = g.flip(sa, 1)?;
                let rev = layer.forward(g, p, rt, ra, &mask_t.flipped(), &mask_a.flipped(), ctx)?;
                (Some(rev.final_t), Some(rev.final_a))
            } else {
                (None, None)
            };
            return Ok(StackOutput {
                final_t: out.final_t,
                final_a: out.final_a,
                ctx_t,
                ctx_a,
                gates,
            });
        }
        unreachable!("stack has at least one layer")
    }
}

/// `steps[:, :L-1] ++ final` along time.
pub fn reinject(g: &mut Graph, steps: Var, final_: Var) -> Result<Var> {
    let (b, len, f) = g.value(steps).dims3()?;
    let last = g.reshape(final_, &[b, 1, f])?;
    if len == 1 {
        return Ok(last);
    }
    let head = g.slice(steps, 1, 0, len - 1)?;
    g.concat(&[head, last], 1)
}

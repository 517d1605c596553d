//! End-to-end model: modality projections, context-to-main sequences, the
//! fusion stack, three regression heads and the multi-task loss.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bssm::StepMask;
use crate::data::Sample;
use crate::engine::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::gcmn::{CrossOrder, DirectionSchedule, GateMode, GcmnConfig, GcmnStack};
use crate::nn::{ForwardCtx, Head, Linear};
use crate::ssm::{ScanAlgo, ZohMode};

/// How context utterances enter the fusion stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Contexts are earlier steps of the scanned sequence.
    #[default]
    Sequence,
    /// Contexts are concatenated onto the main feature before projection;
    /// the stack sees a single step.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_t: usize,
    pub d_a: usize,
    pub f: usize,
    pub layers: usize,
    pub state_dim: usize,
    pub kernel: usize,
    pub expand: usize,
    pub k_t: usize,
    pub k_a: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub dropout: f64,
    pub context: ContextMode,
    pub gate: GateMode,
    pub cross_order: CrossOrder,
    pub hidden_mlp: bool,
    pub zoh: ZohMode,
    pub algo: ScanAlgo,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_t: 16,
            d_a: 8,
            f: 16,
            layers: 2,
            state_dim: 16,
            kernel: 4,
            expand: 2,
            k_t: 2,
            k_a: 1,
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            dropout: 0.3,
            context: ContextMode::Sequence,
            gate: GateMode::Learnable,
            cross_order: CrossOrder::AudioFirst,
            hidden_mlp: false,
            zoh: ZohMode::Exact,
            algo: ScanAlgo::Sequential,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_t", self.d_t),
            ("d_a", self.d_a),
            ("f", self.f),
            ("layers", self.layers),
            ("state_dim", self.state_dim),
            ("kernel", self.kernel),
            ("expand", self.expand),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        let weights = [self.alpha, self.beta, self.gamma];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not all zero, got {weights:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Sequence length seen by the fusion stack.
    pub fn seq_len(&self) -> usize {
        match self.context {
            ContextMode::Sequence => self.k_t.max(self.k_a) + 1,
            ContextMode::Concat => 1,
        }
    }

    pub fn schedule(&self) -> DirectionSchedule {
        if self.seq_len() >= 2 {
            DirectionSchedule::Bidirectional
        } else {
            DirectionSchedule::MainOnly
        }
    }

    pub fn gcmn(&self) -> GcmnConfig {
        GcmnConfig {
            f: self.f,
            gate: self.gate,
            cross_order: self.cross_order,
            expand: self.expand,
            state_dim: self.state_dim,
            kernel: self.kernel,
            hidden_mlp: self.hidden_mlp,
            zoh: self.zoh,
            algo: self.algo,
        }
    }

    /// Input widths of the text and audio projections.
    pub fn proj_in(&self) -> (usize, usize) {
        match self.context {
            ContextMode::Sequence => (self.d_t, self.d_a),
            ContextMode::Concat => (self.d_t * (self.k_t + 1), self.d_a * (self.k_a + 1)),
        }
    }

    /// Input widths of the text and audio heads.
    pub fn head_in(&self) -> (usize, usize) {
        (self.d_t * (self.k_t + 1), self.d_a * (self.k_a + 1))
    }

    /// Width of the fused feature fed to the main head.
    pub fn embed_dim(&self) -> usize {
        4 * self.f
    }

    pub fn param_count(&self) -> usize {
        let (pt, pa) = self.proj_in();
        let (ht, ha) = self.head_in();
        Linear::param_count(pt, self.f, false)
            + Linear::param_count(pa, self.f, false)
            + self.layers * self.gcmn().layer_param_count()
            + Head::param_count(ht, self.f)
            + Head::param_count(ha, self.f)
            + Head::param_count(self.embed_dim(), self.f)
    }

    /// Multiply-accumulates of one forward pass over `batch` samples.
    pub fn macs(&self, batch: usize) -> u64 {
        let len = self.seq_len();
        let (pt, pa) = self.proj_in();
        let (ht, ha) = self.head_in();
        let gcmn = self.gcmn();
        let passes = self.layers + usize::from(self.schedule() == DirectionSchedule::Bidirectional);
        (batch * len * (pt + pa) * self.f) as u64
            + passes as u64 * gcmn.layer_macs(batch, len)
            + batch as u64 * (Head::macs(ht, self.f) + Head::macs(ha, self.f) + Head::macs(self.embed_dim(), self.f))
    }
}

/// Raw model inputs for one batch, padded and masked per the config.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Stack inputs before projection: `[B, L, d]` in sequence mode,
    /// `[B, 1, d(K+1)]` in concat mode.
    pub seq_t: Tensor,
    pub seq_a: Tensor,
    pub mask_t: StepMask,
    pub mask_a: StepMask,
    /// Head inputs `[main || ctx_1 .. ctx_K]`, contexts oldest first.
    pub head_t: Tensor,
    pub head_a: Tensor,
    pub labels: Tensor,
}

impl Batch {
    /// The newest `K` contexts of each sample are used; missing older slots
    /// are zero and masked.
    pub fn new(cfg: &ModelConfig, samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("batch", "empty batch"));
        }
        let (text, text_mask, head_t) = modality(cfg, samples, cfg.d_t, cfg.k_t, |s| (&s.text, &s.text_ctx))?;
        let (audio, audio_mask, head_a) = modality(cfg, samples, cfg.d_a, cfg.k_a, |s| (&s.audio, &s.audio_ctx))?;
        Ok(Self {
            seq_t: text,
            seq_a: audio,
            mask_t: text_mask,
            mask_a: audio_mask,
            head_t,
            head_a,
            labels: Tensor::new([samples.len(), 1], samples.iter().map(|s| s.label).collect())?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type Fields<'a> = (&'a Vec<f64>, &'a Vec<Vec<f64>>);

fn modality<'a>(
    cfg: &ModelConfig,
    samples: &[&'a Sample],
    dim: usize,
    k: usize,
    fields: impl Fn(&'a Sample) -> Fields<'a>,
) -> Result<(Tensor, StepMask, Tensor)> {
    let len = cfg.seq_len();
    let batch = samples.len();
    let mut head = Vec::with_capacity(batch * dim * (k + 1));
    let mut seq = Vec::with_capacity(batch * len * dim * if len == 1 { k + 1 } else { 1 });
    let mut spans = Vec::with_capacity(batch);
    for s in samples {
        let (main, ctx) = fields(s);
        if main.len() != dim || ctx.iter().any(|c| c.len() != dim) {
            return Err(Error::Record {
                id: s.id.clone(),
                msg: format!("feature width differs from model dimension {dim}"),
            });
        }
        let used = ctx.len().min(k);
        let pad = k - used;
        let newest = &ctx[ctx.len() - used..];

        head.extend_from_slice(main);
        head.extend(std::iter::repeat_n(0.0, pad * dim));
        newest.iter().for_each(|c| head.extend_from_slice(c));

        match cfg.context {
            ContextMode::Sequence => {
                seq.extend(std::iter::repeat_n(0.0, (len - 1 - used) * dim));
                newest.iter().for_each(|c| seq.extend_from_slice(c));
                seq.extend_from_slice(main);
                spans.push((len - 1 - used, len));
            }
            ContextMode::Concat => {
                seq.extend_from_slice(&head[head.len() - dim * (k + 1)..]);
                spans.push((0, 1));
            }
        }
    }
    let width = seq.len() / (batch * len);
    Ok((
        Tensor::new([batch, len, width], seq)?,
        StepMask::new(len, spans)?,
        Tensor::new([batch, dim * (k + 1)], head)?,
    ))
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[B, 1]` each.
    pub y_t: Var,
    pub y_a: Var,
    pub y_m: Var,
    /// `[B, 4f]` main-head input.
    pub embed: Var,
    pub gates: Vec<Option<(Var, Var)>>,
}

/// Detached forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_t: Vec<f64>,
    pub y_a: Vec<f64>,
    pub y_m: Vec<f64>,
    /// `(G_t, G_a)` per layer, `[B, f]` each, when gates are learnable.
    pub gates: Vec<Option<(Tensor, Tensor)>>,
    pub embeddings: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub proj_t: Linear,
    pub proj_a: Linear,
    pub stack: GcmnStack,
    pub head_t: Head,
    pub head_a: Head,
    pub head_m: Head,
}

impl Model {
    /// Parameters are drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (pt, pa) = cfg.proj_in();
        let (ht, ha) = cfg.head_in();
        let proj_t = Linear::new(&mut store, &mut rng, "proj_t", pt, cfg.f, false);
        let proj_a = Linear::new(&mut store, &mut rng, "proj_a", pa, cfg.f, false);
        let stack = GcmnStack::new(&mut store, &mut rng, "gcmn", cfg.gcmn(), cfg.layers, cfg.schedule())?;
        let head_t = Head::new(&mut store, &mut rng, "head_t", ht, cfg.f);
        let head_a = Head::new(&mut store, &mut rng, "head_a", ha, cfg.f);
        let head_m = Head::new(&mut store, &mut rng, "head_m", cfg.embed_dim(), cfg.f);
        Ok(Self {
            cfg,
            store,
            proj_t,
            proj_a,
            stack,
            head_t,
            head_a,
            head_m,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &Batch, ctx: &mut ForwardCtx) -> Result<ForwardOut> {
        let b = batch.len();
        let xt = g.constant(batch.seq_t.clone());
        let xa = g.constant(batch.seq_a.clone());
        let st = self.proj_t.forward(g, p, xt)?;
        let sa = self.proj_a.forward(g, p, xa)?;
        let out = self.stack.forward(g, p, st, sa, &batch.mask_t, &batch.mask_a, ctx)?;

        let zeros = || Tensor::zeros([b, self.cfg.f]);
        let ctx_t = match out.ctx_t {
            Some(v) => v,
            None => g.constant(zeros()),
        };
        let ctx_a = match out.ctx_a {
            Some(v) => v,
            None => g.constant(zeros()),
        };
        let embed = g.concat(&[out.final_t, out.final_a, ctx_t, ctx_a], 1)?;

        let ht = g.constant(batch.head_t.clone());
        let ha = g.constant(batch.head_a.clone());
        let y_t = self.head_t.forward(g, p, ht, ctx)?;
        let y_a = self.head_a.forward(g, p, ha, ctx)?;
        let y_m = self.head_m.forward(g, p, embed, ctx)?;
        Ok(ForwardOut {
            y_t,
            y_a,
            y_m,
            embed,
            gates: out.gates,
        })
    }

    /// `alpha * MSE(y_t) + beta * MSE(y_a) + gamma * MSE(y_m)`.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOut, labels: Var) -> Result<Var> {
        weighted_loss(g, [out.y_t, out.y_a, out.y_m], labels, [self.cfg.alpha, self.cfg.beta, self.cfg.gamma])
    }

    /// Eval-mode forward with detached outputs.
    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward(&mut g, &p, batch, &mut ForwardCtx::eval())?;
        let col = |v: Var| g.value(v).data().to_vec();
        Ok(Prediction {
            y_t: col(out.y_t),
            y_a: col(out.y_a),
            y_m: col(out.y_m),
            gates: out
                .gates
                .iter()
                .map(|gate| gate.map(|(t, a)| (g.value(t).clone(), g.value(a).clone())))
                .collect(),
            embeddings: g.value(out.embed).clone(),
        })
    }
}

/// Weighted sum of per-branch mean squared errors.
pub fn weighted_loss(g: &mut Graph, preds: [Var; 3], labels: Var, weights: [f64; 3]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (pred, w) in preds.into_iter().zip(weights) {
        let mse = g.mse(pred, labels)?;
        let term = g.scale(mse, w)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("three branches"))
}

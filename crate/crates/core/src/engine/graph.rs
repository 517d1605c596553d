//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed op together with its output value.
//! Nodes are appended in execution order, so walking the node list backwards
//! replays the adjoints in reverse topological order without an explicit
//! sort.

use std::rc::Rc;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::ssm::scan::{self, ScanAlgo, ScanDims};
use crate::ssm::zoh::ZohMode;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Flip { input: Var, axis: usize },
    Reshape(Var),
    CausalConv { x: Var, w: Var, b: Var },
    Dropout { x: Var, mask: Vec<f64> },
    MaskSteps { x: Var, mask: Rc<[f64]> },
    SelectSteps { x: Var, idx: Vec<usize> },
    Mse(Var, Var),
    Sum(Var),
    SelectiveScan {
        inputs: [Var; 5],
        zoh: ZohMode,
        states: Vec<f64>,
        decay_m1: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation.
///
/// Confined to one thread; build one graph per forward/backward step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// `(outer, dim, inner)` extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by the forward ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, op_name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data)?;
        self.push(op_name, value, op, &[x])
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(op_name, value, op, &[a, b])
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a vector along the last axis.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("bias_add", sx, sb));
        }
        let n = sb[0];
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push("bias_add", value, Op::BiasAdd(x, b), &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |v| c * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map("silu", x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let dim = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push("slice", value, Op::Slice { input: x, axis, start }, &[x])
    }

    /// Reverses `x` along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("flip", format!("axis {axis} out of range for {shape:?}")));
        }
        let value = Tensor::new(shape.clone(), flip_data(self.value(x).data(), &shape, axis))?;
        self.push("flip", value, Op::Flip { input: x, axis }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Depthwise causal convolution of `x: [B, L, C]` with `w: [C, K]` and
    /// `b: [C]`: `y[t, c] = b[c] + sum_k w[c, k] * x[t - k, c]`, treating
    /// `x[t < 0]` as zero. Tap `k = 0` is the current step.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bsz, len, ch) = self.value(x).dims3()?;
        let sw = self.shape(w);
        if sw.len() != 2 || sw[0] != ch {
            return Err(Error::shape("causal_conv", self.shape(x), sw));
        }
        let k = sw[1];
        if self.shape(b) != [ch] {
            return Err(Error::shape("causal_conv", self.shape(x), self.shape(b)));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bsz * len * ch];
        for bi in 0..bsz {
            for t in 0..len {
                let row = &mut out[(bi * len + t) * ch..(bi * len + t + 1) * ch];
                for c in 0..ch {
                    let mut acc = bd[c];
                    for tap in 0..k.min(t + 1) {
                        acc += wd[c * k + tap] * xd[(bi * len + t - tap) * ch + c];
                    }
                    row[c] = acc;
                }
            }
        }
        self.macs += (bsz * len * ch * k) as u64;
        let value = Tensor::new([bsz, len, ch], out)?;
        self.push("causal_conv", value, Op::CausalConv { x, w, b }, &[x, w, b])
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. `p == 0` returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Multiplies `x: [B, L, D]` by a constant per-step factor `mask[b * L + t]`.
    pub fn mask_steps(&mut self, x: Var, mask: Rc<[f64]>) -> Result<Var> {
        let (bsz, len, d) = self.value(x).dims3()?;
        if mask.len() != bsz * len {
            return Err(Error::shape("mask_steps", &[bsz, len], &[mask.len()]));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * mask[i / d])
            .collect();
        let value = Tensor::new([bsz, len, d], data)?;
        self.push("mask_steps", value, Op::MaskSteps { x, mask }, &[x])
    }

    /// Reads step `idx[b]` of every batch row: `[B, L, D] -> [B, D]`.
    pub fn select_steps(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (bsz, len, d) = self.value(x).dims3()?;
        if idx.len() != bsz || idx.iter().any(|&t| t >= len) {
            return Err(Error::invalid(
                "select_steps",
                format!("indices {idx:?} invalid for shape {:?}", [bsz, len, d]),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(bsz * d);
        for (b, &t) in idx.iter().enumerate() {
            data.extend_from_slice(&src[(b * len + t) * d..(b * len + t + 1) * d]);
        }
        let value = Tensor::new([bsz, d], data)?;
        self.push(
            "select_steps",
            value,
            Op::SelectSteps {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let sum: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sum / p.len() as f64);
        self.push("mse", value, Op::Mse(pred, target), &[pred, target])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// Selective scan over `x, delta: [B, L, D]`, diagonal state matrix
    /// `a: [D, N]` and per-step `b, c: [B, L, N]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        zoh: ZohMode,
        algo: ScanAlgo,
    ) -> Result<Var> {
        let (bsz, len, d) = self.value(x).dims3()?;
        self.same_shape("selective_scan", x, delta)?;
        let n = match self.shape(a) {
            [ad, n] if *ad == d => *n,
            other => return Err(Error::shape("selective_scan", self.shape(x), other)),
        };
        for v in [b, c] {
            if self.shape(v) != [bsz, len, n] {
                return Err(Error::shape("selective_scan", &[bsz, len, n], self.shape(v)));
            }
        }
        let dims = ScanDims {
            batch: bsz,
            len,
            channels: d,
            state: n,
        };
        let out = scan::forward(
            dims,
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            zoh,
            algo,
        )?;
        self.macs += dims.macs();
        let value = Tensor::new([bsz, len, d], out.y)?;
        let inputs = [x, delta, a, b, c];
        self.push(
            "selective_scan",
            value,
            Op::SelectiveScan {
                inputs,
                zoh,
                states: out.states,
                decay_m1: out.decay_m1,
            },
            &inputs,
        )
    }

    /// Accumulates `d loss / d v` into every `requires_grad` node reachable
    /// from `loss`.
    ///
    /// Gradients accumulate across calls; use [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::full(shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(gout) = adj[i].take() else { continue };
            for (v, g) in self.vjp(i, &gout)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&gout),
                slot @ None => *slot = Some(gout),
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for output adjoint `gout`.
    fn vjp(&self, i: usize, gout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let g = gout.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.numel() / k;
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    out.push((*a, like(*a, da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            for (acc, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *acc += av * gv;
                            }
                        }
                    }
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::BiasAdd(x, b) => {
                if self.needs(*x) {
                    out.push((*x, gout.clone()));
                }
                if self.needs(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, like(*b, g.iter().map(|v| -v).collect())?));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    out.push((*a, like(*a, g.iter().zip(tb).map(|(x, y)| x * y).collect())?));
                }
                if self.needs(*b) {
                    out.push((*b, like(*b, g.iter().zip(ta).map(|(x, y)| x * y).collect())?));
                }
            }
            Op::Scale(x, c) => {
                out.push((*x, like(*x, g.iter().map(|v| c * v).collect())?));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Silu(x) => {
                let xs = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xs)
                    .map(|(gv, &v)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Softplus(x) => {
                let xs = self.value(*x).data();
                let d = g.iter().zip(xs).map(|(gv, &v)| gv * sigmoid(v)).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                out.push((*x, like(*x, g.iter().zip(y).map(|(a, b)| a * b).collect())?));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let dim = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + dim * inner]);
                        }
                        out.push((v, like(v, d)?));
                    }
                    offset += dim;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*input), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                out.push((*input, like(*input, d)?));
            }
            Op::Flip { input, axis } => {
                out.push((*input, like(*input, flip_data(g, gout.shape(), *axis))?));
            }
            Op::Reshape(x) => {
                out.push((*x, like(*x, g.to_vec())?));
            }
            Op::CausalConv { x, w, b } => {
                let (bsz, len, ch) = self.value(*x).dims3()?;
                let k = self.shape(*w)[1];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; ch];
                for bi in 0..bsz {
                    for t in 0..len {
                        for c in 0..ch {
                            let gv = g[(bi * len + t) * ch + c];
                            db[c] += gv;
                            for tap in 0..k.min(t + 1) {
                                let xi = (bi * len + t - tap) * ch + c;
                                dw[c * k + tap] += gv * xd[xi];
                                dx[xi] += gv * wd[c * k + tap];
                            }
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
                out.push((*w, like(*w, dw)?));
                out.push((*b, like(*b, db)?));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, like(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect())?));
            }
            Op::MaskSteps { x, mask } => {
                let d = self.shape(*x)[2];
                let dx = g.iter().enumerate().map(|(j, gv)| gv * mask[j / d]).collect();
                out.push((*x, like(*x, dx)?));
            }
            Op::SelectSteps { x, idx } => {
                let (_, len, d) = self.value(*x).dims3()?;
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (b, &t) in idx.iter().enumerate() {
                    dx[(b * len + t) * d..(b * len + t + 1) * d].copy_from_slice(&g[b * d..(b + 1) * d]);
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Mse(p, t) => {
                let (pd, td) = (self.value(*p).data(), self.value(*t).data());
                let scale = 2.0 * g[0] / pd.len() as f64;
                let d: Vec<f64> = pd.iter().zip(td).map(|(a, b)| scale * (a - b)).collect();
                if self.needs(*t) {
                    out.push((*t, like(*t, d.iter().map(|v| -v).collect())?));
                }
                out.push((*p, like(*p, d)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.shape(*x), g[0])));
            }
            Op::SelectiveScan {
                inputs,
                zoh,
                states,
                decay_m1,
            } => {
                let [x, delta, a, b, c] = *inputs;
                let (bsz, len, d) = self.value(x).dims3()?;
                let dims = ScanDims {
                    batch: bsz,
                    len,
                    channels: d,
                    state: self.shape(a)[1],
                };
                let grads = scan::backward(
                    dims,
                    self.value(x).data(),
                    self.value(delta).data(),
                    self.value(a).data(),
                    self.value(b).data(),
                    self.value(c).data(),
                    states,
                    decay_m1,
                    g,
                    *zoh,
                );
                out.push((x, like(x, grads.x)?));
                out.push((delta, like(delta, grads.delta)?));
                out.push((a, like(a, grads.a)?));
                out.push((b, like(b, grads.b)?));
                out.push((c, like(c, grads.c)?));
            }
        }
        Ok(out)
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn flip_data(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut data = Vec::with_capacity(src.len());
    for o in 0..outer {
        for t in (0..dim).rev() {
            let base = (o * dim + t) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
    }
    data
}

//! Selective scan kernels.
//!
//! For every batch row `b`, channel `d` and state `n` the recurrence is
//!
//! ```text
//! h[t] = exp(delta[t, d] a[d, n]) h[t - 1] + b_bar(delta[t, d], a[d, n], B[t, n]) x[t, d]
//! y[t, d] = sum_n C[t, n] h[t, d, n]
//! ```
//!
//! with `h[-1] = 0`. [`ScanAlgo::Sequential`] runs it left to right;
//! [`ScanAlgo::Parallel`] evaluates each (channel, state) lane with a
//! work-efficient tree scan over the associative pair combination
//! `(a1, u1) . (a2, u2) = (a2 a1, a2 u1 + u2)`. Batch rows are independent
//! and are distributed over threads when the `parallel` feature is on.

use serde::{Deserialize, Serialize};

use super::zoh::{phi_deriv_from, phi_from, ZohMode};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanAlgo {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    /// Three multiply-accumulates per (row, step, channel, state): input
    /// injection, state decay and readout.
    pub fn macs(&self) -> u64 {
        3 * (self.batch * self.len * self.channels * self.state) as u64
    }

    fn seq(&self) -> usize {
        self.len * self.channels
    }

    fn proj(&self) -> usize {
        self.len * self.state
    }

    fn states(&self) -> usize {
        self.len * self.channels * self.state
    }
}

pub struct ScanOutput {
    /// `[B, L, D]`.
    pub y: Vec<f64>,
    /// Hidden states `[B, L, D, N]`.
    pub states: Vec<f64>,
    /// `exp(delta a) - 1`, `[B, L, D, N]`.
    pub decay_m1: Vec<f64>,
}

pub struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Per-row views of the scan operands.
struct Row<'a> {
    x: &'a [f64],
    delta: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
}

fn row<'a>(dims: ScanDims, i: usize, x: &'a [f64], delta: &'a [f64], b: &'a [f64], c: &'a [f64]) -> Row<'a> {
    let (s, p) = (dims.seq(), dims.proj());
    Row {
        x: &x[i * s..(i + 1) * s],
        delta: &delta[i * s..(i + 1) * s],
        b: &b[i * p..(i + 1) * p],
        c: &c[i * p..(i + 1) * p],
    }
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    zoh: ZohMode,
    algo: ScanAlgo,
) -> Result<ScanOutput> {
    if let Some(bad) = delta.iter().find(|d| d.is_nan() || **d <= 0.0) {
        return Err(Error::invalid(
            "selective_scan",
            format!("step sizes must be positive, found {bad}"),
        ));
    }
    let rows = par::map_indices(dims.batch, |i| {
        let r = row(dims, i, x, delta, b, c);
        let (states, em1) = match algo {
            ScanAlgo::Sequential => states_sequential(dims, &r, a, zoh),
            ScanAlgo::Parallel => states_tree(dims, &r, a, zoh),
        };
        (readout(dims, r.c, &states), states, em1)
    });
    let mut y = Vec::with_capacity(dims.batch * dims.seq());
    let mut states = Vec::with_capacity(dims.batch * dims.states());
    let mut decay_m1 = Vec::with_capacity(dims.batch * dims.states());
    for (ry, rs, re) in rows {
        y.extend_from_slice(&ry);
        states.extend_from_slice(&rs);
        decay_m1.extend_from_slice(&re);
    }
    Ok(ScanOutput { y, states, decay_m1 })
}

/// Decay and injected input of one (step, channel, state) entry, plus
/// `exp(z) - 1` for the adjoint.
#[inline]
fn step_pair(zoh: ZohMode, dl: f64, av: f64, bv: f64, xv: f64) -> (f64, f64, f64) {
    let z = dl * av;
    let em1 = z.exp_m1();
    let coef = match zoh {
        ZohMode::Exact => dl * phi_from(z, em1) * bv,
        ZohMode::Simplified => dl * bv,
    };
    (em1 + 1.0, coef * xv, em1)
}

fn states_sequential(dims: ScanDims, r: &Row, a: &[f64], zoh: ZohMode) -> (Vec<f64>, Vec<f64>) {
    let (d_ch, n_st) = (dims.channels, dims.state);
    let mut h = vec![0.0; d_ch * n_st];
    let mut out = Vec::with_capacity(dims.states());
    let mut em1s = Vec::with_capacity(dims.states());
    for t in 0..dims.len {
        for d in 0..d_ch {
            let (dl, xv) = (r.delta[t * d_ch + d], r.x[t * d_ch + d]);
            for n in 0..n_st {
                let (a_bar, u, em1) = step_pair(zoh, dl, a[d * n_st + n], r.b[t * n_st + n], xv);
                let hv = &mut h[d * n_st + n];
                *hv = a_bar * *hv + u;
                em1s.push(em1);
            }
        }
        out.extend_from_slice(&h);
    }
    (out, em1s)
}

fn states_tree(dims: ScanDims, r: &Row, a: &[f64], zoh: ZohMode) -> (Vec<f64>, Vec<f64>) {
    let (len, d_ch, n_st) = (dims.len, dims.channels, dims.state);
    let width = len.next_power_of_two();
    let mut out = vec![0.0; dims.states()];
    let mut em1s = vec![0.0; dims.states()];
    let mut pairs = vec![(1.0, 0.0); width];
    let mut excl = vec![(1.0, 0.0); width];
    for d in 0..d_ch {
        for n in 0..n_st {
            for t in 0..len {
                let dl = r.delta[t * d_ch + d];
                let (a_bar, u, em1) = step_pair(zoh, dl, a[d * n_st + n], r.b[t * n_st + n], r.x[t * d_ch + d]);
                pairs[t] = (a_bar, u);
                em1s[(t * d_ch + d) * n_st + n] = em1;
            }
            for p in &mut pairs[len..] {
                *p = (1.0, 0.0);
            }
            excl.copy_from_slice(&pairs);
            exclusive_scan(&mut excl);
            for t in 0..len {
                out[(t * d_ch + d) * n_st + n] = combine(excl[t], pairs[t]).1;
            }
        }
    }
    (out, em1s)
}

type Pair = (f64, f64);

/// `first` applied, then `second`.
#[inline]
fn combine(first: Pair, second: Pair) -> Pair {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// In-place Blelloch exclusive scan; `v.len()` must be a power of two.
fn exclusive_scan(v: &mut [Pair]) {
    let n = v.len();
    let mut stride = 1;
    while stride < n {
        for right in (2 * stride - 1..n).step_by(2 * stride) {
            v[right] = combine(v[right - stride], v[right]);
        }
        stride *= 2;
    }
    v[n - 1] = (1.0, 0.0);
    while stride > 1 {
        stride /= 2;
        for right in (2 * stride - 1..n).step_by(2 * stride) {
            let left = right - stride;
            let prefix = v[right];
            v[right] = combine(prefix, v[left]);
            v[left] = prefix;
        }
    }
}

fn readout(dims: ScanDims, c: &[f64], states: &[f64]) -> Vec<f64> {
    let (d_ch, n_st) = (dims.channels, dims.state);
    let mut y = vec![0.0; dims.seq()];
    for t in 0..dims.len {
        let ct = &c[t * n_st..(t + 1) * n_st];
        for d in 0..d_ch {
            let h = &states[(t * d_ch + d) * n_st..(t * d_ch + d + 1) * n_st];
            y[t * d_ch + d] = ct.iter().zip(h).map(|(cv, hv)| cv * hv).sum();
        }
    }
    y
}

/// Reverse-mode adjoint of [`forward`] given the recorded states and decays
/// and the output adjoint `gy: [B, L, D]`. Shared by both scan algorithms.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    states: &[f64],
    decay_m1: &[f64],
    gy: &[f64],
    zoh: ZohMode,
) -> ScanGrads {
    let (len, d_ch, n_st) = (dims.len, dims.channels, dims.state);
    let rows = par::map_indices(dims.batch, |i| {
        let r = row(dims, i, x, delta, b, c);
        let st = &states[i * dims.states()..(i + 1) * dims.states()];
        let em = &decay_m1[i * dims.states()..(i + 1) * dims.states()];
        let g = &gy[i * dims.seq()..(i + 1) * dims.seq()];
        let mut dx = vec![0.0; dims.seq()];
        let mut ddelta = vec![0.0; dims.seq()];
        let mut db = vec![0.0; dims.proj()];
        let mut dc = vec![0.0; dims.proj()];
        let mut da = vec![0.0; d_ch * n_st];
        let mut carry = vec![0.0; n_st];
        for d in 0..d_ch {
            carry.fill(0.0);
            for t in (0..len).rev() {
                let (dl, xv, g_t) = (r.delta[t * d_ch + d], r.x[t * d_ch + d], g[t * d_ch + d]);
                for n in 0..n_st {
                    let h = st[(t * d_ch + d) * n_st + n];
                    let h_prev = if t > 0 { st[((t - 1) * d_ch + d) * n_st + n] } else { 0.0 };
                    let dh = carry[n] + r.c[t * n_st + n] * g_t;
                    dc[t * n_st + n] += g_t * h;

                    let av = a[d * n_st + n];
                    let bv = r.b[t * n_st + n];
                    let z = dl * av;
                    let em1 = em[(t * d_ch + d) * n_st + n];
                    let a_bar = em1 + 1.0;
                    let mut dz = dh * h_prev * a_bar;
                    match zoh {
                        ZohMode::Exact => {
                            let p = phi_from(z, em1);
                            ddelta[t * d_ch + d] += dh * p * bv * xv;
                            dz += dh * dl * phi_deriv_from(z, a_bar, p) * bv * xv;
                            db[t * n_st + n] += dh * dl * p * xv;
                            dx[t * d_ch + d] += dh * dl * p * bv;
                        }
                        ZohMode::Simplified => {
                            ddelta[t * d_ch + d] += dh * bv * xv;
                            db[t * n_st + n] += dh * dl * xv;
                            dx[t * d_ch + d] += dh * dl * bv;
                        }
                    }
                    ddelta[t * d_ch + d] += dz * av;
                    da[d * n_st + n] += dz * dl;
                    carry[n] = a_bar * dh;
                }
            }
        }
        (dx, ddelta, db, dc, da)
    });
    let mut grads = ScanGrads {
        x: Vec::with_capacity(x.len()),
        delta: Vec::with_capacity(delta.len()),
        a: vec![0.0; a.len()],
        b: Vec::with_capacity(b.len()),
        c: Vec::with_capacity(c.len()),
    };
    for (dx, ddelta, db, dc, da) in rows {
        grads.x.extend_from_slice(&dx);
        grads.delta.extend_from_slice(&ddelta);
        grads.b.extend_from_slice(&db);
        grads.c.extend_from_slice(&dc);
        for (acc, v) in grads.a.iter_mut().zip(&da) {
            *acc += v;
        }
    }
    grads
}

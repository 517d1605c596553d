use ctxfuse::bssm::{BssmBlock, BssmConfig, StepMask};
use ctxfuse::engine::{Graph, ParamStore, Tensor};
use ctxfuse::gcmn::{GcmnConfig, GcmnLayer};
use ctxfuse::nn::ForwardCtx;
use ctxfuse::ssm::{discretize, scan, ScanAlgo, ScanDims, ZohMode};
use rand::Rng;

use crate::common::{randn, rng};
use crate::Outcome;

struct Scan {
    dims: ScanDims,
    x: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn scan_problem(seed: u64, len: usize) -> Scan {
    let mut r = rng(seed);
    let dims = ScanDims { batch: 2, len, channels: 3, state: 4 };
    let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| r.random_range(lo..hi)).collect::<Vec<_>>();
    Scan {
        dims,
        x: v(2 * len * 3, -1.0, 1.0),
        delta: v(2 * len * 3, 0.01, 1.0),
        a: v(12, -3.0, -0.05),
        b: v(2 * len * 4, -1.0, 1.0),
        c: v(2 * len * 4, -1.0, 1.0),
    }
}

fn run(p: &Scan, algo: ScanAlgo) -> Vec<f64> {
    scan::forward(p.dims, &p.x, &p.delta, &p.a, &p.b, &p.c, ZohMode::Exact, algo).unwrap().y
}

/// Direct sum over source steps of the discretized impulse response.
fn unrolled(p: &Scan) -> Vec<f64> {
    let ScanDims { batch, len, channels, state } = p.dims;
    let mut y = vec![0.0; batch * len * channels];
    for bi in 0..batch {
        for t in 0..len {
            for d in 0..channels {
                let mut acc = 0.0;
                for n in 0..state {
                    let a = p.a[d * state + n];
                    for s in 0..=t {
                        let decay: f64 = (s + 1..=t).map(|r| (p.delta[(bi * len + r) * channels + d] * a).exp()).product();
                        let dl = p.delta[(bi * len + s) * channels + d];
                        let b_bar = ((dl * a).exp() - 1.0) / a * p.b[(bi * len + s) * state + n];
                        acc += p.c[(bi * len + t) * state + n] * decay * b_bar * p.x[(bi * len + s) * channels + d];
                    }
                }
                y[(bi * len + t) * channels + d] = acc;
            }
        }
    }
    y
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn scan_equivalence() -> Outcome {
    let mut parity = 0.0f64;
    for seed in 0..50 {
        for len in 1..=64 {
            let p = scan_problem(seed * 100 + len as u64, len);
            parity = parity.max(max_diff(&run(&p, ScanAlgo::Sequential), &run(&p, ScanAlgo::Parallel)));
        }
    }
    let oracle = (0..20)
        .map(|seed| {
            let p = scan_problem(9000 + seed, 6);
            max_diff(&run(&p, ScanAlgo::Sequential), &unrolled(&p))
        })
        .fold(0.0, f64::max);
    Outcome::new(
        parity <= 1e-10 && oracle <= 1e-12,
        format!("parallel vs sequential L=1..64 x 50 seeds max {parity:.1e} <= 1e-10; unrolled oracle L=6 max {oracle:.1e} <= 1e-12"),
    )
}

fn series_b_bar(a: f64, delta: f64, b: f64) -> f64 {
    let z = delta * a;
    let (mut term, mut sum) = (1.0, 0.0);
    for k in 0..80 {
        sum += term;
        term *= z / (k as f64 + 2.0);
    }
    delta * b * sum
}

pub fn discretization() -> Outcome {
    let (a_bar, b_bar) = discretize(-1.0, 1.0, std::f64::consts::LN_2, ZohMode::Exact).unwrap();
    let closed = (a_bar - 0.5).abs().max((b_bar - 0.5).abs());
    let mut r = rng(31);
    let mut series = 0.0f64;
    for _ in 0..100 {
        let a = -r.random_range(0.01..5.0);
        let delta = r.random_range(1e-4..1.0);
        let b = r.random_range(-2.0..2.0);
        let (_, got) = discretize(a, b, delta, ZohMode::Exact).unwrap();
        let want = series_b_bar(a, delta, b);
        series = series.max((got - want).abs() / want.abs().max(1.0));
    }
    Outcome::new(
        closed <= 1e-12 && series <= 1e-12,
        format!("closed form error {closed:.1e} <= 1e-12; 100 series-oracle triples max {series:.1e} <= 1e-12"),
    )
}

fn flip_time(x: &Tensor) -> Tensor {
    let (b, l, d) = x.dims3().unwrap();
    let mut out = x.clone();
    for bi in 0..b {
        for t in 0..l {
            out.data_mut()[(bi * l + t) * d..][..d].copy_from_slice(&x.data()[(bi * l + l - 1 - t) * d..][..d]);
        }
    }
    out
}

pub fn flip_equivariance() -> Outcome {
    let mut worst = 0.0f64;
    for len in [1, 2, 3, 4, 8] {
        for seed in 0..20 {
            let mut store = ParamStore::new();
            let cfg = BssmConfig { tied: true, state_dim: 4, ..BssmConfig::new(3) };
            let block = BssmBlock::new(&mut store, &mut rng(seed), "b", cfg).unwrap();
            let x = randn(&mut rng(seed + 500), &[2, len, 3]);
            let lhs = block.apply(&store, &flip_time(&x)).unwrap();
            let rhs = flip_time(&block.apply(&store, &x).unwrap());
            worst = worst.max(lhs.max_abs_diff(&rhs));
        }
    }
    Outcome::new(worst <= 1e-9, format!("L in {{1,2,3,4,8}} x 20 seeds max {worst:.1e} <= 1e-9"))
}

struct LayerRun {
    t: Tensor,
    a: Tensor,
    gates: (Tensor, Tensor),
}

fn run_layer(store: &ParamStore, layer: &GcmnLayer, st: &Tensor, sa: &Tensor) -> LayerRun {
    let (b, len, _) = st.dims3().unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (xt, xa) = (g.constant(st.clone()), g.constant(sa.clone()));
    let mask = StepMask::full(b, len);
    let out = layer.forward(&mut g, &p, xt, xa, &mask, &mask, &mut ForwardCtx::eval()).unwrap();
    let (gt, ga) = out.gates.unwrap();
    LayerRun {
        t: g.value(out.final_t).clone(),
        a: g.value(out.final_a).clone(),
        gates: (g.value(gt).clone(), g.value(ga).clone()),
    }
}

fn last_step(x: &Tensor) -> Vec<f64> {
    let (b, len, d) = x.dims3().unwrap();
    (0..b).flat_map(|i| x.data()[(i * len + len - 1) * d..][..d].to_vec()).collect()
}

pub fn gate_semantics() -> Outcome {
    let cfg = GcmnConfig { state_dim: 4, ..GcmnConfig::new(4) };
    let mut recovery = 0.0f64;
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let layer = GcmnLayer::new(&mut store, &mut rng(seed), "l", cfg).unwrap();
        for m in ["t", "a"] {
            store.by_name_mut(&format!("l.gate_{m}.weight")).unwrap().data_mut().fill(0.0);
            store.by_name_mut(&format!("l.gate_{m}.bias")).unwrap().data_mut().fill(-20.0);
        }
        let (st, sa) = (randn(&mut rng(seed + 40), &[2, 3, 4]), randn(&mut rng(seed + 80), &[2, 3, 4]));
        let out = run_layer(&store, &layer, &st, &sa);
        let uni_t = last_step(&layer.text.as_ref().unwrap().apply(&store, &st).unwrap());
        let uni_a = last_step(&layer.audio.as_ref().unwrap().apply(&store, &sa).unwrap());
        recovery = recovery.max(max_diff(out.t.data(), &uni_t)).max(max_diff(out.a.data(), &uni_a));
    }
    let mut inside = true;
    let mut checked = 0;
    for seed in 0..100 {
        let mut store = ParamStore::new();
        let layer = GcmnLayer::new(&mut store, &mut rng(1000 + seed), "l", cfg).unwrap();
        let scale = 0.1 + 0.05 * seed as f64;
        for n in ["l.gate_t.weight", "l.gate_a.weight"] {
            store.by_name_mut(n).unwrap().data_mut().iter_mut().for_each(|w| *w *= scale);
        }
        let (st, sa) = (randn(&mut rng(seed + 2000), &[2, 3, 4]), randn(&mut rng(seed + 3000), &[2, 3, 4]));
        let (gt, ga) = run_layer(&store, &layer, &st, &sa).gates;
        inside &= gt.data().iter().chain(ga.data()).all(|&v| v > 0.0 && v < 1.0);
        checked += gt.data().len() + ga.data().len();
    }
    Outcome::new(
        recovery <= 1e-8 && inside,
        format!("saturated-low gates vs unimodal path max {recovery:.1e} <= 1e-8; {checked} gate values strictly inside (0,1): {inside}"),
    )
}

use std::rc::Rc;
use std::time::{Duration, Instant};

use ctxfuse::engine::gradcheck::{check, DEFAULT_STEP};
use ctxfuse::engine::{Bound, Graph, Tensor, Var};
use ctxfuse::model::{Batch, Model};
use ctxfuse::nn::ForwardCtx;
use ctxfuse::ssm::{ScanAlgo, ZohMode};
use ctxfuse::Result;

use crate::common::{probe, randn, random_sample, rng, tiny_config, uniform};
use crate::Outcome;

const SEEDS: u64 = 20;
const OP_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-5;

type Maker = Box<dyn Fn(u64) -> Vec<Tensor>>;
type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn shapes(shapes: &'static [&'static [usize]]) -> Maker {
    Box::new(move |s| {
        let mut r = rng(s);
        shapes.iter().map(|sh| randn(&mut r, sh)).collect()
    })
}

fn wide(shape: &'static [usize]) -> Maker {
    Box::new(move |s| vec![uniform(&mut rng(s), shape, -2.0, 2.0)])
}

fn scan_inputs(s: u64) -> Vec<Tensor> {
    let mut r = rng(s);
    vec![
        randn(&mut r, &[2, 4, 3]),
        uniform(&mut r, &[2, 4, 3], 0.05, 1.0),
        uniform(&mut r, &[3, 2], -2.0, -0.2),
        randn(&mut r, &[2, 4, 2]),
        randn(&mut r, &[2, 4, 2]),
    ]
}

fn ops() -> Vec<(String, Maker, OpFn)> {
    let mut v: Vec<(String, Maker, OpFn)> = vec![
        ("matmul".into(), shapes(&[&[2, 3, 4], &[4, 5]]), Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("bias_add".into(), shapes(&[&[2, 3, 4], &[4]]), Box::new(|g, v| g.bias_add(v[0], v[1]))),
        ("add".into(), shapes(&[&[3, 4], &[3, 4]]), Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub".into(), shapes(&[&[3, 4], &[3, 4]]), Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul".into(), shapes(&[&[3, 4], &[3, 4]]), Box::new(|g, v| g.mul(v[0], v[1]))),
        ("mse".into(), shapes(&[&[5, 1], &[5, 1]]), Box::new(|g, v| g.mse(v[0], v[1]))),
        ("scale".into(), wide(&[2, 5]), Box::new(|g, v| g.scale(v[0], -1.7))),
        ("sigmoid".into(), wide(&[2, 5]), Box::new(|g, v| g.sigmoid(v[0]))),
        ("silu".into(), wide(&[2, 5]), Box::new(|g, v| g.silu(v[0]))),
        ("softplus".into(), wide(&[2, 5]), Box::new(|g, v| g.softplus(v[0]))),
        ("exp".into(), wide(&[2, 5]), Box::new(|g, v| g.exp(v[0]))),
        ("sum".into(), wide(&[2, 5]), Box::new(|g, v| g.sum(v[0]))),
        ("concat".into(), shapes(&[&[2, 3, 2], &[2, 1, 2]]), Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice".into(), wide(&[2, 5, 3]), Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        ("flip".into(), wide(&[2, 4, 3]), Box::new(|g, v| g.flip(v[0], 1))),
        ("reshape".into(), wide(&[2, 6]), Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("select_steps".into(), wide(&[3, 4, 2]), Box::new(|g, v| g.select_steps(v[0], &[3, 0, 2]))),
        (
            "mask_steps".into(),
            wide(&[2, 3, 2]),
            Box::new(|g, v| g.mask_steps(v[0], Rc::from(vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0]))),
        ),
        ("causal_conv".into(), shapes(&[&[2, 5, 3], &[3, 4], &[3]]), Box::new(|g, v| g.causal_conv(v[0], v[1], v[2]))),
        ("dropout".into(), wide(&[4, 6]), Box::new(|g, v| g.dropout(v[0], 0.3, &mut rng(11)))),
    ];
    for zoh in [ZohMode::Exact, ZohMode::Simplified] {
        for algo in [ScanAlgo::Sequential, ScanAlgo::Parallel] {
            v.push((
                format!("selective_scan[{zoh:?},{algo:?}]"),
                Box::new(scan_inputs),
                Box::new(move |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], zoh, algo)),
            ));
        }
    }
    v
}

fn model_error(seed: u64) -> f64 {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), seed).unwrap();
    let mut r = rng(100 + seed);
    let samples: Vec<_> = (0..2).map(|i| random_sample(&mut r, i, &cfg, cfg.k_t, cfg.k_a)).collect();
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::new(&cfg, &refs).unwrap();
    let params: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    check(&params, DEFAULT_STEP, |g, vars| {
        let p = Bound::from_vars(vars.to_vec());
        let out = model.forward(g, &p, &batch, &mut ForwardCtx::train(0.3, seed))?;
        let labels = g.constant(batch.labels.clone());
        model.loss(g, &out, labels)
    })
    .unwrap()
    .max_rel_err
}

pub fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let ops = ops();
    let mut worst_op = (0.0f64, String::new());
    for (name, make, f) in &ops {
        for seed in 0..SEEDS {
            let err = check(&make(seed), DEFAULT_STEP, |g, v| {
                let y = f(g, v)?;
                probe(g, y, seed)
            })
            .unwrap()
            .max_rel_err;
            if err > worst_op.0 {
                worst_op = (err, name.clone());
            }
        }
    }
    let worst_model = (0..SEEDS).map(model_error).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = worst_op.0 < OP_TOL && worst_model < MODEL_TOL && elapsed < Duration::from_secs(60);
    Outcome::new(
        pass,
        format!(
            "{} ops x {SEEDS} seeds worst {:.1e} ({}) < {OP_TOL:e}; model x {SEEDS} seeds worst {worst_model:.1e} < {MODEL_TOL:e}; {:.1}s < 60s",
            ops.len(),
            worst_op.0,
            worst_op.1,
            elapsed.as_secs_f64()
        ),
    )
}

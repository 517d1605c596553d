use ctxfuse::checkpoint;
use ctxfuse::cost::count_cost;
use ctxfuse::data::{generate, Sample, Split, SynthConfig};
use ctxfuse::engine::{Graph, ParamStore, Tensor};
use ctxfuse::export::export_embeddings;
use ctxfuse::gcmn::GateMode;
use ctxfuse::metrics::evaluate;
use ctxfuse::model::{ContextMode, Model, ModelConfig};
use ctxfuse::nn::Linear;
use ctxfuse::train::{train, write_history, TrainConfig};
use rand::Rng;

use crate::common::oracle::{flat, oracle, tie_value};
use crate::common::rng;
use crate::Outcome;

pub fn cost_counters() -> Outcome {
    let mut r = rng(808);
    let mut matched = 0;
    for _ in 0..10 {
        let cfg = ModelConfig {
            d_t: r.random_range(1..24),
            d_a: r.random_range(1..24),
            f: r.random_range(1..16),
            layers: r.random_range(1..4),
            state_dim: r.random_range(1..17),
            kernel: r.random_range(1..5),
            expand: r.random_range(1..4),
            k_t: r.random_range(0..4),
            k_a: r.random_range(0..4),
            context: if r.random_bool(0.5) { ContextMode::Sequence } else { ContextMode::Concat },
            gate: [GateMode::Learnable, GateMode::Fixed, GateMode::Single][r.random_range(0..3)],
            hidden_mlp: r.random_bool(0.3),
            ..ModelConfig::default()
        };
        matched += usize::from(count_cost(&cfg).unwrap().consistent());
    }
    let mut store = ParamStore::new();
    let affine = Linear::new(&mut store, &mut rng(0), "affine", 4, 3, true);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(Tensor::zeros([1, 4]));
    affine.forward(&mut g, &p, x).unwrap();
    let (params, flops) = (store.param_count(), 2 * g.macs());
    Outcome::new(
        matched == 10 && params == 15 && flops == 24,
        format!("analytic == instrumented on {matched}/10 random configs; affine 4->3 has {params} params, {flops} FLOPs"),
    )
}

fn one_run(dir: &std::path::Path, tag: &str) -> Vec<Vec<u8>> {
    let data_cfg = SynthConfig { n: 120, ..SynthConfig::default() };
    let data = generate(&data_cfg, 42).unwrap();
    let data_path = dir.join(format!("{tag}-data.jsonl"));
    data.save(&data_path).unwrap();

    let mut model = Model::new(ModelConfig { state_dim: 4, ..ModelConfig::default() }, 42).unwrap();
    let out = train(&mut model, &data, &TrainConfig { epochs: 2, ..TrainConfig::default() }, 42).unwrap();
    let history = dir.join(format!("{tag}-history.jsonl"));
    write_history(&out.history, &history).unwrap();
    let ckpt = dir.join(format!("{tag}.ckpt"));
    checkpoint::save(&model, &ckpt).unwrap();
    let emb = dir.join(format!("{tag}-emb.jsonl"));
    let test: Vec<&Sample> = data.split(Split::Test);
    export_embeddings(&checkpoint::load(&ckpt).unwrap(), &test, 16, &emb).unwrap();
    [data_path, history, ckpt, emb].iter().map(|p| std::fs::read(p).unwrap()).collect()
}

pub fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (one_run(dir.path(), "a"), one_run(dir.path(), "b"));
    let names = ["dataset", "history", "checkpoint", "embeddings"];
    let same: Vec<&str> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x == y).map(|(n, _)| *n).collect();
    Outcome::new(
        same.len() == names.len(),
        format!("bit-identical across two seeded runs: {}", same.join(", ")),
    )
}

pub fn metric_oracle() -> Outcome {
    let mut r = rng(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(2..=40);
        let pred: Vec<f64> = (0..n).map(|_| tie_value(&mut r)).collect();
        let labels: Vec<f64> = (0..n).map(|_| tie_value(&mut r)).collect();
        let got = flat(&evaluate(&pred, &labels).unwrap());
        let want = oracle(&pred, &labels);
        worst = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(worst, f64::max);
    }
    Outcome::new(worst <= 1e-12, format!("100 random sets vs exact rational oracle, max deviation {worst:.1e} <= 1e-12"))
}

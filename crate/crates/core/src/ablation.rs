//! Context-strategy, fusion-strategy and context-window ablations on
//! synthetic data.

use serde::{Deserialize, Serialize};

use crate::data::{generate, Split, SynthConfig};
use crate::error::Result;
use crate::gcmn::GateMode;
use crate::metrics::MetricReport;
use crate::model::{ContextMode, Model, ModelConfig};
use crate::par;
use crate::train::{evaluate_split, train, TrainConfig};

/// One model variant of the grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub context: ContextMode,
    pub gate: GateMode,
    pub k_t: usize,
    pub k_a: usize,
}

impl Cell {
    pub fn new(name: impl Into<String>, context: ContextMode, gate: GateMode, k_t: usize, k_a: usize) -> Self {
        Self {
            name: name.into(),
            context,
            gate,
            k_t,
            k_a,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            context: self.context,
            gate: self.gate,
            k_t: self.k_t,
            k_a: self.k_a,
            ..base.clone()
        }
    }
}

/// Context strategies and fusion strategies at `(k_t, k_a)`. The full model
/// appears once.
pub fn strategy_cells(k_t: usize, k_a: usize) -> Vec<Cell> {
    use ContextMode::*;
    use GateMode::*;
    vec![
        Cell::new("no-context", Sequence, Learnable, 0, 0),
        Cell::new("concat-context", Concat, Learnable, k_t, k_a),
        Cell::new("single-path", Sequence, Single, k_t, k_a),
        Cell::new("fixed-gate", Sequence, Fixed, k_t, k_a),
        Cell::new("full", Sequence, Learnable, k_t, k_a),
    ]
}

/// Context window sizes with the full model.
pub fn window_cells(windows: &[(usize, usize)]) -> Vec<Cell> {
    windows
        .iter()
        .map(|&(t, a)| Cell::new(format!("window-{t}-{a}"), ContextMode::Sequence, GateMode::Learnable, t, a))
        .collect()
}

pub const DEFAULT_WINDOWS: [(usize, usize); 8] = [(0, 0), (1, 0), (0, 1), (1, 1), (1, 2), (2, 2), (3, 1), (2, 1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub runs: Vec<RunResult>,
    /// Median test negative/non-negative accuracy over seeds.
    pub median_acc2: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every cell on every seed. The dataset for a seed is generated once
/// with the largest window any cell needs; runs are independent and may be
/// spread over threads.
pub fn run(spec: &AblationSpec) -> Result<Vec<CellSummary>> {
    let data_cfg = SynthConfig {
        k_t: spec.cells.iter().map(|c| c.k_t).max().unwrap_or(0).max(spec.data.k_t),
        k_a: spec.cells.iter().map(|c| c.k_a).max().unwrap_or(0).max(spec.data.k_a),
        ..spec.data.clone()
    };
    let datasets = spec
        .seeds
        .iter()
        .map(|&s| generate(&data_cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let n_seeds = spec.seeds.len();
    let jobs = spec.cells.len() * n_seeds;
    let results = par::map_indices(jobs, |job| -> Result<RunResult> {
        let (cell, k) = (&spec.cells[job / n_seeds], job % n_seeds);
        let (seed, data) = (spec.seeds[k], &datasets[k]);
        let mut model = Model::new(cell.apply(&spec.model), seed)?;
        let outcome = train(&mut model, data, &spec.train, seed)?;
        let (_, test) = evaluate_split(&model, &data.split(Split::Test), spec.train.eval_batch)?;
        Ok(RunResult {
            seed,
            best_epoch: outcome.best_epoch,
            epochs: outcome.history.len(),
            test,
        })
    });
    let mut results = results.into_iter();
    spec.cells
        .iter()
        .map(|cell| {
            let runs = results.by_ref().take(n_seeds).collect::<Result<Vec<_>>>()?;
            let accs: Vec<f64> = runs.iter().map(|r| r.test.acc2_nn).collect();
            Ok(CellSummary {
                cell: cell.clone(),
                median_acc2: median(&accs),
                runs,
            })
        })
        .collect()
}

/// Markdown table ordered by median accuracy, best first.
pub fn render(summaries: &[CellSummary]) -> String {
    let mut rows: Vec<&CellSummary> = summaries.iter().collect();
    rows.sort_by(|a, b| b.median_acc2.total_cmp(&a.median_acc2));
    let mut out = String::from("| cell | context | gate | K_t | K_a | median Acc-2 (%) |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let c = &r.cell;
        out.push_str(&format!(
            "| {} | {:?} | {:?} | {} | {} | {:.2} |\n",
            c.name,
            c.context,
            c.gate,
            c.k_t,
            c.k_a,
            100.0 * r.median_acc2
        ));
    }
    out
}

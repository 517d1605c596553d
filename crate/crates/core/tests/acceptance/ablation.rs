use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ctxfuse::ablation::{run, strategy_cells, AblationSpec, CellSummary};
use ctxfuse::data::SynthConfig;
use ctxfuse::model::ModelConfig;
use ctxfuse::train::TrainConfig;

use crate::Outcome;

fn grid() -> &'static (Vec<CellSummary>, Duration) {
    static GRID: OnceLock<(Vec<CellSummary>, Duration)> = OnceLock::new();
    GRID.get_or_init(|| {
        let start = Instant::now();
        let spec = AblationSpec {
            data: SynthConfig::default(),
            model: ModelConfig { f: 16, state_dim: 4, ..ModelConfig::default() },
            train: TrainConfig { epochs: 30, ..TrainConfig::default() },
            seeds: (0..5).collect(),
            cells: strategy_cells(2, 1),
        };
        (run(&spec).expect("ablation grid"), start.elapsed())
    })
}

fn median_of(name: &str) -> f64 {
    grid().0.iter().find(|c| c.cell.name == name).map(|c| c.median_acc2).unwrap()
}

pub fn strategy_ordering() -> Outcome {
    let chains = [["full", "fixed-gate", "single-path"], ["full", "concat-context", "no-context"]];
    let mut pass = true;
    let mut listed = Vec::new();
    for chain in chains {
        for pair in chain.windows(2) {
            let gap = 100.0 * (median_of(pair[0]) - median_of(pair[1]));
            pass &= gap >= 1.0;
            listed.push(format!("{} > {} {gap:+.2}", pair[0], pair[1]));
        }
    }
    let secs = grid().1.as_secs_f64();
    pass &= secs < 1800.0;
    let medians: Vec<String> = grid().0.iter().map(|c| format!("{} {:.2}", c.cell.name, 100.0 * c.median_acc2)).collect();
    Outcome::new(
        pass,
        format!(
            "median Acc-2 % [{}]; gaps in points (each needs >= +1.00): {}; grid {secs:.0}s < 1800s",
            medians.join(", "),
            listed.join(", ")
        ),
    )
}

pub fn window_trend() -> Outcome {
    let (with, without) = (median_of("full"), median_of("no-context"));
    let gap = with - without;
    Outcome::new(
        gap >= 0.03,
        format!("median Acc-2 K=(2,1) {:.2}% vs K=(0,0) {:.2}%, gap {:.2} points (need >= 3.00)", 100.0 * with, 100.0 * without, 100.0 * gap),
    )
}

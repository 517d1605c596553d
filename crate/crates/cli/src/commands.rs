//! One function per subcommand. Every command writes its files and a
//! `manifest.json` under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use ctxfuse::ablation::{self, strategy_cells, window_cells, AblationSpec, Cell, DEFAULT_WINDOWS};
use ctxfuse::checkpoint;
use ctxfuse::cost::count_cost;
use ctxfuse::data::{generate, Dataset, Split};
use ctxfuse::export::export_embeddings;
use ctxfuse::metrics::MetricReport;
use ctxfuse::model::Model;
use ctxfuse::train::{evaluate_split, train, write_history};
use log::{debug, info};
use serde::Serialize;

use crate::config::{Grid, RunConfig};
use crate::error::{CliError, CliResult};

pub struct Run {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: Option<Split>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    data: Option<&'a Path>,
    checkpoint: Option<&'a Path>,
    split: Option<Split>,
    config: &'a RunConfig,
    outputs: &'a [&'a str],
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| ctxfuse::Error::io(path, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn json_line(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("reports serialize")
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(&self, outputs: &[&str]) -> CliResult<()> {
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            data: self.data.as_deref(),
            checkpoint: self.checkpoint.as_deref(),
            split: self.split,
            config: &self.cfg,
            outputs,
        };
        write_json(&self.path("manifest.json"), &manifest)?;
        info!("wrote {} and manifest.json to {}", outputs.join(", "), self.out.display());
        Ok(())
    }

    /// The `--data` file if given, otherwise a synthetic dataset from
    /// `data.*` and the seed. Model input widths are taken from the data.
    fn dataset(&mut self) -> CliResult<Dataset> {
        let data = match &self.data {
            Some(path) => Dataset::load(path)?,
            None => generate(&self.cfg.data, self.seed)?,
        };
        let h = &data.header;
        (self.cfg.data.d_t, self.cfg.data.d_a) = (h.d_t, h.d_a);
        (self.cfg.model.d_t, self.cfg.model.d_a) = (h.d_t, h.d_a);
        Ok(data)
    }

    /// Loads `--checkpoint` and checks its input widths against the data.
    fn trained_model(&mut self, data: &Dataset) -> CliResult<Model> {
        let path = self.checkpoint.clone().ok_or_else(|| CliError::Usage(format!("{} requires --checkpoint", self.command)))?;
        let model = checkpoint::load(&path)?;
        let (h, m) = (&data.header, &model.cfg);
        if (h.d_t, h.d_a) != (m.d_t, m.d_a) {
            return Err(CliError::Data(format!(
                "dataset widths (d_t {}, d_a {}) do not match the checkpoint (d_t {}, d_a {})",
                h.d_t, h.d_a, m.d_t, m.d_a
            )));
        }
        self.cfg.model = model.cfg.clone();
        Ok(model)
    }

    fn split(&self) -> Split {
        self.split.unwrap_or(Split::Test)
    }
}

pub fn generate_cmd(mut run: Run) -> CliResult<String> {
    let data = run.dataset()?;
    data.save(run.path("dataset.jsonl"))?;
    run.finish(&["dataset.jsonl"])?;
    Ok(json_line(&data.header))
}

pub fn train_cmd(mut run: Run) -> CliResult<String> {
    let data = run.dataset()?;
    let mut model = Model::new(run.cfg.model.clone(), run.seed)?;
    info!("training {} parameters on {} samples", model.param_count(), data.split(Split::Train).len());
    let outcome = train(&mut model, &data, &run.cfg.train, run.seed)?;
    for r in &outcome.history {
        debug!("epoch {} train {:.6} valid {:.6}", r.epoch, r.train_loss, r.valid_loss);
    }
    info!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    checkpoint::save(&model, run.path("checkpoint.ckpt"))?;
    write_history(&outcome.history, run.path("history.jsonl"))?;
    let (_, report) = evaluate_split(&model, &data.split(Split::Valid), run.cfg.train.eval_batch)?;
    write_json(&run.path("metrics-valid.json"), &report)?;
    run.finish(&["checkpoint.ckpt", "history.jsonl", "metrics-valid.json"])?;
    Ok(json_line(&report))
}

pub fn eval_cmd(mut run: Run) -> CliResult<String> {
    let data = run.dataset()?;
    let model = run.trained_model(&data)?;
    let split = run.split();
    let (_, report): (f64, MetricReport) = evaluate_split(&model, &data.split(split), run.cfg.train.eval_batch)?;
    let name = format!("metrics-{split}.json");
    write_json(&run.path(&name), &report)?;
    run.finish(&[&name])?;
    Ok(json_line(&report))
}

pub fn cost_cmd(run: Run) -> CliResult<String> {
    let report = count_cost(&run.cfg.model)?;
    write_json(&run.path("cost.json"), &report)?;
    run.finish(&["cost.json"])?;
    Ok(json_line(&report))
}

pub fn export_cmd(mut run: Run) -> CliResult<String> {
    let data = run.dataset()?;
    let model = run.trained_model(&data)?;
    let split = run.split();
    let name = format!("embeddings-{split}.jsonl");
    let n = export_embeddings(&model, &data.split(split), run.cfg.train.eval_batch, run.path(&name))?;
    run.finish(&[&name])?;
    Ok(json_line(&serde_json::json!({ "records": n, "width": 4 * model.cfg.f })))
}

fn grid_cells(cfg: &RunConfig) -> Vec<Cell> {
    let strategy = || strategy_cells(cfg.model.k_t, cfg.model.k_a);
    let window = || window_cells(&DEFAULT_WINDOWS);
    let mut cells = match cfg.ablate.grid {
        Grid::Strategy => strategy(),
        Grid::Window => window(),
        Grid::All => strategy().into_iter().chain(window()).collect(),
    };
    let mut seen = Vec::new();
    cells.retain(|c| {
        let key = (c.context, c.gate, c.k_t, c.k_a);
        let fresh = !seen.contains(&key);
        seen.push(key);
        fresh
    });
    cells
}

pub fn ablate_cmd(run: Run) -> CliResult<String> {
    let cfg = &run.cfg;
    let spec = AblationSpec {
        data: cfg.data.clone(),
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seeds: (0..cfg.ablate.seeds as u64).map(|k| run.seed + k).collect(),
        cells: grid_cells(cfg),
    };
    info!("ablation: {} cells x {} seeds", spec.cells.len(), spec.seeds.len());
    let summaries = ablation::run(&spec)?;
    let table = ablation::render(&summaries);
    write_json(&run.path("ablation.json"), &summaries)?;
    write_text(&run.path("ablation.md"), &table)?;
    run.finish(&["ablation.json", "ablation.md"])?;
    Ok(table.trim_end().to_string())
}

//! Training loop with early stopping, and batched evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset, Sample, Split};
use crate::engine::{AdamW, AdamWConfig, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{Batch, Model, Prediction};
use crate::nn::ForwardCtx;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Batch size used for evaluation passes.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 16,
            patience: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.patience == 0 || self.eval_batch == 0 {
            return Err(Error::Config(
                "train.epochs, train.batch, train.patience and train.eval_batch must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("train.lr and train.weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Outcome of feeding one validation loss to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stalled: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stalled: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> Progress {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stalled = 0;
            Progress::Improved
        } else {
            self.stalled += 1;
            if self.stalled >= self.patience {
                Progress::Stop
            } else {
                Progress::Stalled
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

/// Predictions for `samples` in order, evaluated in batches of `batch_size`
/// which may run on several threads.
pub fn predict(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<Prediction> {
    let chunks: Vec<&[&Sample]> = samples.chunks(batch_size.max(1)).collect();
    let parts = par::map_slice(&chunks, |chunk| Batch::new(&model.cfg, chunk).and_then(|b| model.predict(&b)));
    let mut out = Prediction {
        y_t: Vec::with_capacity(samples.len()),
        y_a: Vec::with_capacity(samples.len()),
        y_m: Vec::with_capacity(samples.len()),
        gates: Vec::new(),
        embeddings: crate::engine::Tensor::zeros([samples.len().max(1), model.cfg.embed_dim()]),
    };
    let width = model.cfg.embed_dim();
    let mut row = 0;
    for part in parts {
        let part = part?;
        let n = part.y_m.len();
        out.embeddings.data_mut()[row * width..(row + n) * width].copy_from_slice(part.embeddings.data());
        row += n;
        out.y_t.extend(part.y_t);
        out.y_a.extend(part.y_a);
        out.y_m.extend(part.y_m);
    }
    Ok(out)
}

/// Eval-mode multi-task loss and metrics of the main prediction.
pub fn evaluate_split(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<(f64, MetricReport)> {
    let pred = predict(model, samples, batch_size)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let mse = |p: &[f64]| p.iter().zip(&labels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / labels.len() as f64;
    let cfg = &model.cfg;
    let loss = cfg.alpha * mse(&pred.y_t) + cfg.beta * mse(&pred.y_a) + cfg.gamma * mse(&pred.y_m);
    Ok((loss, evaluate(&pred.y_m, &labels)?))
}

fn diverged(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            step,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains `model` on the train split, selecting the epoch with the lowest
/// validation loss. On return the model holds the selected weights.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = data.split(Split::Train);
    let valid_set = data.split(Split::Valid);
    if train_set.is_empty() || valid_set.len() < 2 {
        return Err(Error::invalid(
            "train",
            format!(
                "need a non-empty train split and at least two valid samples, got {} and {}",
                train_set.len(),
                valid_set.len()
            ),
        ));
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.store,
    );
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<ParamStore> = None;
    let mut history = Vec::new();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let order = batch_indices(train_set.len(), cfg.batch, Some(seeds.random()))?;
        let mut loss_sum = 0.0;
        for idx in order {
            step += 1;
            let samples: Vec<&Sample> = idx.iter().map(|&i| train_set[i]).collect();
            let batch = Batch::new(&model.cfg, &samples)?;
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let mut ctx = ForwardCtx::train(model.cfg.dropout, seeds.random());
            let loss = (|| {
                let out = model.forward(&mut g, &p, &batch, &mut ctx)?;
                let labels = g.constant(batch.labels.clone());
                let loss = model.loss(&mut g, &out, labels)?;
                g.backward(loss)?;
                Ok(loss)
            })()
            .map_err(diverged(epoch, step))?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    msg: format!("loss is {value}"),
                });
            }
            loss_sum += value * samples.len() as f64;
            let grads = model.store.grads(&g, &p);
            opt.step(&mut model.store, &grads)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (valid_loss, valid) = evaluate_split(model, &valid_set, cfg.eval_batch).map_err(diverged(epoch, step))?;
        if !valid_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                msg: format!("validation loss is {valid_loss}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid,
        });
        let progress = stopper.update(epoch, valid_loss);
        if progress == Progress::Improved {
            best = Some(model.store.clone());
        }
        if progress == Progress::Stop {
            break;
        }
    }
    if let Some(best) = best {
        model.store = best;
    }
    let (best_epoch, best_valid_loss) = stopper.best().expect("at least one finite epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_valid_loss,
    })
}

/// One JSON object per epoch.
pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for rec in history {
        serde_json::to_writer(&mut w, rec).map_err(|e| io(e.into()))?;
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

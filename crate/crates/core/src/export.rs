//! Fused-feature export, one JSON object per sample.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::predict;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: f64,
    /// `[F_t_final || F_a_final || F_t_ctx || F_a_ctx]`.
    pub embedding: Vec<f64>,
}

pub fn embeddings(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<Vec<EmbeddingRecord>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let pred = predict(model, samples, batch_size)?;
    let width = model.cfg.embed_dim();
    Ok(samples
        .iter()
        .zip(pred.embeddings.data().chunks_exact(width))
        .map(|(s, e)| EmbeddingRecord {
            id: s.id.clone(),
            label: s.label,
            embedding: e.to_vec(),
        })
        .collect())
}

pub fn export_embeddings(model: &Model, samples: &[&Sample], batch_size: usize, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let records = embeddings(model, samples, batch_size)?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in &records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(records.len())
}

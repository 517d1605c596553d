//! Samples, the line-delimited dataset format, the synthetic generator and
//! batching.
//!
//! A dataset file is JSON Lines. The first line is a header:
//!
//! ```text
//! {"format":"ctxfuse-dataset","version":1,"d_t":16,"d_a":8,"k_t":2,"k_a":1,
//!  "counts":{"train":1400,"valid":300,"test":300}}
//! ```
//!
//! Every further line is one record with the fields `id`, `label`, `split`,
//! `text`, `audio`, `text_ctx` and `audio_ctx`. Context lists are ordered
//! oldest first and may be shorter than `k_t` / `k_a`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "ctxfuse-dataset";
pub const VERSION: u32 = 1;
/// Labels live on `[-LABEL_BOUND, LABEL_BOUND]`.
pub const LABEL_BOUND: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`, expected train, valid or test"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub label: f64,
    pub split: Split,
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub text_ctx: Vec<Vec<f64>>,
    pub audio_ctx: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub d_t: usize,
    pub d_a: usize,
    pub k_t: usize,
    pub k_a: usize,
    pub counts: BTreeMap<Split, usize>,
}

impl DatasetHeader {
    pub fn new(d_t: usize, d_a: usize, k_t: usize, k_a: usize, samples: &[Sample]) -> Self {
        let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
        for s in samples {
            *counts.entry(s.split).or_default() += 1;
        }
        Self {
            format: FORMAT.into(),
            version: VERSION,
            d_t,
            d_a,
            k_t,
            k_a,
            counts,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.counts.get(&split).copied().unwrap_or(0)
    }

    fn check(&self, s: &Sample) -> Result<()> {
        let bad = |msg: String| Error::Record { id: s.id.clone(), msg };
        if !s.label.is_finite() {
            return Err(bad("label is not finite".into()));
        }
        if s.text.len() != self.d_t {
            return Err(bad(format!("text has {} values, header declares d_t = {}", s.text.len(), self.d_t)));
        }
        if s.audio.len() != self.d_a {
            return Err(bad(format!("audio has {} values, header declares d_a = {}", s.audio.len(), self.d_a)));
        }
        for (name, ctx, k, d) in [
            ("text_ctx", &s.text_ctx, self.k_t, self.d_t),
            ("audio_ctx", &s.audio_ctx, self.k_a, self.d_a),
        ] {
            if ctx.len() > k {
                return Err(bad(format!("{name} has {} vectors, header allows {k}", ctx.len())));
            }
            if let Some(c) = ctx.iter().find(|c| c.len() != d) {
                return Err(bad(format!("{name} vector has {} values, expected {d}", c.len())));
            }
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&s.text) || !finite(&s.audio) || !s.text_ctx.iter().chain(&s.audio_ctx).all(|c| finite(c)) {
            return Err(bad("features contain non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(d_t: usize, d_a: usize, k_t: usize, k_a: usize, samples: Vec<Sample>) -> Result<Self> {
        let header = DatasetHeader::new(d_t, d_a, k_t, k_a, &samples);
        samples.iter().try_for_each(|s| header.check(s))?;
        Ok(Self { header, samples })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header: DatasetHeader = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io("<dataset>", e))?;
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: 1,
                    msg: format!("invalid header: {e}"),
                })?
            }
            None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
        };
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported format {} v{}", header.format, header.version),
            });
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            header.check(&sample)?;
            samples.push(sample);
        }
        for split in Split::ALL {
            let n = samples.iter().filter(|s| s.split == split).count();
            if n != header.count(split) {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("header declares {} {split} records, found {n}", header.count(split)),
                });
            }
        }
        Ok(Self { header, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, &self.header)?;
        writeln!(w)?;
        for s in &self.samples {
            serde_json::to_writer(&mut *w, s)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Parameters of the synthetic context-dependent task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub k_t: usize,
    pub k_a: usize,
    /// Context strength `lambda` in `y = (1 - lambda) s_main + lambda s_ctx`.
    pub lambda: f64,
    /// Number of newest context utterances averaged into `s_ctx`.
    pub depth: usize,
    pub text_noise: f64,
    pub audio_noise: f64,
    /// Probability that a sample has fewer than the full number of contexts.
    pub partial: f64,
    /// Fractions of train and valid samples; the rest is test.
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            d_t: 16,
            d_a: 8,
            k_t: 2,
            k_a: 1,
            lambda: 0.5,
            depth: 2,
            text_noise: 0.1,
            audio_noise: 0.3,
            partial: 0.0,
            train_frac: 0.7,
            valid_frac: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n == 0 || self.d_t == 0 || self.d_a == 0 || self.depth == 0 {
            return err("data.n, data.d_t, data.d_a and data.depth must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err(format!("data.lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.partial) {
            return err(format!("data.partial must be in [0, 1], got {}", self.partial));
        }
        if self.text_noise < 0.0 || self.audio_noise < 0.0 {
            return err("noise levels must be non-negative".into());
        }
        if self.train_frac < 0.0 || self.valid_frac < 0.0 || self.train_frac + self.valid_frac > 1.0 {
            return err("split fractions must be non-negative and sum to at most 1".into());
        }
        Ok(())
    }
}

/// Fixed per-seed encoders of a scalar latent into feature space.
struct Encoders {
    text: Vec<f64>,
    audio: Vec<f64>,
}

impl Encoders {
    fn new(rng: &mut impl Rng, d_t: usize, d_a: usize) -> Self {
        let unit = |rng: &mut dyn rand::RngCore, d: usize| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        Self {
            text: unit(rng, d_t),
            audio: unit(rng, d_a),
        }
    }

    fn text(&self, rng: &mut impl Rng, noise: &Normal<f64>, s: f64) -> Vec<f64> {
        self.text.iter().map(|u| u * s + noise.sample(rng)).collect()
    }

    fn audio(&self, rng: &mut impl Rng, noise: &Normal<f64>, s: f64) -> Vec<f64> {
        let warped = s.signum() * s.abs().sqrt();
        self.audio.iter().map(|u| u * warped + noise.sample(rng)).collect()
    }
}

/// Direction along which the text encoder writes a latent, for oracles.
pub fn text_direction(seed: u64, d_t: usize, d_a: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Encoders::new(&mut rng, d_t, d_a).text
}

/// Draws `cfg.n` samples. Each utterance and each of its context utterances
/// has an independent latent sentiment on `[-3, 3]`; `s_ctx` is the mean
/// latent of the `depth` newest available contexts (0 when none exist).
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoders::new(&mut rng, cfg.d_t, cfg.d_a);
    let text_noise = Normal::new(0.0, cfg.text_noise).map_err(|e| Error::Config(e.to_string()))?;
    let audio_noise = Normal::new(0.0, cfg.audio_noise).map_err(|e| Error::Config(e.to_string()))?;
    let n_train = (cfg.n as f64 * cfg.train_frac).round() as usize;
    let n_valid = (cfg.n as f64 * cfg.valid_frac).round() as usize;
    let history = cfg.k_t.max(cfg.k_a).max(cfg.depth);

    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let s_main: f64 = rng.random_range(-LABEL_BOUND..=LABEL_BOUND);
        // Newest first.
        let latents: Vec<f64> = (0..history).map(|_| rng.random_range(-LABEL_BOUND..=LABEL_BOUND)).collect();
        let available = if rng.random::<f64>() < cfg.partial {
            rng.random_range(0..history)
        } else {
            history
        };
        let used = cfg.depth.min(available);
        let s_ctx = if used == 0 {
            0.0
        } else {
            latents[..used].iter().sum::<f64>() / used as f64
        };
        let label = ((1.0 - cfg.lambda) * s_main + cfg.lambda * s_ctx).clamp(-LABEL_BOUND, LABEL_BOUND);

        let text = enc.text(&mut rng, &text_noise, s_main);
        let audio = enc.audio(&mut rng, &audio_noise, s_main);
        let mut text_ctx: Vec<_> = (0..cfg.k_t.min(available))
            .map(|j| enc.text(&mut rng, &text_noise, latents[j]))
            .collect();
        let mut audio_ctx: Vec<_> = (0..cfg.k_a.min(available))
            .map(|j| enc.audio(&mut rng, &audio_noise, latents[j]))
            .collect();
        text_ctx.reverse();
        audio_ctx.reverse();

        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        samples.push(Sample {
            id: format!("{i:06}"),
            label,
            split,
            text,
            audio,
            text_ctx,
            audio_ctx,
        });
    }
    Dataset::new(cfg.d_t, cfg.d_a, cfg.k_t, cfg.k_a, samples)
}

/// Index batches of size `batch_size` in an order fixed by `shuffle_seed`
/// (`None` keeps the input order). The last batch may be partial.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_iter", "batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches of sample references, see [`batch_indices`].
pub fn batch_iter<'a>(
    samples: &[&'a Sample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Vec<&'a Sample>>> {
    Ok(batch_indices(samples.len(), batch_size, shuffle_seed)?
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| samples[i]).collect())
        .collect())
}

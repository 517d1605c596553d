use std::io::Cursor;

use ctxfuse::data::{batch_indices, batch_iter, generate, text_direction, Dataset, Sample, Split, SynthConfig};
use ctxfuse::Error;
use proptest::prelude::*;

fn bytes(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    d.write(&mut out).unwrap();
    out
}

fn small() -> SynthConfig {
    SynthConfig { n: 50, ..SynthConfig::default() }
}

#[test]
fn round_trip_is_bit_identical() {
    let d = generate(&small(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    d.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.header, d.header);
    for (a, b) in d.samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label.to_bits(), b.label.to_bits());
        let bits = |s: &Sample| {
            s.text.iter().chain(&s.audio).chain(s.text_ctx.iter().flatten()).chain(s.audio_ctx.iter().flatten()).map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(bytes(&back), bytes(&d));
}

#[test]
fn same_seed_gives_identical_bytes() {
    assert_eq!(bytes(&generate(&small(), 9).unwrap()), bytes(&generate(&small(), 9).unwrap()));
    assert_ne!(bytes(&generate(&small(), 9).unwrap()), bytes(&generate(&small(), 10).unwrap()));
}

#[test]
fn empty_dataset_with_valid_header_loads() {
    let d = Dataset::new(3, 2, 1, 0, Vec::new()).unwrap();
    let back = Dataset::read(Cursor::new(bytes(&d))).unwrap();
    assert!(back.samples.is_empty());
    assert_eq!(back.header.d_t, 3);
}

#[test]
fn short_record_is_rejected_by_id() {
    let mut d = generate(&small(), 1).unwrap();
    d.samples[4].text.pop();
    let text = String::from_utf8(bytes(&d)).unwrap();
    match Dataset::read(Cursor::new(text)) {
        Err(Error::Record { id, .. }) => assert_eq!(id, d.samples[4].id),
        other => panic!("expected a record error, got {other:?}"),
    }
}

#[test]
fn malformed_line_reports_its_number() {
    let d = generate(&small(), 1).unwrap();
    let mut text = String::from_utf8(bytes(&d)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut broken: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    broken[3] = "{not json".into();
    text = broken.join("\n");
    match Dataset::read(Cursor::new(text)) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(Dataset::read(Cursor::new("")), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn header_counts_are_checked() {
    let d = generate(&small(), 1).unwrap();
    let text = String::from_utf8(bytes(&d)).unwrap();
    let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    assert!(matches!(Dataset::read(Cursor::new(truncated)), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn splits_follow_the_configured_fractions() {
    let d = generate(&SynthConfig { n: 200, ..SynthConfig::default() }, 0).unwrap();
    assert_eq!(d.split(Split::Train).len(), 140);
    assert_eq!(d.split(Split::Valid).len(), 30);
    assert_eq!(d.split(Split::Test).len(), 30);
    assert!(d.samples.iter().all(|s| s.label.abs() <= 3.0 && s.text_ctx.len() == 2 && s.audio_ctx.len() == 1));
    assert_eq!("valid".parse::<Split>().unwrap(), Split::Valid);
    assert!("dev".parse::<Split>().is_err());
}

#[test]
fn invalid_generator_settings_are_config_errors() {
    for cfg in [
        SynthConfig { lambda: 1.5, ..small() },
        SynthConfig { n: 0, ..small() },
        SynthConfig { train_frac: 0.9, valid_frac: 0.2, ..small() },
    ] {
        assert!(matches!(generate(&cfg, 0), Err(Error::Config(_))));
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[test]
fn without_context_strength_labels_ignore_context() {
    for seed in 0..3 {
        let cfg = SynthConfig { lambda: 0.0, ..SynthConfig::default() };
        let d = generate(&cfg, seed).unwrap();
        let u = text_direction(seed, cfg.d_t, cfg.d_a);
        let decoded: Vec<f64> = d.samples.iter().map(|s| s.text_ctx[1].iter().zip(&u).map(|(a, b)| a * b).sum()).collect();
        let labels: Vec<f64> = d.samples.iter().map(|s| s.label).collect();
        let r = pearson(&decoded, &labels);
        assert!(r.abs() < 0.05, "seed {seed}: {r}");
    }
}

/// Least squares with an intercept via the normal equations; returns MAE
/// of the in-sample fit.
#[allow(clippy::needless_range_loop)]
fn least_squares_mae(rows: &[Vec<f64>], y: &[f64]) -> f64 {
    let k = rows[0].len() + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for (r, t) in rows.iter().zip(y) {
        let x: Vec<f64> = std::iter::once(1.0).chain(r.iter().copied()).collect();
        for i in 0..k {
            for j in 0..k {
                a[i][j] += x[i] * x[j];
            }
            a[i][k] += x[i] * t;
        }
    }
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        for row in 0..k {
            if row != col {
                let factor = a[row][col] / a[col][col];
                for c in col..=k {
                    a[row][c] -= factor * a[col][c];
                }
            }
        }
    }
    let w: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    rows.iter()
        .zip(y)
        .map(|(r, t)| (w[0] + r.iter().zip(&w[1..]).map(|(x, c)| x * c).sum::<f64>() - t).abs())
        .sum::<f64>()
        / y.len() as f64
}

fn context_gap(lambda: f64) -> f64 {
    let d = generate(&SynthConfig { lambda, ..SynthConfig::default() }, 4).unwrap();
    let y: Vec<f64> = d.samples.iter().map(|s| s.label).collect();
    let main: Vec<Vec<f64>> = d.samples.iter().map(|s| s.text.clone()).collect();
    let full: Vec<Vec<f64>> = d
        .samples
        .iter()
        .map(|s| s.text.iter().chain(s.text_ctx.iter().flatten()).copied().collect())
        .collect();
    least_squares_mae(&main, &y) - least_squares_mae(&full, &y)
}

#[test]
fn context_information_gap_grows_with_strength() {
    let gaps: Vec<f64> = [0.0, 0.25, 0.5].into_iter().map(context_gap).collect();
    assert!(gaps[2] > 0.1, "{gaps:?}");
    assert!(gaps.windows(2).all(|w| w[1] >= w[0]), "{gaps:?}");
}

#[test]
fn partial_histories_stay_within_the_window() {
    let d = generate(&SynthConfig { partial: 0.5, n: 300, ..SynthConfig::default() }, 2).unwrap();
    assert!(d.samples.iter().any(|s| s.text_ctx.len() < 2));
    assert!(d.samples.iter().all(|s| s.text_ctx.len() <= 2 && s.audio_ctx.len() <= 1));
}

#[test]
fn thirty_three_samples_in_batches_of_sixteen() {
    let sizes: Vec<usize> = batch_indices(33, 16, Some(1)).unwrap().iter().map(Vec::len).collect();
    assert_eq!(sizes, [16, 16, 1]);
    assert_eq!(batch_indices(33, 16, Some(1)).unwrap(), batch_indices(33, 16, Some(1)).unwrap());
    assert_eq!(batch_indices(5, 2, None).unwrap(), vec![vec![0, 1], vec![2, 3], vec![4]]);
    assert!(batch_indices(5, 0, None).is_err());
    let d = generate(&small(), 0).unwrap();
    let refs: Vec<&Sample> = d.samples.iter().collect();
    let batches = batch_iter(&refs, 16, Some(3)).unwrap();
    assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 50);
}

proptest! {
    #[test]
    fn batches_partition_the_indices(n in 0usize..300, bs in 1usize..40, seed in proptest::option::of(0u64..1000)) {
        let batches = batch_indices(n, bs, seed).unwrap();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        prop_assert!(batches.iter().rev().skip(1).all(|b| b.len() == bs));
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

//! Exact rational reference for the metric suite.

use ctxfuse::metrics::{MetricReport, NEUTRAL_BAND};
use num::rational::BigRational;
use num::{BigInt, Signed, ToPrimitive, Zero};
use rand::Rng;

fn q(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

fn frac(num: usize, den: usize) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

/// Nearest integer, halves to even.
fn round_even(x: &BigRational) -> BigInt {
    let fl = x.floor();
    let diff = x - &fl;
    let half = frac(1, 2);
    let base = fl.to_integer();
    if diff > half || (diff == half && (&base % 2) != BigInt::zero()) {
        base + 1
    } else {
        base
    }
}

fn clip_round(x: &BigRational, bound: i64) -> BigInt {
    let b = BigRational::from_integer(BigInt::from(bound));
    let c = if *x > b {
        b
    } else if *x < -b.clone() {
        -b
    } else {
        x.clone()
    };
    round_even(&c)
}

fn band(x: &BigRational) -> i8 {
    let t = q(NEUTRAL_BAND);
    if *x < -t.clone() {
        -1
    } else if *x > t {
        1
    } else {
        0
    }
}

/// F1 per class from the confusion counts, weighted by true support.
fn f1_oracle(pairs: &[(bool, bool)]) -> BigRational {
    if pairs.is_empty() {
        return BigRational::zero();
    }
    let mut total = BigRational::zero();
    for class in [false, true] {
        let tp = pairs.iter().filter(|(p, t)| *p == class && *t == class).count();
        let fp = pairs.iter().filter(|(p, t)| *p == class && *t != class).count();
        let fn_ = pairs.iter().filter(|(p, t)| *p != class && *t == class).count();
        let precision = frac(tp, tp + fp);
        let recall = frac(tp, tp + fn_);
        let f1 = if (&precision + &recall).is_zero() {
            BigRational::zero()
        } else {
            BigRational::from_integer(2.into()) * &precision * &recall / (&precision + &recall)
        };
        total += f1 * BigRational::from_integer((tp + fn_).into());
    }
    total / BigRational::from_integer(pairs.len().into())
}

pub fn oracle(pred: &[f64], labels: &[f64]) -> [f64; 9] {
    let p: Vec<BigRational> = pred.iter().map(|&v| q(v)).collect();
    let y: Vec<BigRational> = labels.iter().map(|&v| q(v)).collect();
    let n = p.len();
    let zero = BigRational::zero();
    let count = |f: &dyn Fn(&BigRational, &BigRational) -> bool| p.iter().zip(&y).filter(|(a, b)| f(a, b)).count();

    let nn: Vec<(bool, bool)> = p.iter().zip(&y).map(|(a, b)| (*a >= zero, *b >= zero)).collect();
    let np: Vec<(bool, bool)> = p.iter().zip(&y).filter(|(_, b)| !b.is_zero()).map(|(a, b)| (*a > zero, *b > zero)).collect();
    let acc = |v: &[(bool, bool)]| frac(v.iter().filter(|(a, b)| a == b).count(), v.len());

    let mae = p.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(BigRational::zero(), |s, v| s + v) / BigRational::from_integer(n.into());

    let nq = BigRational::from_integer(n.into());
    let mp = p.iter().fold(BigRational::zero(), |s, v| s + v) / &nq;
    let my = y.iter().fold(BigRational::zero(), |s, v| s + v) / &nq;
    let (mut sxy, mut sxx, mut syy) = (BigRational::zero(), BigRational::zero(), BigRational::zero());
    for (a, b) in p.iter().zip(&y) {
        let (da, db) = (a - &mp, b - &my);
        sxy += &da * &db;
        sxx += &da * &da;
        syy += &db * &db;
    }
    let corr = if sxx.is_zero() || syy.is_zero() {
        0.0
    } else {
        let r2 = (&sxy * &sxy / (sxx * syy)).to_f64().unwrap();
        if sxy.is_negative() { -r2.sqrt() } else { r2.sqrt() }
    };

    [
        acc(&nn).to_f64().unwrap(),
        acc(&np).to_f64().unwrap(),
        f1_oracle(&nn).to_f64().unwrap(),
        f1_oracle(&np).to_f64().unwrap(),
        frac(count(&|a, b| clip_round(a, 3) == clip_round(b, 3)), n).to_f64().unwrap(),
        frac(count(&|a, b| clip_round(a, 2) == clip_round(b, 2)), n).to_f64().unwrap(),
        frac(count(&|a, b| band(a) == band(b)), n).to_f64().unwrap(),
        mae.to_f64().unwrap(),
        corr,
    ]
}

pub fn flat(r: &MetricReport) -> [f64; 9] {
    [r.acc2_nn, r.acc2_np, r.f1_nn, r.f1_np, r.acc7, r.acc5, r.acc3, r.mae, r.corr]
}


/// Mixes continuous values with exact ties: half-integers, zero and the
/// neutral-band edges.
pub fn tie_value(r: &mut impl Rng) -> f64 {
    match r.random_range(0..6) {
        0 => r.random_range(-7..=7) as f64 * 0.5,
        1 => 0.0,
        2 => [NEUTRAL_BAND, -NEUTRAL_BAND][r.random_range(0..2)],
        3 => r.random_range(-4.0..4.0),
        _ => r.random_range(-3.0..3.0),
    }
}


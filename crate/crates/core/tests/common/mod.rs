//! Brute-force reference implementations shared by the integration tests.
//! Deliberately naive: no max-shift, no shared helpers with the library.

#![allow(dead_code)]

use adats::CalibrationDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random dataset with `n ≤ 64`, `2 ≤ k ≤ 10` and a few features.
pub fn random_dataset(rng: &mut ChaCha8Rng) -> CalibrationDataset {
    let n = rng.random_range(1..=64);
    let k = rng.random_range(2..=10);
    let d = rng.random_range(1..=4);
    let features = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let logits = (0..n * k).map(|_| rng.random_range(-6.0..6.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
    CalibrationDataset::new(d, k, features, logits, labels).unwrap()
}

pub fn probs(s: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = s.iter().map(|v| (v / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

fn conf_correct(d: &CalibrationDataset, temps: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let conf = (0..d.n())
        .map(|i| probs(d.logits(i), temps[i]).into_iter().fold(0.0, f64::max))
        .collect();
    let correct = (0..d.n())
        .map(|i| first_argmax(d.logits(i)) == d.label(i))
        .collect();
    (conf, correct)
}

fn gap(members: &[usize], conf: &[f64], correct: &[bool], n: usize) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let m = members.len() as f64;
    let c: f64 = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
    let a = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
    m / n as f64 * (a - c).abs()
}

pub fn ece(d: &CalibrationDataset, temps: &[f64], bins: usize) -> f64 {
    let (conf, correct) = conf_correct(d, temps);
    (0..bins)
        .map(|b| {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            let members: Vec<usize> = (0..d.n())
                .filter(|&i| conf[i] >= lo && (conf[i] < hi || (b == bins - 1 && conf[i] <= 1.0)))
                .collect();
            gap(&members, &conf, &correct, d.n())
        })
        .sum()
}

pub fn ada_ece(d: &CalibrationDataset, temps: &[f64], bins: usize) -> f64 {
    let (conf, correct) = conf_correct(d, temps);
    let n = d.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[a].partial_cmp(&conf[b]).unwrap());
    let mut start = 0;
    let mut total = 0.0;
    for b in 0..bins {
        let size = n / bins + usize::from(b < n % bins);
        total += gap(&order[start..start + size], &conf, &correct, n);
        start += size;
    }
    total
}

pub fn nll(d: &CalibrationDataset, temps: &[f64]) -> f64 {
    (0..d.n())
        .map(|i| -probs(d.logits(i), temps[i])[d.label(i)].ln())
        .sum::<f64>()
        / d.n() as f64
}

pub fn brier(d: &CalibrationDataset, temps: &[f64]) -> f64 {
    (0..d.n())
        .map(|i| {
            let p = probs(d.logits(i), temps[i]);
            (0..d.k())
                .map(|j| {
                    let y = if j == d.label(i) { 1.0 } else { 0.0 };
                    (p[j] - y) * (p[j] - y)
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / d.n() as f64
}

/// `(rejection rate, retained accuracy)` points from full rejection to none,
/// and the trapezoid area, rejecting the lowest max-probability first.
pub fn rejection(d: &CalibrationDataset, temps: &[f64]) -> (Vec<(f64, f64)>, f64) {
    let (conf, correct) = conf_correct(d, temps);
    let n = d.n();
    let mut points = Vec::new();
    for kept in 0..=n {
        let mut remaining: Vec<usize> = (0..n).collect();
        while remaining.len() > kept {
            let worst = (0..remaining.len())
                .min_by(|&a, &b| conf[remaining[a]].partial_cmp(&conf[remaining[b]]).unwrap())
                .unwrap();
            remaining.remove(worst);
        }
        let acc = if kept == 0 {
            1.0
        } else {
            remaining.iter().filter(|&&i| correct[i]).count() as f64 / kept as f64
        };
        points.push((1.0 - kept as f64 / n as f64, acc));
    }
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let area = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    (points, area)
}

pub fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

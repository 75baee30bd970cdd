//! Calibration and selective-prediction metrics.
//!
//! Conventions used throughout:
//! - predictions are `argmax` of the raw logits, ties to the lowest index,
//!   so correctness never depends on the temperature;
//! - equal-width bin `i` of `B` covers `[i/B, (i+1)/B)`, the last bin is
//!   closed at 1.0;
//! - equal-mass bins are cut from the stably sorted confidences, earlier
//!   bins receiving the remainder, so sizes differ by at most one.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::CalibrationDataset;
use crate::error::{Error, Result};
use crate::nn::ops::{
    argmax, entropy, log_softmax_scaled_at, log_sum_exp, max, sigmoid, softmax_scaled_into,
};

pub const DEFAULT_BINS: usize = 15;

/// A single temperature for every sample, or one per sample.
#[derive(Clone, Copy, Debug)]
pub enum Temperatures<'a> {
    Constant(f64),
    PerSample(&'a [f64]),
}

impl<'a> Temperatures<'a> {
    pub fn get(&self, i: usize) -> f64 {
        match self {
            Temperatures::Constant(t) => *t,
            Temperatures::PerSample(ts) => ts[i],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |t: f64| !(t > 0.0) || !t.is_finite();
        match self {
            Temperatures::Constant(t) if bad(*t) => Err(Error::invalid(format!(
                "temperature must be positive and finite, got {t}"
            ))),
            Temperatures::Constant(_) => Ok(()),
            Temperatures::PerSample(ts) => {
                if ts.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: ts.len(),
                    });
                }
                match ts.iter().position(|&t| bad(t)) {
                    Some(i) => Err(Error::SampleValidation {
                        index: i,
                        reason: format!("temperature must be positive and finite, got {}", ts[i]),
                    }),
                    None => Ok(()),
                }
            }
        }
    }
}

impl From<f64> for Temperatures<'_> {
    fn from(t: f64) -> Self {
        Temperatures::Constant(t)
    }
}

impl<'a> From<&'a [f64]> for Temperatures<'a> {
    fn from(ts: &'a [f64]) -> Self {
        Temperatures::PerSample(ts)
    }
}

impl<'a> From<&'a Vec<f64>> for Temperatures<'a> {
    fn from(ts: &'a Vec<f64>) -> Self {
        Temperatures::PerSample(ts)
    }
}

/// `max softmax(s / t)`.
fn max_prob(s: &[f64], t: f64) -> f64 {
    let m = max(s);
    1.0 / s.iter().map(|&x| ((x - m) / t).exp()).sum::<f64>()
}

pub fn predictions(d: &CalibrationDataset) -> Vec<usize> {
    (0..d.n()).map(|i| argmax(d.logits(i))).collect()
}

pub fn confidences_and_correctness<'a>(
    d: &CalibrationDataset,
    temps: impl Into<Temperatures<'a>>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let temps = temps.into();
    temps.validate(d.n())?;
    let conf = (0..d.n())
        .map(|i| max_prob(d.logits(i), temps.get(i)))
        .collect();
    let correct = (0..d.n())
        .map(|i| argmax(d.logits(i)) == d.label(i))
        .collect();
    Ok((conf, correct))
}

pub fn accuracy(d: &CalibrationDataset) -> f64 {
    let hits = (0..d.n())
        .filter(|&i| argmax(d.logits(i)) == d.label(i))
        .count();
    hits as f64 / d.n() as f64
}

/// Mean negative log-likelihood of the labels under `softmax(s / T)`.
pub fn nll<'a>(d: &CalibrationDataset, temps: impl Into<Temperatures<'a>>) -> Result<f64> {
    let temps = temps.into();
    temps.validate(d.n())?;
    let total: f64 = (0..d.n())
        .map(|i| -log_softmax_scaled_at(d.logits(i), temps.get(i), d.label(i)))
        .sum();
    Ok(total / d.n() as f64)
}

/// Mean squared distance between `softmax(s / T)` and the one-hot label.
pub fn brier<'a>(d: &CalibrationDataset, temps: impl Into<Temperatures<'a>>) -> Result<f64> {
    let temps = temps.into();
    temps.validate(d.n())?;
    let mut p = vec![0.0; d.k()];
    let mut total = 0.0;
    for i in 0..d.n() {
        softmax_scaled_into(d.logits(i), temps.get(i), &mut p);
        let y = d.label(i);
        total += p
            .iter()
            .enumerate()
            .map(|(j, &pj)| {
                let e = pj - if j == y { 1.0 } else { 0.0 };
                e * e
            })
            .sum::<f64>();
    }
    Ok(total / d.n() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinScheme {
    EqualWidth,
    EqualMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub scheme: BinScheme,
    pub total: usize,
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityDiagram {
    /// `Σ_b (count_b / total) · |accuracy_b − mean_confidence_b|`.
    pub fn weighted_gap(&self) -> f64 {
        let n = self.total as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.count as f64 / n) * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "bin",
            "lower",
            "upper",
            "count",
            "mean_confidence",
            "accuracy",
        ])?;
        for (i, b) in self.bins.iter().enumerate() {
            out.write_record([
                i.to_string(),
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                b.mean_confidence.to_string(),
                b.accuracy.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

fn equal_width_bin(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).floor() as usize).min(bins - 1)
}

/// Bin membership of each sample under the given scheme.
pub fn assign_bins(conf: &[f64], bins: usize, scheme: BinScheme) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::invalid("bin count must be at least 1"));
    }
    match scheme {
        BinScheme::EqualWidth => Ok(conf.iter().map(|&c| equal_width_bin(c, bins)).collect()),
        BinScheme::EqualMass => {
            let n = conf.len();
            if bins > n {
                return Err(Error::invalid(format!(
                    "equal-mass binning needs bins <= n ({bins} > {n})"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]));
            let base = n / bins;
            let extra = n % bins;
            let mut out = vec![0; n];
            let mut pos = 0;
            for b in 0..bins {
                let size = base + usize::from(b < extra);
                for &i in &order[pos..pos + size] {
                    out[i] = b;
                }
                pos += size;
            }
            Ok(out)
        }
    }
}

/// Reliability table from precomputed confidences and correctness flags.
pub fn reliability_from(
    conf: &[f64],
    correct: &[bool],
    bins: usize,
    scheme: BinScheme,
) -> Result<ReliabilityDiagram> {
    if conf.len() != correct.len() {
        return Err(Error::DimensionMismatch {
            expected: conf.len(),
            got: correct.len(),
        });
    }
    let assignment = assign_bins(conf, bins, scheme)?;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut lo = vec![f64::INFINITY; bins];
    let mut hi = vec![f64::NEG_INFINITY; bins];
    for (i, &b) in assignment.iter().enumerate() {
        count[b] += 1;
        conf_sum[b] += conf[i];
        hits[b] += usize::from(correct[i]);
        lo[b] = lo[b].min(conf[i]);
        hi[b] = hi[b].max(conf[i]);
    }
    let table = (0..bins)
        .map(|b| {
            let (lower, upper) = match scheme {
                BinScheme::EqualWidth => (b as f64 / bins as f64, (b + 1) as f64 / bins as f64),
                BinScheme::EqualMass => (lo[b], hi[b]),
            };
            let (mean_confidence, accuracy) = if count[b] > 0 {
                (
                    conf_sum[b] / count[b] as f64,
                    hits[b] as f64 / count[b] as f64,
                )
            } else {
                (0.0, 0.0)
            };
            ReliabilityBin {
                lower,
                upper,
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityDiagram {
        scheme,
        total: conf.len(),
        bins: table,
    })
}

pub fn ece_from(conf: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    Ok(reliability_from(conf, correct, bins, BinScheme::EqualWidth)?.weighted_gap())
}

pub fn ada_ece_from(conf: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    Ok(reliability_from(conf, correct, bins, BinScheme::EqualMass)?.weighted_gap())
}

pub fn reliability<'a>(
    d: &CalibrationDataset,
    temps: impl Into<Temperatures<'a>>,
    bins: usize,
    scheme: BinScheme,
) -> Result<ReliabilityDiagram> {
    let (conf, correct) = confidences_and_correctness(d, temps)?;
    reliability_from(&conf, &correct, bins, scheme)
}

pub fn ece<'a>(
    d: &CalibrationDataset,
    temps: impl Into<Temperatures<'a>>,
    bins: usize,
) -> Result<f64> {
    Ok(reliability(d, temps, bins, BinScheme::EqualWidth)?.weighted_gap())
}

pub fn ada_ece<'a>(
    d: &CalibrationDataset,
    temps: impl Into<Temperatures<'a>>,
    bins: usize,
) -> Result<f64> {
    Ok(reliability(d, temps, bins, BinScheme::EqualMass)?.weighted_gap())
}

/// Per-sample signed miscalibration under equal-width binning:
/// `confidence_i − accuracy(bin(i))`, positive when overconfident.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionHistogram {
    pub bins: usize,
    pub per_sample: Vec<f64>,
    pub bin_assignment: Vec<usize>,
}

impl ContributionHistogram {
    /// Count-weighted mean over bins of |mean contribution in the bin|;
    /// equals the ECE of the same binning.
    pub fn weighted_abs_bin_mean(&self) -> f64 {
        let mut sum = vec![0.0; self.bins];
        let mut count = vec![0usize; self.bins];
        for (&b, &c) in self.bin_assignment.iter().zip(&self.per_sample) {
            sum[b] += c;
            count[b] += 1;
        }
        let n = self.per_sample.len() as f64;
        (0..self.bins)
            .filter(|&b| count[b] > 0)
            .map(|b| (count[b] as f64 / n) * (sum[b] / count[b] as f64).abs())
            .sum()
    }

    /// Counts of `per_sample` over `buckets` equal-width buckets on [-1, 1].
    pub fn histogram(&self, buckets: usize) -> Vec<usize> {
        let mut out = vec![0; buckets.max(1)];
        let b = out.len();
        for &c in &self.per_sample {
            let idx = (((c + 1.0) / 2.0 * b as f64).floor() as usize).min(b - 1);
            out[idx] += 1;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sample", "bin", "contribution"])?;
        for (i, (b, c)) in self.bin_assignment.iter().zip(&self.per_sample).enumerate() {
            out.write_record([i.to_string(), b.to_string(), c.to_string()])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

pub fn contribution_from(
    conf: &[f64],
    correct: &[bool],
    bins: usize,
) -> Result<ContributionHistogram> {
    let diagram = reliability_from(conf, correct, bins, BinScheme::EqualWidth)?;
    let bin_assignment = assign_bins(conf, bins, BinScheme::EqualWidth)?;
    let per_sample = conf
        .iter()
        .zip(&bin_assignment)
        .map(|(&c, &b)| c - diagram.bins[b].accuracy)
        .collect();
    Ok(ContributionHistogram {
        bins,
        per_sample,
        bin_assignment,
    })
}

pub fn contribution_histogram<'a>(
    d: &CalibrationDataset,
    temps: impl Into<Temperatures<'a>>,
    bins: usize,
) -> Result<ContributionHistogram> {
    let (conf, correct) = confidences_and_correctness(d, temps)?;
    contribution_from(&conf, &correct, bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Confidence,
    Entropy,
    DempsterShafer,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [
        ScoreKind::Confidence,
        ScoreKind::Entropy,
        ScoreKind::DempsterShafer,
    ];

    pub fn short_name(&self) -> &'static str {
        match self {
            ScoreKind::Confidence => "confidence",
            ScoreKind::Entropy => "entropy",
            ScoreKind::DempsterShafer => "ds",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionPoint {
    pub rejection_rate: f64,
    pub retained_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub score_kind: ScoreKind,
    pub points: Vec<RejectionPoint>,
    pub aurra: f64,
}

impl RejectionCurve {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rejection_rate", "retained_accuracy"])?;
        for p in &self.points {
            out.write_record([
                p.rejection_rate.to_string(),
                p.retained_accuracy.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Certainty score of one sample; higher means more likely to be retained.
pub fn certainty_score(s: &[f64], t: f64, kind: ScoreKind) -> f64 {
    match kind {
        ScoreKind::Confidence => max_prob(s, t),
        ScoreKind::Entropy => {
            let mut p = vec![0.0; s.len()];
            softmax_scaled_into(s, t, &mut p);
            -entropy(&p)
        }
        // 1 − k / (k + Σ exp(s/T)) = sigmoid(logsumexp(s/T) − ln k)
        ScoreKind::DempsterShafer => {
            let scaled: Vec<f64> = s.iter().map(|v| v / t).collect();
            sigmoid(log_sum_exp(&scaled) - (s.len() as f64).ln())
        }
    }
}

/// Retained-accuracy vs rejection-rate curve, rejecting lowest scores first.
pub fn rejection_curve_from(
    scores: &[f64],
    correct: &[bool],
    kind: ScoreKind,
) -> Result<RejectionCurve> {
    let n = scores.len();
    if n == 0 || correct.len() != n {
        return Err(Error::invalid(
            "rejection curve needs equal, non-empty inputs",
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // prefix[m] = correct count among the m highest scores
    let mut prefix = vec![0usize; n + 1];
    for (m, &i) in order.iter().enumerate() {
        prefix[m + 1] = prefix[m] + usize::from(correct[i]);
    }
    let points: Vec<RejectionPoint> = (0..=n)
        .rev()
        .map(|m| RejectionPoint {
            rejection_rate: 1.0 - m as f64 / n as f64,
            retained_accuracy: if m == 0 {
                1.0
            } else {
                prefix[m] as f64 / m as f64
            },
        })
        .collect();
    let aurra = points
        .windows(2)
        .map(|w| {
            (w[1].rejection_rate - w[0].rejection_rate)
                * (w[0].retained_accuracy + w[1].retained_accuracy)
                / 2.0
        })
        .sum();
    Ok(RejectionCurve {
        score_kind: kind,
        points,
        aurra,
    })
}

pub fn rejection_curve<'a>(
    d: &CalibrationDataset,
    temps: impl Into<Temperatures<'a>>,
    kind: ScoreKind,
) -> Result<RejectionCurve> {
    let temps = temps.into();
    temps.validate(d.n())?;
    let scores: Vec<f64> = (0..d.n())
        .map(|i| certainty_score(d.logits(i), temps.get(i), kind))
        .collect();
    let correct: Vec<bool> = (0..d.n())
        .map(|i| argmax(d.logits(i)) == d.label(i))
        .collect();
    rejection_curve_from(&scores, &correct, kind)
}

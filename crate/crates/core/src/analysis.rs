//! Gradient verification, interpolation probes, temperature histograms and
//! latent export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adats::{AdaTsModel, Architecture, TrainConfig};
use crate::dataset::CalibrationDataset;
use crate::error::{check_dim, Error, Result};
use crate::metrics;
use crate::nn::ops::{argmax, log_softmax_scaled_at, softmax_ce_logit_grad, softmax_scaled_into};
use crate::nn::rng::{normal, normal_vec, seeded, Prng};

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "temperature must be positive and finite, got {t}"
        )))
    }
}

fn check_class(y: usize, k: usize) -> Result<()> {
    if y < k {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "class {y} out of range for {k} classes"
        )))
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(floor)
}

/// `−log softmax(s / t)_y`.
pub fn nll_at_temperature(s: &[f64], y: usize, t: f64) -> Result<f64> {
    check_temperature(t)?;
    check_class(y, s.len())?;
    Ok(-log_softmax_scaled_at(s, t, y))
}

/// Exact `∂/∂t` of `−log softmax(s / t)_y`: `(s_y − Σ p_i s_i) / t²`.
pub fn nll_temperature_gradient(s: &[f64], y: usize, t: f64) -> Result<f64> {
    check_temperature(t)?;
    check_class(y, s.len())?;
    let mut p = vec![0.0; s.len()];
    softmax_scaled_into(s, t, &mut p);
    let expected: f64 = p.iter().zip(s).map(|(p, s)| p * s).sum();
    Ok((s[y] - expected) / (t * t))
}

/// The temperature gradient without the softmax normalizer, one-hot target:
///
/// ```text
/// (1/t²) · (s_y Σ_{i≠y} exp(s_i/t) − Σ_{j≠y} s_j exp(s_j/t))
/// ```
///
/// Equals `nll_temperature_gradient(s, y, t) · Σ_i exp(s_i / t)`.
pub fn unnormalized_temperature_gradient(s: &[f64], y: usize, t: f64) -> Result<f64> {
    check_temperature(t)?;
    check_class(y, s.len())?;
    let mut others = 0.0;
    let mut weighted = 0.0;
    for (j, &sj) in s.iter().enumerate() {
        if j != y {
            let e = (sj / t).exp();
            others += e;
            weighted += sj * e;
        }
    }
    Ok((s[y] * others - weighted) / (t * t))
}

/// `Σ_i exp(s_i / t)`.
pub fn softmax_normalizer(s: &[f64], t: f64) -> f64 {
    s.iter().map(|v| (v / t).exp()).sum()
}

/// Cross-entropy gradient with respect to `w` (`D × k`, row-major) for
/// the linear layer `s = wᵀx`: `x_d · (softmax(s) − onehot(y))_c`.
pub fn last_layer_gradient(w: &[f64], x: &[f64], y: usize) -> Result<Vec<f64>> {
    let (dd, k) = linear_dims(w, x)?;
    check_class(y, k)?;
    let s = linear_logits(w, x, k);
    let g = softmax_ce_logit_grad(&s, y);
    let mut out = vec![0.0; dd * k];
    for (row, &xd) in out.chunks_exact_mut(k).zip(x) {
        for (o, &gc) in row.iter_mut().zip(&g) {
            *o = xd * gc;
        }
    }
    Ok(out)
}

fn linear_dims(w: &[f64], x: &[f64]) -> Result<(usize, usize)> {
    if x.is_empty() || !w.len().is_multiple_of(x.len()) || w.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: x.len().max(1),
            got: w.len(),
        });
    }
    Ok((x.len(), w.len() / x.len()))
}

fn linear_logits(w: &[f64], x: &[f64], k: usize) -> Vec<f64> {
    let mut s = vec![0.0; k];
    for (row, &xd) in w.chunks_exact(k).zip(x) {
        for (sc, &wdc) in s.iter_mut().zip(row) {
            *sc += wdc * xd;
        }
    }
    s
}

fn linear_nll(w: &[f64], x: &[f64], y: usize, k: usize) -> f64 {
    -log_softmax_scaled_at(&linear_logits(w, x, k), 1.0, y)
}

/// Max relative deviation (floor `1e-6`) of [`last_layer_gradient`] from
/// five-point central differences of the cross-entropy.
pub fn verify_last_layer_grad(w: &[f64], x: &[f64], y: usize) -> Result<f64> {
    let analytic = last_layer_gradient(w, x, y)?;
    let (_, k) = linear_dims(w, x)?;
    let mut w = w.to_vec();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = w[i];
        let h = 1e-3 * orig.abs().max(1.0);
        let mut f = |v: f64| {
            w[i] = v;
            linear_nll(&w, x, y, k)
        };
        let fd = (-f(orig + 2.0 * h) + 8.0 * f(orig + h) - 8.0 * f(orig - h) + f(orig - 2.0 * h))
            / (12.0 * h);
        w[i] = orig;
        worst = worst.max(relative_error(fd, a, 1e-6));
    }
    Ok(worst)
}

/// Temperatures along `α φ_i + (1 − α) φ_j` between two class-mean features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationTrace {
    pub class_pair: (usize, usize),
    pub alphas: Vec<f64>,
    pub temperatures: Vec<f64>,
}

impl InterpolationTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["class_i", "class_j", "alpha", "temperature"])?;
        for (a, t) in self.alphas.iter().zip(&self.temperatures) {
            out.write_record([
                self.class_pair.0.to_string(),
                self.class_pair.1.to_string(),
                a.to_string(),
                t.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Mean feature vector over the samples labelled `class`.
pub fn class_mean_feature(d: &CalibrationDataset, class: usize) -> Result<Vec<f64>> {
    check_class(class, d.k())?;
    let mut sum = vec![0.0; d.d()];
    let mut count = 0usize;
    for i in (0..d.n()).filter(|&i| d.label(i) == class) {
        for (s, f) in sum.iter_mut().zip(d.features(i)) {
            *s += f;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid(format!("class {class} has no samples")));
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    Ok(sum)
}

/// Evaluates the inference-time temperature at `steps` evenly spaced `α`
/// in `[0, 1]`, both endpoints included.
pub fn class_mean_interpolation(
    m: &AdaTsModel,
    d: &CalibrationDataset,
    class_i: usize,
    class_j: usize,
    steps: usize,
) -> Result<InterpolationTrace> {
    check_dim(m.d(), d.d())?;
    if steps < 2 {
        return Err(Error::invalid("interpolation needs at least 2 steps"));
    }
    let phi_i = class_mean_feature(d, class_i)?;
    let phi_j = class_mean_feature(d, class_j)?;
    let alphas: Vec<f64> = (0..steps).map(|s| s as f64 / (steps - 1) as f64).collect();
    let temperatures = alphas
        .par_iter()
        .map(|&a| {
            let phi: Vec<f64> = phi_i
                .iter()
                .zip(&phi_j)
                .map(|(pi, pj)| a * pi + (1.0 - a) * pj)
                .collect();
            m.predict_temperature(&phi)
        })
        .collect::<Result<_>>()?;
    Ok(InterpolationTrace {
        class_pair: (class_i, class_j),
        alphas,
        temperatures,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    ByClass,
    ByCorrectness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGroup {
    pub name: String,
    pub class: Option<usize>,
    pub correct: Option<bool>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl TemperatureGroup {
    fn new(name: String, class: Option<usize>, correct: Option<bool>, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            name,
            class,
            correct,
            values,
            mean,
            std,
        }
    }
}

/// Predicted temperatures grouped by true class or by correctness.
/// Empty groups are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureHistogram {
    pub partition: Partition,
    pub groups: Vec<TemperatureGroup>,
}

impl TemperatureHistogram {
    pub fn group(&self, name: &str) -> Option<&TemperatureGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Counts per group over `buckets` equal-width buckets spanning all values.
    pub fn counts(&self, buckets: usize) -> (f64, f64, Vec<Vec<usize>>) {
        let all = self.groups.iter().flat_map(|g| g.values.iter().copied());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        let b = buckets.max(1);
        let width = if hi > lo { (hi - lo) / b as f64 } else { 1.0 };
        let counts = self
            .groups
            .iter()
            .map(|g| {
                let mut c = vec![0; b];
                for v in &g.values {
                    c[(((v - lo) / width) as usize).min(b - 1)] += 1;
                }
                c
            })
            .collect();
        (lo, hi, counts)
    }

    /// One row per (group, value).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group", "temperature"])?;
        for g in &self.groups {
            for v in &g.values {
                out.write_record([g.name.clone(), v.to_string()])?;
            }
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

pub fn temperature_histogram_from(
    temps: &[f64],
    d: &CalibrationDataset,
    partition: Partition,
) -> Result<TemperatureHistogram> {
    check_dim(d.n(), temps.len())?;
    let groups = match partition {
        Partition::ByClass => (0..d.k())
            .filter_map(|c| {
                let values: Vec<f64> = (0..d.n())
                    .filter(|&i| d.label(i) == c)
                    .map(|i| temps[i])
                    .collect();
                (!values.is_empty())
                    .then(|| TemperatureGroup::new(format!("class_{c}"), Some(c), None, values))
            })
            .collect(),
        Partition::ByCorrectness => {
            let preds = metrics::predictions(d);
            [true, false]
                .into_iter()
                .filter_map(|ok| {
                    let values: Vec<f64> = (0..d.n())
                        .filter(|&i| (preds[i] == d.label(i)) == ok)
                        .map(|i| temps[i])
                        .collect();
                    let name = if ok { "correct" } else { "incorrect" };
                    (!values.is_empty())
                        .then(|| TemperatureGroup::new(name.into(), None, Some(ok), values))
                })
                .collect()
        }
    };
    Ok(TemperatureHistogram { partition, groups })
}

pub fn temperature_histogram(
    m: &AdaTsModel,
    d: &CalibrationDataset,
    partition: Partition,
) -> Result<TemperatureHistogram> {
    let (temps, _) = crate::adats::calibrate(m, d)?;
    temperature_histogram_from(&temps, d, partition)
}

/// Writes `index,label,correct,contribution,z_0..z_{d_z−1}` with the
/// posterior-mean latent of every sample. Contributions use the model's
/// temperatures and equal-width binning with `bins` bins.
pub fn export_latents_to<W: Write>(
    m: &AdaTsModel,
    d: &CalibrationDataset,
    bins: usize,
    w: W,
) -> Result<()> {
    let (temps, _) = crate::adats::calibrate(m, d)?;
    let contrib = metrics::contribution_histogram(d, temps.as_slice(), bins)?;
    let preds = metrics::predictions(d);
    let latents: Vec<Vec<f64>> = (0..d.n())
        .into_par_iter()
        .map(|i| m.encode(d.features(i)).map(|q| q.mean))
        .collect::<Result<_>>()?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![
        "index".to_string(),
        "label".into(),
        "correct".into(),
        "contribution".into(),
    ];
    header.extend((0..m.latent_dim()).map(|j| format!("z_{j}")));
    out.write_record(&header)?;
    for (i, z) in latents.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            d.label(i).to_string(),
            u8::from(preds[i] == d.label(i)).to_string(),
            contrib.per_sample[i].to_string(),
        ];
        row.extend(z.iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn export_latents(
    m: &AdaTsModel,
    d: &CalibrationDataset,
    bins: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    export_latents_to(m, d, bins, BufWriter::new(f))
}

/// Random model with every parameter group perturbed away from its
/// initialization so that no gradient is structurally zero.
pub fn random_model(d: usize, k: usize, latent_dim: usize, rng: &mut Prng) -> Result<AdaTsModel> {
    let cfg = TrainConfig {
        latent_dim,
        architecture: Architecture {
            encoder_hidden: vec![6],
            decoder_hidden: vec![5],
            temp_hidden: vec![4, 4],
        },
        ..TrainConfig::default()
    };
    let mut m = AdaTsModel::init(d, k, &cfg, rng)?;
    for p in &mut m.priors {
        p.mean = normal_vec(rng, latent_dim);
        p.log_std = normal_vec(rng, latent_dim)
            .iter()
            .map(|v| 0.3 * v)
            .collect();
    }
    for net in [&mut m.encoder, &mut m.decoder, &mut m.temp_mlp] {
        for l in net.layers_mut() {
            l.bias = normal_vec(rng, l.bias.len());
        }
    }
    Ok(m)
}

/// Max relative error (floor `1e-4`) between analytic and central-difference
/// gradients of the ELBO and of the joint objective over every parameter.
pub fn check_model_gradients(
    m: &AdaTsModel,
    phi: &[f64],
    s: &[f64],
    y: usize,
    noise: &[f64],
) -> Result<(f64, f64)> {
    let (_, ge) = m.elbo(phi, y, noise)?;
    let (_, gj) = m.joint_objective(phi, s, y, noise)?;
    let ge: Vec<Vec<f64>> = ge.slices().iter().map(|v| v.to_vec()).collect();
    let gj: Vec<Vec<f64>> = gj.slices().iter().map(|v| v.to_vec()).collect();
    let mut m = m.clone();
    let h = 1e-6;
    let (mut worst_e, mut worst_j): (f64, f64) = (0.0, 0.0);
    for si in 0..gj.len() {
        for j in 0..gj[si].len() {
            let orig = m.param_slices_mut()[si][j];
            m.param_slices_mut()[si][j] = orig + h;
            let (ep, jp) = (
                m.elbo(phi, y, noise)?.0,
                m.joint_objective(phi, s, y, noise)?.0,
            );
            m.param_slices_mut()[si][j] = orig - h;
            let (em, jm) = (
                m.elbo(phi, y, noise)?.0,
                m.joint_objective(phi, s, y, noise)?.0,
            );
            m.param_slices_mut()[si][j] = orig;
            worst_e = worst_e.max(relative_error((ep - em) / (2.0 * h), ge[si][j], 1e-4));
            worst_j = worst_j.max(relative_error((jp - jm) / (2.0 * h), gj[si][j], 1e-4));
        }
    }
    Ok((worst_e, worst_j))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, instances: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn random_logits(rng: &mut Prng, k: usize) -> Vec<f64> {
    let scale = rng.random_range(0.5..5.0);
    (0..k).map(|_| scale * normal(rng)).collect()
}

/// Five-point central difference of the NLL in `t`.
fn nll_temperature_fd(s: &[f64], y: usize, t: f64) -> f64 {
    let h = 1e-3 * t;
    let f = |t: f64| -log_softmax_scaled_at(s, t, y);
    (-f(t + 2.0 * h) + 8.0 * f(t + h) - 8.0 * f(t - h) + f(t - 2.0 * h)) / (12.0 * h)
}

/// Last-layer gradient instances (rel. error, 1000 draws, tol 1e-5).
pub fn check_last_layer(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dd = rng.random_range(1..=8);
        let k = rng.random_range(2..=10);
        let w = normal_vec(&mut rng, dd * k);
        let x = normal_vec(&mut rng, dd);
        let y = rng.random_range(0..k);
        worst = worst.max(verify_last_layer_grad(&w, &x, y)?);
    }
    Ok(CheckResult::new(
        "last_layer_gradient",
        instances,
        worst,
        1e-5,
    ))
}

/// Exact temperature gradient against finite differences (floor 1e-4).
pub fn check_temperature_gradient(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(2..=10);
        let s = random_logits(&mut rng, k);
        let y = rng.random_range(0..k);
        let t = rng.random_range(0.2..5.0);
        let a = nll_temperature_gradient(&s, y, t)?;
        worst = worst.max(relative_error(nll_temperature_fd(&s, y, t), a, 1e-4));
    }
    Ok(CheckResult::new(
        "temperature_gradient",
        instances,
        worst,
        1e-6,
    ))
}

/// Printed form against exact gradient times the normalizer, relative to
/// the magnitude of the summed terms.
pub fn check_unnormalized_relation(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(2..=10);
        let s = random_logits(&mut rng, k);
        let y = rng.random_range(0..k);
        let t = rng.random_range(0.2..5.0);
        let unnormalized = unnormalized_temperature_gradient(&s, y, t)?;
        let scaled = nll_temperature_gradient(&s, y, t)? * softmax_normalizer(&s, t);
        let magnitude: f64 = s.iter().map(|v| v.abs() * (v / t).exp()).sum::<f64>() / (t * t);
        worst = worst.max((unnormalized - scaled).abs() / magnitude.max(f64::MIN_POSITIVE));
    }
    Ok(CheckResult::new(
        "unnormalized_gradient_relation",
        instances,
        worst,
        1e-8,
    ))
}

/// Fraction of confident-correct draws (y = argmax s, s non-constant) with
/// a non-positive temperature gradient; must be zero.
pub fn check_gradient_sign(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = seeded(seed);
    let mut bad = 0usize;
    for _ in 0..instances {
        let k = rng.random_range(2..=10);
        let s = random_logits(&mut rng, k);
        let t = rng.random_range(0.2..5.0);
        if nll_temperature_gradient(&s, argmax(&s), t)? <= 0.0 {
            bad += 1;
        }
    }
    Ok(CheckResult::new(
        "temperature_gradient_sign",
        instances,
        bad as f64 / instances as f64,
        0.0,
    ))
}

/// Fraction of draws where tempering changes the predicted class.
pub fn check_argmax_invariance(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = seeded(seed);
    let mut bad = 0usize;
    for _ in 0..instances {
        let k = rng.random_range(2..=10);
        let s = random_logits(&mut rng, k);
        let t = rng.random_range(0.05..10.0);
        let mut p = vec![0.0; k];
        softmax_scaled_into(&s, t, &mut p);
        if argmax(&p) != argmax(&s) {
            bad += 1;
        }
    }
    Ok(CheckResult::new(
        "argmax_invariance",
        instances,
        bad as f64 / instances as f64,
        0.0,
    ))
}

/// ELBO and joint-objective gradients on random small configurations
/// (`d ≤ 8`, `d_z ≤ 4`, `k ≤ 5`), tol 1e-4 each.
pub fn check_model_gradient_configs(
    seed: u64,
    configs: usize,
) -> Result<(CheckResult, CheckResult)> {
    let results: Vec<(f64, f64)> = (0..configs)
        .into_par_iter()
        .map(|c| {
            let mut rng = seeded(seed.wrapping_add(c as u64));
            let d = rng.random_range(1..=8);
            let k = rng.random_range(2..=5);
            let dz = rng.random_range(1..=4);
            let m = random_model(d, k, dz, &mut rng)?;
            let phi = normal_vec(&mut rng, d);
            let s = random_logits(&mut rng, k);
            let y = rng.random_range(0..k);
            let noise = normal_vec(&mut rng, dz);
            check_model_gradients(&m, &phi, &s, y, &noise)
        })
        .collect::<Result<_>>()?;
    let worst_e = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let worst_j = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok((
        CheckResult::new("elbo_gradient", configs, worst_e, 1e-4),
        CheckResult::new("joint_objective_gradient", configs, worst_j, 1e-4),
    ))
}

/// Runs every numerical check with fixed instance counts.
pub fn selfcheck(seed: u64) -> Result<SelfCheckReport> {
    let start = Instant::now();
    let (elbo, joint) = check_model_gradient_configs(seed, 64)?;
    let checks = vec![
        check_last_layer(seed, 1000)?,
        check_temperature_gradient(seed.wrapping_add(1), 1000)?,
        check_unnormalized_relation(seed.wrapping_add(2), 1000)?,
        check_gradient_sign(seed.wrapping_add(3), 1000)?,
        check_argmax_invariance(seed.wrapping_add(4), 100_000)?,
        elbo,
        joint,
    ];
    Ok(SelfCheckReport {
        seed,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    #[test]
    fn constant_logits_have_zero_gradient() {
        assert_eq!(
            nll_temperature_gradient(&[1.5, 1.5, 1.5], 1, 0.7).unwrap(),
            0.0
        );
    }

    #[test]
    fn two_class_gradient_value() {
        let e2 = 2f64.exp();
        let expected = 2.0 * (1.0 - e2 / (e2 + 1.0));
        let g = nll_temperature_gradient(&[2.0, 0.0], 0, 1.0).unwrap();
        assert!((g - expected).abs() < 1e-15);
        assert!((g - 0.2384).abs() < 1e-4);
        assert!((nll_temperature_fd(&[2.0, 0.0], 0, 1.0) - expected).abs() < 1e-10);
    }

    #[test]
    fn temperature_gradient_rejects_bad_input() {
        assert!(nll_temperature_gradient(&[1.0, 0.0], 0, 0.0).is_err());
        assert!(nll_temperature_gradient(&[1.0, 0.0], 0, -1.0).is_err());
        assert!(nll_temperature_gradient(&[1.0, 0.0], 2, 1.0).is_err());
        assert!(unnormalized_temperature_gradient(&[1.0, 0.0], 0, 0.0).is_err());
    }

    #[test]
    fn unnormalized_form_matches_hand_value() {
        // s = (2, 0), y = 0, t = 1: (2·1 − 0) = 2 = exact · (e² + 1).
        let p = unnormalized_temperature_gradient(&[2.0, 0.0], 0, 1.0).unwrap();
        assert!((p - 2.0).abs() < 1e-15);
        let e = nll_temperature_gradient(&[2.0, 0.0], 0, 1.0).unwrap();
        assert!((e * (2f64.exp() + 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn last_layer_zero_input_gives_zero_gradient() {
        let w = [0.3, -1.0, 2.0, 0.5, 0.1, -0.4];
        let g = last_layer_gradient(&w, &[0.0, 0.0], 1).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn last_layer_large_margin_vanishes() {
        // x = (1), w = (100, 0, 0): softmax is one-hot on class 0.
        let g = last_layer_gradient(&[100.0, 0.0, 0.0], &[1.0], 0).unwrap();
        assert!(g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-8);
    }

    #[test]
    fn last_layer_rejects_mismatch() {
        assert!(last_layer_gradient(&[1.0, 2.0, 3.0], &[1.0, 2.0], 0).is_err());
        assert!(verify_last_layer_grad(&[1.0, 2.0], &[1.0], 2).is_err());
    }

    #[test]
    fn last_layer_matches_finite_differences() {
        let r = check_last_layer(7, 200).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn temperature_gradient_checks_pass() {
        for r in [
            check_temperature_gradient(1, 300).unwrap(),
            check_unnormalized_relation(2, 300).unwrap(),
            check_gradient_sign(3, 300).unwrap(),
            check_argmax_invariance(4, 1000).unwrap(),
        ] {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn model_gradients_match_on_random_configs() {
        let (e, j) = check_model_gradient_configs(11, 8).unwrap();
        assert!(e.passed && j.passed, "{e:?} {j:?}");
    }

    fn tiny_model(d: usize, k: usize) -> AdaTsModel {
        random_model(d, k, 2, &mut seeded(5)).unwrap()
    }

    fn tiny_data() -> CalibrationDataset {
        generate_synthetic(&SyntheticSpec::single_cluster(60, 1.0), 3).unwrap()
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let d = tiny_data();
        let m = tiny_model(d.d(), d.k());
        let tr = class_mean_interpolation(&m, &d, 0, 1, 11).unwrap();
        assert_eq!(tr.alphas.len(), 11);
        assert_eq!(tr.temperatures.len(), 11);
        assert_eq!(tr.alphas[0], 0.0);
        assert_eq!(tr.alphas[10], 1.0);
        let ti = m
            .predict_temperature(&class_mean_feature(&d, 0).unwrap())
            .unwrap();
        let tj = m
            .predict_temperature(&class_mean_feature(&d, 1).unwrap())
            .unwrap();
        assert_eq!(tr.temperatures[10], ti);
        assert_eq!(tr.temperatures[0], tj);
        assert!(tr.temperatures.iter().all(|&t| t > 0.0));
    }

    #[test]
    fn interpolation_same_class_is_constant() {
        let d = tiny_data();
        let m = tiny_model(d.d(), d.k());
        let tr = class_mean_interpolation(&m, &d, 2, 2, 5).unwrap();
        assert!(tr.temperatures.iter().all(|&t| t == tr.temperatures[0]));
    }

    #[test]
    fn interpolation_rejects_empty_class_and_short_grid() {
        let d = CalibrationDataset::new(1, 3, vec![0.0, 1.0], vec![0.0; 6], vec![0, 1]).unwrap();
        let m = tiny_model(1, 3);
        assert!(class_mean_interpolation(&m, &d, 0, 2, 5).is_err());
        assert!(class_mean_interpolation(&m, &d, 0, 1, 1).is_err());
    }

    #[test]
    fn single_sample_histogram() {
        let d = CalibrationDataset::new(1, 2, vec![0.5], vec![1.0, 0.0], vec![0]).unwrap();
        let m = tiny_model(1, 2);
        let t = m.predict_temperature(&[0.5]).unwrap();
        for p in [Partition::ByClass, Partition::ByCorrectness] {
            let h = temperature_histogram(&m, &d, p).unwrap();
            assert_eq!(h.groups.len(), 1);
            assert_eq!(h.groups[0].values, vec![t]);
            assert_eq!(h.groups[0].mean, t);
            assert_eq!(h.groups[0].std, 0.0);
        }
    }

    #[test]
    fn histogram_means_recompute_from_lists() {
        let d = tiny_data();
        let m = tiny_model(d.d(), d.k());
        for p in [Partition::ByClass, Partition::ByCorrectness] {
            let h = temperature_histogram(&m, &d, p).unwrap();
            let total: usize = h.groups.iter().map(|g| g.values.len()).sum();
            assert_eq!(total, d.n());
            for g in &h.groups {
                let mean = g.values.iter().sum::<f64>() / g.values.len() as f64;
                assert!((mean - g.mean).abs() < 1e-12);
                assert!(g.values.iter().all(|&v| v > 0.0));
            }
            let (_, _, counts) = h.counts(7);
            let binned: usize = counts.iter().flatten().sum();
            assert_eq!(binned, d.n());
        }
    }

    #[test]
    fn latent_export_shape_and_contributions() {
        let d = tiny_data();
        let m = tiny_model(d.d(), d.k());
        let mut buf = Vec::new();
        export_latents_to(&m, &d, 15, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), d.n() + 1);
        assert_eq!(lines[0], "index,label,correct,contribution,z_0,z_1");
        let (temps, _) = crate::adats::calibrate(&m, &d).unwrap();
        let contrib = metrics::contribution_histogram(&d, temps.as_slice(), 15).unwrap();
        for (i, line) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 4 + m.latent_dim());
            assert_eq!(cols[3].parse::<f64>().unwrap(), contrib.per_sample[i]);
        }
    }
}

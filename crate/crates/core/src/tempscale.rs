//! Single-temperature scaling: the tempered softmax and a grid-search fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CalibrationDataset;
use crate::error::{Error, Result};
use crate::metrics::{self, DEFAULT_BINS};
use crate::nn::ops::softmax_scaled_into;

/// `softmax(s / t)` with max subtraction.
pub fn softmax_with_temperature(s: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {t}"
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    let mut p = vec![0.0; s.len()];
    softmax_scaled_into(s, t, &mut p);
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitObjective {
    #[default]
    Ece,
    Nll,
}

/// Temperatures `lo, lo + step, …` up to `hi` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for TemperatureGrid {
    fn default() -> Self {
        Self {
            lo: 0.05,
            hi: 10.0,
            step: 0.005,
        }
    }
}

impl std::str::FromStr for TemperatureGrid {
    type Err = Error;

    /// Parses `lo:hi:step`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, step] = parts.as_slice() else {
            return Err(Error::invalid(format!(
                "grid must be lo:hi:step, got {s:?}"
            )));
        };
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad grid value {v:?}")))
        };
        let grid = Self {
            lo: num(lo)?,
            hi: num(hi)?,
            step: num(step)?,
        };
        grid.points()?;
        Ok(grid)
    }
}

impl TemperatureGrid {
    /// Grid points computed as `lo + i·step` (no accumulation drift).
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.lo > 0.0) || !(self.step > 0.0) || !(self.lo < self.hi) {
            return Err(Error::invalid(format!(
                "grid needs 0 < lo < hi and step > 0, got {}:{}:{}",
                self.lo, self.hi, self.step
            )));
        }
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        let pts: Vec<f64> = (0..count).map(|i| self.lo + i as f64 * self.step).collect();
        if pts.is_empty() {
            return Err(Error::invalid("empty temperature grid"));
        }
        Ok(pts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub objective: FitObjective,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
    pub bins: usize,
    pub achieved_objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaScaler {
    pub temperature: f64,
    pub fit: FitMetadata,
}

#[derive(Serialize, Deserialize)]
struct VanillaJson {
    kind: String,
    temperature: f64,
    fit: FitMetadata,
}

impl VanillaScaler {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VanillaJson {
            kind: "vanilla".into(),
            temperature: self.temperature,
            fit: self.fit.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: VanillaJson = serde_json::from_str(s)?;
        if v.kind != "vanilla" {
            return Err(Error::Format(format!(
                "expected kind \"vanilla\", found {:?}",
                v.kind
            )));
        }
        if !(v.temperature > 0.0) {
            return Err(Error::Format("vanilla temperature must be positive".into()));
        }
        Ok(Self {
            temperature: v.temperature,
            fit: v.fit,
        })
    }
}

pub fn objective_value(
    d: &CalibrationDataset,
    objective: FitObjective,
    t: f64,
    bins: usize,
) -> Result<f64> {
    match objective {
        FitObjective::Ece => metrics::ece(d, t, bins),
        FitObjective::Nll => metrics::nll(d, t),
    }
}

/// Exhaustive grid search for the objective-minimizing temperature; ties go
/// to the smaller temperature.
pub fn fit_vanilla(
    d: &CalibrationDataset,
    objective: FitObjective,
    grid: TemperatureGrid,
    bins: usize,
) -> Result<VanillaScaler> {
    if bins == 0 {
        return Err(Error::invalid("bin count must be at least 1"));
    }
    let pts = grid.points()?;
    let values: Vec<f64> = pts
        .par_iter()
        .map(|&t| objective_value(d, objective, t, bins))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    Ok(VanillaScaler {
        temperature: pts[best],
        fit: FitMetadata {
            objective,
            grid_lo: grid.lo,
            grid_hi: grid.hi,
            grid_step: grid.step,
            bins,
            achieved_objective: values[best],
        },
    })
}

pub fn fit_vanilla_default(d: &CalibrationDataset) -> Result<VanillaScaler> {
    fit_vanilla(
        d,
        FitObjective::Ece,
        TemperatureGrid::default(),
        DEFAULT_BINS,
    )
}

/// Row-wise tempered softmax at the scaler's temperature, `n × k` row-major.
pub fn apply_vanilla(scaler: &VanillaScaler, d: &CalibrationDataset) -> Result<Vec<f64>> {
    if !(scaler.temperature > 0.0) {
        return Err(Error::invalid("scaler temperature must be positive"));
    }
    let k = d.k();
    let mut out = vec![0.0; d.n() * k];
    for (i, row) in out.chunks_exact_mut(k).enumerate() {
        softmax_scaled_into(d.logits(i), scaler.temperature, row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parses_from_string() {
        let g: TemperatureGrid = "0.5:2:0.25".parse().unwrap();
        assert_eq!(
            g,
            TemperatureGrid {
                lo: 0.5,
                hi: 2.0,
                step: 0.25
            }
        );
        assert_eq!(g.points().unwrap().len(), 7);
        assert!("1:2".parse::<TemperatureGrid>().is_err());
        assert!("2:1:0.1".parse::<TemperatureGrid>().is_err());
        assert!("a:2:0.1".parse::<TemperatureGrid>().is_err());
    }
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::nn::ops::{argmax, entropy, softmax};
    use proptest::prelude::*;

    #[test]
    fn constant_logits_are_uniform() {
        for &t in &[0.1, 1.0, 25.0] {
            let p = softmax_with_temperature(&[4.2, 4.2, 4.2], t).unwrap();
            assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn unit_temperature_is_plain_softmax() {
        let s = [0.3, -1.0, 2.5];
        assert_eq!(softmax_with_temperature(&s, 1.0).unwrap(), softmax(&s));
    }

    #[test]
    fn flattening_at_t10() {
        let p = softmax_with_temperature(&[2.0, 0.0], 10.0).unwrap();
        let e = (0.2f64).exp();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.5498).abs() < 5e-5 && (p[1] - 0.4502).abs() < 5e-5);
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(softmax_with_temperature(&[1.0, 0.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0, 0.0], -2.0).is_err());
        assert!(softmax_with_temperature(&[f64::NAN, 0.0], 1.0).is_err());
    }

    #[test]
    fn extreme_logits_never_nan() {
        let p = softmax_with_temperature(&[1e300, -1e300, 0.0], 1e-3).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(argmax(&p), 0);
    }

    #[test]
    fn grid_points_and_validation() {
        let g = TemperatureGrid {
            lo: 0.5,
            hi: 1.0,
            step: 0.25,
        };
        assert_eq!(g.points().unwrap(), vec![0.5, 0.75, 1.0]);
        assert_eq!(TemperatureGrid::default().points().unwrap().len(), 1991);
        assert!(TemperatureGrid {
            lo: 0.0,
            hi: 1.0,
            step: 0.1
        }
        .points()
        .is_err());
        assert!(TemperatureGrid {
            lo: 1.0,
            hi: 1.0,
            step: 0.1
        }
        .points()
        .is_err());
        assert!(TemperatureGrid {
            lo: 0.1,
            hi: 1.0,
            step: 0.0
        }
        .points()
        .is_err());
    }

    #[test]
    fn grid_minimum_is_exhaustive() {
        let d = generate_synthetic(&SyntheticSpec::single_cluster(500, 1.7), 2).unwrap();
        let grid = TemperatureGrid {
            lo: 0.25,
            hi: 4.0,
            step: 0.25,
        };
        for objective in [FitObjective::Ece, FitObjective::Nll] {
            let s = fit_vanilla(&d, objective, grid, 15).unwrap();
            for t in grid.points().unwrap() {
                let v = objective_value(&d, objective, t, 15).unwrap();
                assert!(s.fit.achieved_objective <= v);
            }
            assert_eq!(
                s.fit.achieved_objective,
                objective_value(&d, objective, s.temperature, 15).unwrap()
            );
        }
    }

    #[test]
    fn ties_go_to_smaller_temperature() {
        // Every sample correct with saturated confidence: ECE is 0 across the grid.
        let d = CalibrationDataset::new(
            1,
            2,
            vec![0.0; 3],
            vec![900.0, 0.0, 0.0, 900.0, 900.0, 0.0],
            vec![0, 1, 0],
        )
        .unwrap();
        let s = fit_vanilla(
            &d,
            FitObjective::Ece,
            TemperatureGrid {
                lo: 0.5,
                hi: 2.0,
                step: 0.5,
            },
            15,
        )
        .unwrap();
        assert_eq!(s.temperature, 0.5);
    }

    #[test]
    fn ece_fit_never_worse_than_identity() {
        let d = generate_synthetic(&SyntheticSpec::two_cluster(2000, 1.0, 3.0), 4).unwrap();
        let s = fit_vanilla_default(&d).unwrap();
        assert!(s.fit.achieved_objective <= metrics::ece(&d, 1.0, 15).unwrap());
    }

    #[test]
    fn apply_preserves_labels_and_identity() {
        let d = generate_synthetic(&SyntheticSpec::single_cluster(200, 2.0), 8).unwrap();
        let s = fit_vanilla_default(&d).unwrap();
        let p = apply_vanilla(&s, &d).unwrap();
        for i in 0..d.n() {
            assert_eq!(argmax(&p[i * 3..i * 3 + 3]), argmax(d.logits(i)));
        }
        let mut unit = s.clone();
        unit.temperature = 1.0;
        let p = apply_vanilla(&unit, &d).unwrap();
        for i in 0..d.n() {
            assert_eq!(&p[i * 3..i * 3 + 3], softmax(d.logits(i)).as_slice());
        }
    }

    #[test]
    fn scaler_json_round_trip() {
        let d = generate_synthetic(&SyntheticSpec::single_cluster(100, 2.0), 1).unwrap();
        let s = fit_vanilla(
            &d,
            FitObjective::Nll,
            TemperatureGrid {
                lo: 0.5,
                hi: 3.0,
                step: 0.1,
            },
            10,
        )
        .unwrap();
        let json = s.to_json().unwrap();
        assert!(json.contains("\"kind\": \"vanilla\""));
        assert_eq!(VanillaScaler::from_json(&json).unwrap(), s);
        assert!(VanillaScaler::from_json(&json.replace("vanilla", "adats")).is_err());
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-8.0f64..8.0, 2..8)
    }

    proptest! {
        #[test]
        fn max_prob_strictly_decreasing(s in logits_strategy()) {
            let top = argmax(&s);
            let strict = s.iter().enumerate().all(|(i, &v)| i == top || v < s[top] - 1e-3);
            prop_assume!(strict);
            let mut prev = f64::INFINITY;
            for i in 5..45 {
                let t = 0.1 * i as f64;
                let p = softmax_with_temperature(&s, t).unwrap();
                let m = p[top];
                prop_assert!(m < prev);
                prev = m;
            }
        }

        #[test]
        fn entropy_non_decreasing(s in logits_strategy()) {
            let constant = s.iter().all(|&v| v == s[0]);
            let mut prev = -1.0;
            for i in 1..40 {
                let t = 0.1 * i as f64;
                let h = entropy(&softmax_with_temperature(&s, t).unwrap());
                if constant {
                    prop_assert!(h >= prev - 1e-12);
                } else {
                    prop_assert!(h > prev);
                }
                prev = h;
            }
        }

        #[test]
        fn scale_equivariance(s in logits_strategy(), a in 0.1f64..10.0, t in 0.1f64..5.0) {
            let scaled: Vec<f64> = s.iter().map(|v| a * v).collect();
            let p = softmax_with_temperature(&s, t).unwrap();
            let q = softmax_with_temperature(&scaled, a * t).unwrap();
            for (x, y) in p.iter().zip(&q) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn sums_to_one_and_keeps_argmax(s in logits_strategy(), t in 0.01f64..50.0) {
            let p = softmax_with_temperature(&s, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(argmax(&p), argmax(&s));
        }
    }
}

//! Calibration datasets: (feature, logit, label) triples, the CALD binary
//! container, seeded splitting and synthetic generators with known
//! per-cluster optimal temperatures.
//!
//! CALD layout (little-endian, no padding):
//!
//! | offset | size    | field                      |
//! |--------|---------|----------------------------|
//! | 0      | 4       | magic `"CALD"`             |
//! | 4      | 2       | version (`u16`, = 1)       |
//! | 6      | 2       | reserved (`u16`, = 0)      |
//! | 8      | 8       | `n` (`u64`)                |
//! | 16     | 4       | `d` (`u32`)                |
//! | 20     | 4       | `k` (`u32`)                |
//! | 24     | 4·n·d   | features, `f32`, row-major |
//! |        | 4·n·k   | logits, `f32`, row-major   |
//! |        | 4·n     | labels, `u32`              |

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::log_sum_exp;
use crate::nn::rng::{normal, seeded};

pub const CALD_MAGIC: &[u8; 4] = b"CALD";
pub const CALD_VERSION: u16 = 1;
pub const CALD_HEADER_LEN: usize = 24;

/// N samples of (features Φ(x), logits s, label y).
///
/// Values are held as `f64` but are always representable in `f32`: the
/// constructor rounds through `f32`, so writing to CALD and reading back is
/// bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationDataset {
    n: usize,
    d: usize,
    k: usize,
    features: Vec<f64>,
    logits: Vec<f64>,
    labels: Vec<u32>,
}

impl CalibrationDataset {
    pub fn new(
        d: usize,
        k: usize,
        features: Vec<f64>,
        logits: Vec<f64>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if d == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if k < 2 {
            return Err(Error::invalid("class count must be at least 2"));
        }
        if features.len() != n * d {
            return Err(Error::invalid(format!(
                "features hold {} values, expected n·d = {}",
                features.len(),
                n * d
            )));
        }
        if logits.len() != n * k {
            return Err(Error::invalid(format!(
                "logits hold {} values, expected n·k = {}",
                logits.len(),
                n * k
            )));
        }
        let round = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect::<Vec<_>>();
        let ds = Self {
            n,
            d,
            k,
            features: round(features),
            logits: round(logits),
            labels,
        };
        ds.validate_samples()?;
        Ok(ds)
    }

    fn validate_samples(&self) -> Result<()> {
        for i in 0..self.n {
            if self.labels[i] as usize >= self.k {
                return Err(Error::SampleValidation {
                    index: i,
                    reason: format!(
                        "label {} is not below class count {}",
                        self.labels[i], self.k
                    ),
                });
            }
            if self.features(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::SampleValidation {
                    index: i,
                    reason: "non-finite feature value".into(),
                });
            }
            if self.logits(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::SampleValidation {
                    index: i,
                    reason: "non-finite logit value".into(),
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn logits(&self, i: usize) -> &[f64] {
        &self.logits[i * self.k..(i + 1) * self.k]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn feature_matrix(&self) -> &[f64] {
        &self.features
    }

    pub fn logit_matrix(&self) -> &[f64] {
        &self.logits
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        let mut logits = Vec::with_capacity(indices.len() * self.k);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(Error::invalid(format!(
                    "row {i} out of range for n = {}",
                    self.n
                )));
            }
            features.extend_from_slice(self.features(i));
            logits.extend_from_slice(self.logits(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.d, self.k, features, logits, labels)
    }

    pub fn encoded_len(&self) -> usize {
        CALD_HEADER_LEN + 4 * (self.n * self.d + self.n * self.k + self.n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(CALD_MAGIC);
        out.extend_from_slice(&CALD_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        for v in self.features.iter().chain(&self.logits) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CALD_HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != CALD_MAGIC {
                return Err(Error::Format("missing CALD magic".into()));
            }
            return Err(Error::Length {
                expected: CALD_HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..4] != CALD_MAGIC {
            return Err(Error::Format("missing CALD magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CALD_VERSION {
            return Err(Error::Format(format!("unsupported CALD version {version}")));
        }
        let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
        if reserved != 0 {
            return Err(Error::Format(format!(
                "reserved field is {reserved}, expected 0"
            )));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as u64;
        let k = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as u64;
        let expected = n
            .checked_mul(d + k + 1)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(CALD_HEADER_LEN as u64))
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        let found = bytes.len() as u64;
        if found < expected {
            return Err(Error::Length { expected, found });
        }
        if found > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                found - expected
            )));
        }
        let (n, d, k) = (n as usize, d as usize, k as usize);
        let mut words = bytes[CALD_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]]);
        let features: Vec<f64> = words
            .by_ref()
            .take(n * d)
            .map(|w| f32::from_le_bytes(w) as f64)
            .collect();
        let logits: Vec<f64> = words
            .by_ref()
            .take(n * k)
            .map(|w| f32::from_le_bytes(w) as f64)
            .collect();
        let labels: Vec<u32> = words.map(u32::from_le_bytes).collect();
        Self::new(d, k, features, logits, labels)
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<CalibrationDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CalibrationDataset::from_bytes(&bytes)
}

pub fn write_dataset(d: &CalibrationDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, d.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Disjoint train / holdout row indices, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_indices: Vec<usize>,
    pub holdout_indices: Vec<usize>,
}

/// Uniform shuffle (ChaCha8, Fisher-Yates) then cut; the holdout size is
/// `round(fraction · n)` clamped to `[1, n - 1]`.
pub fn split_dataset(
    d: &CalibrationDataset,
    holdout_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    split_indices(d.n(), holdout_fraction, seed)
}

pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if n < 2 {
        return Err(Error::invalid("splitting needs at least two samples"));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let holdout = ((holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let mut holdout_indices = idx[..holdout].to_vec();
    let mut train_indices = idx[holdout..].to_vec();
    holdout_indices.sort_unstable();
    train_indices.sort_unstable();
    Ok(DatasetSplit {
        train_indices,
        holdout_indices,
    })
}

/// One Gaussian feature cluster. Within the cluster, class `y` has mean
/// `center + separation · e_y` (first `k` coordinates) and per-dimension
/// standard deviation `std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub weight: f64,
    /// Logits are this multiple of the true class log-posterior, so the
    /// cluster is recalibrated exactly by a temperature equal to it.
    pub inflation: f64,
    pub center: Vec<f64>,
    pub separation: f64,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub clusters: Vec<ClusterSpec>,
}

impl SyntheticSpec {
    /// One cluster, `k = 3`, `d = 6`, moderately separated classes.
    pub fn single_cluster(n: usize, inflation: f64) -> Self {
        Self {
            n,
            classes: 3,
            dim: 6,
            clusters: vec![ClusterSpec {
                weight: 1.0,
                inflation,
                center: vec![0.0; 6],
                separation: 1.5,
                std: vec![1.0; 6],
            }],
        }
    }

    /// Two clusters with inflations `c1` and `c2` in 32 dimensions. The
    /// minority second cluster (30% of samples) sits 12 units away from the
    /// first on two non-class axes, is more diffuse and has much less
    /// separated classes, so most errors fall in it. The remaining axes
    /// carry isotropic noise.
    pub fn two_cluster(n: usize, c1: f64, c2: f64) -> Self {
        let dim = 32;
        let classes = 4;
        let scale = 3.0;
        let mut center2 = vec![0.0; dim];
        center2[classes] = 4.0 * scale;
        center2[classes + 1] = 4.0 * scale;
        Self {
            n,
            classes,
            dim,
            clusters: vec![
                ClusterSpec {
                    weight: 0.7,
                    inflation: c1,
                    center: vec![0.0; dim],
                    separation: 3.0 * scale,
                    std: vec![scale; dim],
                },
                ClusterSpec {
                    weight: 0.3,
                    inflation: c2,
                    center: center2,
                    separation: scale,
                    std: vec![1.5 * scale; dim],
                },
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("synthetic spec needs at least 2 classes"));
        }
        if self.dim < self.classes {
            return Err(Error::invalid("synthetic spec needs dim >= classes"));
        }
        if self.n == 0 {
            return Err(Error::invalid("synthetic spec needs n >= 1"));
        }
        if self.clusters.is_empty() {
            return Err(Error::invalid("synthetic spec needs at least one cluster"));
        }
        for (j, c) in self.clusters.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::invalid(format!(
                    "cluster {j}: weight must be positive"
                )));
            }
            if !(c.inflation >= 0.0) || !c.inflation.is_finite() {
                return Err(Error::invalid(format!(
                    "cluster {j}: inflation must be >= 0"
                )));
            }
            if c.center.len() != self.dim || c.std.len() != self.dim {
                return Err(Error::invalid(format!(
                    "cluster {j}: center/std length must equal dim"
                )));
            }
            if c.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid(format!("cluster {j}: std must be positive")));
            }
            if !c.separation.is_finite() || c.center.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("cluster {j}: non-finite geometry")));
            }
        }
        Ok(())
    }

    /// Exact `log p(y | x, cluster)` for every class.
    pub fn log_posterior(&self, cluster: usize, x: &[f64]) -> Vec<f64> {
        let c = &self.clusters[cluster];
        let loglik: Vec<f64> = (0..self.classes)
            .map(|y| {
                (0..self.dim)
                    .map(|i| {
                        let mean = c.center[i] + if i == y { c.separation } else { 0.0 };
                        let u = (x[i] - mean) / c.std[i];
                        -0.5 * u * u
                    })
                    .sum()
            })
            .collect();
        let lse = log_sum_exp(&loglik);
        loglik.into_iter().map(|v| v - lse).collect()
    }
}

/// A synthetic dataset together with each sample's generating cluster.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub data: CalibrationDataset,
    pub clusters: Vec<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<CalibrationDataset> {
    generate_synthetic_with_clusters(spec, seed).map(|s| s.data)
}

/// Draws cluster, then a uniform class, then features from that class's
/// Gaussian. Logits are `inflation · log p(y | x, cluster)`.
pub fn generate_synthetic_with_clusters(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<SyntheticDataset> {
    use rand::Rng;
    spec.validate()?;
    let mut rng = seeded(seed);
    let total: f64 = spec.clusters.iter().map(|c| c.weight).sum();
    let mut features = Vec::with_capacity(spec.n * spec.dim);
    let mut logits = Vec::with_capacity(spec.n * spec.classes);
    let mut labels = Vec::with_capacity(spec.n);
    let mut clusters = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let mut u = rng.random::<f64>() * total;
        let mut j = spec.clusters.len() - 1;
        for (ci, c) in spec.clusters.iter().enumerate() {
            if u < c.weight {
                j = ci;
                break;
            }
            u -= c.weight;
        }
        let c = &spec.clusters[j];
        let y = rng.random_range(0..spec.classes);
        let x: Vec<f64> = (0..spec.dim)
            .map(|i| {
                let mean = c.center[i] + if i == y { c.separation } else { 0.0 };
                mean + c.std[i] * normal(&mut rng)
            })
            .collect();
        let x32: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
        let lp = spec.log_posterior(j, &x32);
        logits.extend(lp.iter().map(|v| c.inflation * v));
        features.extend(x32);
        labels.push(y as u32);
        clusters.push(j);
    }
    Ok(SyntheticDataset {
        data: CalibrationDataset::new(spec.dim, spec.classes, features, logits, labels)?,
        clusters,
    })
}

//! Sample-adaptive temperature scaling.
//!
//! A VAE with one learnable Gaussian prior per class is fitted to the frozen
//! classifier's feature vectors. For a latent code `z`, the vector of its
//! log-densities under every class prior (the pseudo-likelihood vector) is
//! fed to a small MLP whose softplus output, plus a positive floor, is the
//! sample's temperature. Training maximizes
//!
//! ```text
//! ELBO(Φ(x)) + log Cat(y | softmax(s / T(q̃(z))))
//! ```
//!
//! with one reparameterized `z` per sample and a single Adam update of all
//! parameters on the summed gradient. The logits `s` are constants.
//! At inference `z` is the posterior mean, so temperatures are deterministic.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CalibrationDataset;
use crate::error::{check_dim, Error, Result};
use crate::metrics::{self, DEFAULT_BINS};
use crate::nn::dist::{
    kl_grad_acc, kl_unchecked, logpdf_grad_acc, logpdf_unchecked, reparameterize_unchecked,
    KlGradBuffers,
};
use crate::nn::ops::{log_softmax_scaled_at, sigmoid, softmax_scaled_into, softplus};
use crate::nn::rng::{normal, seeded, Prng};
use crate::nn::{AdamState, DiagonalGaussian, Mlp, MlpGrad, OutputActivation};

pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_TEMP_FLOOR: f64 = 0.05;

/// Hidden layer widths of the three networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub temp_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![128],
            decoder_hidden: vec![128],
            temp_hidden: vec![64, 64],
        }
    }
}

/// Which parameters the temperature term's gradient reaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientRouting {
    /// Through the temperature MLP, the class priors and the encoder.
    #[default]
    Joint,
    /// Temperature MLP only; the pseudo-likelihood vector is a constant.
    TemperatureOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub elbo_weight: f64,
    pub ce_weight: f64,
    pub temp_floor: f64,
    pub architecture: Architecture,
    pub routing: GradientRouting,
    /// Zero encoder, identical priors and no VAE updates. The latent code is
    /// then the same for every input, so only a constant temperature can be
    /// learned.
    pub frozen_vae: bool,
    pub bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.001,
            batch_size: 256,
            seed: 0,
            latent_dim: 16,
            elbo_weight: 1.0,
            ce_weight: 1.0,
            temp_floor: DEFAULT_TEMP_FLOOR,
            architecture: Architecture::default(),
            routing: GradientRouting::Joint,
            frozen_vae: false,
            bins: DEFAULT_BINS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if !(self.temp_floor > 0.0) || !self.temp_floor.is_finite() {
            return Err(Error::invalid("temperature floor must be positive"));
        }
        if self.bins == 0 {
            return Err(Error::invalid("bin count must be at least 1"));
        }
        if !self.elbo_weight.is_finite() || !self.ce_weight.is_finite() {
            return Err(Error::invalid("objective weights must be finite"));
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub routing: GradientRouting,
    pub frozen_vae: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaTsModel {
    d: usize,
    k: usize,
    latent_dim: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub priors: Vec<DiagonalGaussian>,
    pub temp_mlp: Mlp,
    pub temp_floor: f64,
    pub metadata: ModelMetadata,
}

/// Gradients for every parameter group of an [`AdaTsModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
    pub prior_mean: Vec<Vec<f64>>,
    pub prior_log_std: Vec<Vec<f64>>,
    pub temp_mlp: MlpGrad,
}

impl ModelGrad {
    pub fn zeros_like(m: &AdaTsModel) -> Self {
        Self {
            encoder: MlpGrad::zeros_like(&m.encoder),
            decoder: MlpGrad::zeros_like(&m.decoder),
            prior_mean: vec![vec![0.0; m.latent_dim]; m.k],
            prior_log_std: vec![vec![0.0; m.latent_dim]; m.k],
            temp_mlp: MlpGrad::zeros_like(&m.temp_mlp),
        }
    }

    pub fn add_assign(&mut self, o: &ModelGrad) {
        self.encoder.add_assign(&o.encoder);
        self.decoder.add_assign(&o.decoder);
        for (a, b) in self
            .prior_mean
            .iter_mut()
            .chain(self.prior_log_std.iter_mut())
            .zip(o.prior_mean.iter().chain(&o.prior_log_std))
        {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.temp_mlp.add_assign(&o.temp_mlp);
    }

    pub fn scale(&mut self, f: f64) {
        self.encoder.scale(f);
        self.decoder.scale(f);
        for v in self
            .prior_mean
            .iter_mut()
            .chain(self.prior_log_std.iter_mut())
        {
            v.iter_mut().for_each(|x| *x *= f);
        }
        self.temp_mlp.scale(f);
    }

    /// Flat view in the order of [`AdaTsModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.slices();
        out.extend(self.decoder.slices());
        out.extend(self.prior_mean.iter().map(|v| v.as_slice()));
        out.extend(self.prior_log_std.iter().map(|v| v.as_slice()));
        out.extend(self.temp_mlp.slices());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Per-sample terms of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleTerms {
    pub elbo: f64,
    /// `log softmax(s / T)_y`.
    pub log_cat: f64,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug)]
struct GradOptions {
    elbo_weight: f64,
    ce_weight: f64,
    routing: GradientRouting,
    vae_trainable: bool,
}

impl AdaTsModel {
    /// Fresh model for `d`-dimensional features and `k` classes.
    pub fn init(d: usize, k: usize, cfg: &TrainConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        if d == 0 || k < 2 {
            return Err(Error::invalid("model needs d >= 1 and k >= 2"));
        }
        let dz = cfg.latent_dim;
        let arch = &cfg.architecture;
        let dims = |input: usize, hidden: &[usize], output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(output);
            v
        };
        let enc_dims = dims(d, &arch.encoder_hidden, 2 * dz);
        let dec_dims = dims(dz, &arch.decoder_hidden, d);
        let tmp_dims = dims(k, &arch.temp_hidden, 1);
        let (encoder, priors) = if cfg.frozen_vae {
            (
                Mlp::zeros(&enc_dims, OutputActivation::Identity)?,
                vec![DiagonalGaussian::standard(dz); k],
            )
        } else {
            let enc = Mlp::init_he(&enc_dims, OutputActivation::Identity, 0.1, rng)?;
            let priors = (0..k)
                .map(|_| DiagonalGaussian {
                    mean: (0..dz).map(|_| 0.1 * normal(rng)).collect(),
                    log_std: vec![0.0; dz],
                })
                .collect();
            (enc, priors)
        };
        let decoder = Mlp::init_he(&dec_dims, OutputActivation::Identity, 1.0, rng)?;
        let mut temp_mlp = Mlp::init_he(&tmp_dims, OutputActivation::Identity, 0.1, rng)?;
        // Start near T = 1, the uncalibrated softmax.
        let start = 1.0 - cfg.temp_floor;
        if start > 0.0 {
            let last = temp_mlp
                .layers_mut()
                .last_mut()
                .expect("at least one layer");
            last.bias[0] = start.exp_m1().ln();
        }
        Ok(Self {
            d,
            k,
            latent_dim: dz,
            encoder,
            decoder,
            priors,
            temp_mlp,
            temp_floor: cfg.temp_floor,
            metadata: ModelMetadata {
                seed: cfg.seed,
                config_hash: cfg.fingerprint(),
                routing: cfg.routing,
                frozen_vae: cfg.frozen_vae,
            },
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.temp_mlp.validate()?;
        check_dim(self.d, self.encoder.input_dim())?;
        check_dim(2 * self.latent_dim, self.encoder.output_dim())?;
        check_dim(self.latent_dim, self.decoder.input_dim())?;
        check_dim(self.d, self.decoder.output_dim())?;
        check_dim(self.k, self.temp_mlp.input_dim())?;
        check_dim(1, self.temp_mlp.output_dim())?;
        check_dim(self.k, self.priors.len())?;
        for p in &self.priors {
            check_dim(self.latent_dim, p.dim())?;
            if p.mean.iter().chain(&p.log_std).any(|v| !v.is_finite()) {
                return Err(Error::invalid("prior parameters must be finite"));
            }
        }
        if !(self.temp_floor > 0.0) {
            return Err(Error::invalid("temperature floor must be positive"));
        }
        Ok(())
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.param_slices_mut();
        out.extend(self.decoder.param_slices_mut());
        let (means, stds): (Vec<_>, Vec<_>) = self
            .priors
            .iter_mut()
            .map(|p| (p.mean.as_mut_slice(), p.log_std.as_mut_slice()))
            .unzip();
        out.extend(means);
        out.extend(stds);
        out.extend(self.temp_mlp.param_slices_mut());
        out
    }

    pub fn param_sizes(&mut self) -> Vec<usize> {
        self.param_slices_mut().iter().map(|s| s.len()).collect()
    }

    fn split_posterior(&self, out: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: out[..self.latent_dim].to_vec(),
            log_std: out[self.latent_dim..].to_vec(),
        }
    }

    /// Encoder posterior `q(z | Φ(x))`.
    pub fn encode(&self, phi: &[f64]) -> Result<DiagonalGaussian> {
        check_dim(self.d, phi.len())?;
        Ok(self.split_posterior(&self.encoder.forward_unchecked(phi)))
    }

    /// Log-density of `z` under every class prior; no normalization across classes.
    pub fn pseudo_likelihood_vector(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.latent_dim, z.len())?;
        Ok(self.pseudo_likelihood_unchecked(z))
    }

    fn pseudo_likelihood_unchecked(&self, z: &[f64]) -> Vec<f64> {
        self.priors.iter().map(|p| logpdf_unchecked(p, z)).collect()
    }

    /// `softplus(g(q̃)) + floor`.
    pub fn temperature_from_pseudo_likelihood(&self, q: &[f64]) -> Result<f64> {
        check_dim(self.k, q.len())?;
        Ok(softplus(self.temp_mlp.forward_unchecked(q)[0]) + self.temp_floor)
    }

    /// Inference-time temperature, using the posterior mean as the latent code.
    pub fn predict_temperature(&self, phi: &[f64]) -> Result<f64> {
        let post = self.encode(phi)?;
        let q = self.pseudo_likelihood_unchecked(&post.mean);
        self.temperature_from_pseudo_likelihood(&q)
    }

    /// Per-sample terms and, if `grad` is given, the accumulated gradient of
    /// `elbo_weight·ELBO + ce_weight·log_cat`. With `noise = None` the
    /// posterior mean is used as `z`.
    fn eval_sample(
        &self,
        phi: &[f64],
        logits: Option<&[f64]>,
        y: usize,
        noise: Option<&[f64]>,
        opts: GradOptions,
        grad: Option<&mut ModelGrad>,
    ) -> SampleTerms {
        let dz = self.latent_dim;
        let enc = self.encoder.forward_trace_unchecked(phi);
        let post = self.split_posterior(enc.output());
        let z = match noise {
            Some(e) => reparameterize_unchecked(&post, e),
            None => post.mean.clone(),
        };
        let dec = self.decoder.forward_trace_unchecked(&z);
        let recon_l1: f64 = dec
            .output()
            .iter()
            .zip(phi)
            .map(|(r, x)| (x - r).abs())
            .sum();
        let recon = -recon_l1 - self.d as f64 * std::f64::consts::LN_2;
        let kl = kl_unchecked(&post, &self.priors[y]);
        let elbo = recon - kl;

        let (log_cat, temperature, tmp_trace, raw) = match logits {
            Some(s) => {
                let q = self.pseudo_likelihood_unchecked(&z);
                let tr = self.temp_mlp.forward_trace_unchecked(&q);
                let raw = tr.output()[0];
                let t = softplus(raw) + self.temp_floor;
                (log_softmax_scaled_at(s, t, y), t, Some(tr), raw)
            }
            None => (0.0, f64::NAN, None, 0.0),
        };
        let terms = SampleTerms {
            elbo,
            log_cat,
            temperature,
        };
        let Some(grad) = grad else {
            return terms;
        };

        let mut d_mean = vec![0.0; dz];
        let mut d_log_std = vec![0.0; dz];
        let mut dz_total = vec![0.0; dz];

        if let (Some(s), Some(tr)) = (logits, tmp_trace.as_ref()) {
            if opts.ce_weight != 0.0 {
                // d/dT log softmax(s/T)_y = (Σ p_i s_i − s_y) / T²
                let mut p = vec![0.0; s.len()];
                softmax_scaled_into(s, temperature, &mut p);
                let mean_s: f64 = p.iter().zip(s).map(|(a, b)| a * b).sum();
                let d_t = (mean_s - s[y]) / (temperature * temperature);
                let d_raw = opts.ce_weight * d_t * sigmoid(raw);
                let d_q = self
                    .temp_mlp
                    .backward_trace(tr, &[d_raw], &mut grad.temp_mlp);
                if opts.routing == GradientRouting::Joint && opts.vae_trainable {
                    for (j, prior) in self.priors.iter().enumerate() {
                        logpdf_grad_acc(
                            prior,
                            &z,
                            d_q[j],
                            &mut dz_total,
                            &mut grad.prior_mean[j],
                            &mut grad.prior_log_std[j],
                        );
                    }
                }
            }
        }

        if opts.vae_trainable && opts.elbo_weight != 0.0 {
            let w = opts.elbo_weight;
            let up: Vec<f64> = dec
                .output()
                .iter()
                .zip(phi)
                .map(|(r, x)| w * (x - r).signum() * f64::from(x != r))
                .collect();
            let d_from_dec = self.decoder.backward_trace(&dec, &up, &mut grad.decoder);
            dz_total
                .iter_mut()
                .zip(&d_from_dec)
                .for_each(|(a, b)| *a += b);
            let (pm, ps) = (&mut grad.prior_mean, &mut grad.prior_log_std);
            kl_grad_acc(
                &post,
                &self.priors[y],
                -w,
                KlGradBuffers {
                    q_mean: &mut d_mean,
                    q_log_std: &mut d_log_std,
                    p_mean: &mut pm[y],
                    p_log_std: &mut ps[y],
                },
            );
        }

        if opts.vae_trainable {
            for i in 0..dz {
                d_mean[i] += dz_total[i];
                if let Some(e) = noise {
                    d_log_std[i] += dz_total[i] * post.log_std[i].exp() * e[i];
                }
            }
            let mut up = d_mean;
            up.extend_from_slice(&d_log_std);
            self.encoder.backward_trace(&enc, &up, &mut grad.encoder);
        }
        terms
    }

    fn check_sample(&self, phi: &[f64], y: usize, noise: &[f64]) -> Result<()> {
        check_dim(self.d, phi.len())?;
        check_dim(self.latent_dim, noise.len())?;
        if y >= self.k {
            return Err(Error::invalid(format!("label {y} is not below {}", self.k)));
        }
        Ok(())
    }

    /// Single-sample ELBO with Laplace(scale 1) reconstruction and analytic
    /// KL to the label's prior, plus its gradient (temperature MLP untouched).
    pub fn elbo(&self, phi: &[f64], y: usize, noise: &[f64]) -> Result<(f64, ModelGrad)> {
        self.check_sample(phi, y, noise)?;
        let mut g = ModelGrad::zeros_like(self);
        let opts = GradOptions {
            elbo_weight: 1.0,
            ce_weight: 0.0,
            routing: GradientRouting::Joint,
            vae_trainable: true,
        };
        let t = self.eval_sample(phi, None, y, Some(noise), opts, Some(&mut g));
        Ok((t.elbo, g))
    }

    /// `ELBO + log softmax(s / T)_y` with `T` computed from the sampled `z`,
    /// and its gradient under the given routing.
    pub fn joint_objective_routed(
        &self,
        phi: &[f64],
        s: &[f64],
        y: usize,
        noise: &[f64],
        routing: GradientRouting,
    ) -> Result<(f64, SampleTerms, ModelGrad)> {
        self.check_sample(phi, y, noise)?;
        check_dim(self.k, s.len())?;
        let mut g = ModelGrad::zeros_like(self);
        let opts = GradOptions {
            elbo_weight: 1.0,
            ce_weight: 1.0,
            routing,
            vae_trainable: true,
        };
        let t = self.eval_sample(phi, Some(s), y, Some(noise), opts, Some(&mut g));
        Ok((t.elbo + t.log_cat, t, g))
    }

    pub fn joint_objective(
        &self,
        phi: &[f64],
        s: &[f64],
        y: usize,
        noise: &[f64],
    ) -> Result<(f64, ModelGrad)> {
        self.joint_objective_routed(phi, s, y, noise, GradientRouting::Joint)
            .map(|(v, _, g)| (v, g))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(s)?;
        match raw.get("kind").and_then(|v| v.as_str()) {
            Some("adats") => {}
            other => {
                return Err(Error::Format(format!(
                    "expected kind \"adats\", found {other:?}"
                )));
            }
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                expected: MODEL_VERSION,
                found: version,
            });
        }
        let json: ModelJson = serde_json::from_value(raw)?;
        let m = AdaTsModel {
            d: json.dims.d,
            k: json.dims.k,
            latent_dim: json.dims.d_z,
            encoder: json.encoder,
            decoder: json.decoder,
            priors: json.priors,
            temp_mlp: json.temp_mlp,
            temp_floor: json.temp_floor,
            metadata: json.metadata,
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct Dims {
    d: usize,
    k: usize,
    d_z: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    kind: String,
    version: u32,
    dims: Dims,
    encoder: Mlp,
    decoder: Mlp,
    priors: Vec<DiagonalGaussian>,
    temp_mlp: Mlp,
    temp_floor: f64,
    metadata: ModelMetadata,
}

impl From<&AdaTsModel> for ModelJson {
    fn from(m: &AdaTsModel) -> Self {
        Self {
            kind: "adats".into(),
            version: MODEL_VERSION,
            dims: Dims {
                d: m.d,
                k: m.k,
                d_z: m.latent_dim,
            },
            encoder: m.encoder.clone(),
            decoder: m.decoder.clone(),
            priors: m.priors.clone(),
            temp_mlp: m.temp_mlp.clone(),
            temp_floor: m.temp_floor,
            metadata: m.metadata.clone(),
        }
    }
}

pub fn save_model(m: &AdaTsModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AdaTsModel> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AdaTsModel::from_json(&s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_elbo: f64,
    pub mean_log_cat: f64,
    pub mean_temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
    /// `"holdout"` when a validation set was supplied, else `"train"`.
    pub validation_source: String,
    pub validation_ece_before: f64,
    pub validation_ece_after: f64,
}

const GRAD_CHUNK: usize = 16;

pub fn train(d: &CalibrationDataset, cfg: &TrainConfig) -> Result<(AdaTsModel, TrainReport)> {
    train_with_validation(d, None, cfg)
}

/// Mini-batch Adam on the joint objective. Per-sample gradients are summed
/// in fixed-size chunks and the chunks reduced in order, so results are
/// bit-identical regardless of thread count.
pub fn train_with_validation(
    d: &CalibrationDataset,
    validation: Option<&CalibrationDataset>,
    cfg: &TrainConfig,
) -> Result<(AdaTsModel, TrainReport)> {
    cfg.validate()?;
    if let Some(v) = validation {
        check_dim(d.d(), v.d())?;
        check_dim(d.k(), v.k())?;
    }
    let mut rng = seeded(cfg.seed);
    let mut model = AdaTsModel::init(d.d(), d.k(), cfg, &mut rng)?;
    let mut adam = AdamState::new(cfg.lr, &model.param_sizes());
    let opts = GradOptions {
        elbo_weight: cfg.elbo_weight,
        ce_weight: cfg.ce_weight,
        routing: cfg.routing,
        vae_trainable: !cfg.frozen_vae,
    };
    let dz = cfg.latent_dim;
    let mut order: Vec<usize> = (0..d.n()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_elbo, mut sum_cat, mut sum_t) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let noise: Vec<f64> = if cfg.frozen_vae {
                Vec::new()
            } else {
                (0..batch.len() * dz).map(|_| normal(&mut rng)).collect()
            };
            let m = &model;
            let partials: Vec<(ModelGrad, f64, f64, f64)> = batch
                .par_chunks(GRAD_CHUNK)
                .enumerate()
                .map(|(c, idx)| {
                    let mut g = ModelGrad::zeros_like(m);
                    let (mut e, mut l, mut t) = (0.0, 0.0, 0.0);
                    for (o, &i) in idx.iter().enumerate() {
                        let pos = c * GRAD_CHUNK + o;
                        let eps = (!noise.is_empty()).then(|| &noise[pos * dz..(pos + 1) * dz]);
                        let terms = m.eval_sample(
                            d.features(i),
                            Some(d.logits(i)),
                            d.label(i),
                            eps,
                            opts,
                            Some(&mut g),
                        );
                        e += terms.elbo;
                        l += terms.log_cat;
                        t += terms.temperature;
                    }
                    (g, e, l, t)
                })
                .collect();
            let mut grad = ModelGrad::zeros_like(&model);
            let (mut be, mut bl, mut bt) = (0.0, 0.0, 0.0);
            for (g, e, l, t) in &partials {
                grad.add_assign(g);
                be += e;
                bl += l;
                bt += t;
            }
            if !(be.is_finite() && bl.is_finite() && grad.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sum_elbo += be;
            sum_cat += bl;
            sum_t += bt;
            // ascent on the objective
            grad.scale(-1.0 / batch.len() as f64);
            let gs = grad.slices();
            adam.step(model.param_slices_mut(), &gs)?;
        }
        let n = d.n() as f64;
        epochs.push(EpochStats {
            epoch,
            mean_elbo: sum_elbo / n,
            mean_log_cat: sum_cat / n,
            mean_temperature: sum_t / n,
        });
    }

    let (val, source) = match validation {
        Some(v) => (v, "holdout"),
        None => (d, "train"),
    };
    let (temps, _) = calibrate(&model, val)?;
    let report = TrainReport {
        epochs,
        steps: adam.steps(),
        validation_source: source.into(),
        validation_ece_before: metrics::ece(val, 1.0, cfg.bins)?,
        validation_ece_after: metrics::ece(val, &temps, cfg.bins)?,
    };
    Ok((model, report))
}

/// Per-sample temperatures and the tempered probabilities (`n × k`, row-major).
pub fn calibrate(m: &AdaTsModel, d: &CalibrationDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(m.d, d.d())?;
    check_dim(m.k, d.k())?;
    let temps: Vec<f64> = (0..d.n())
        .into_par_iter()
        .map(|i| m.predict_temperature(d.features(i)))
        .collect::<Result<_>>()?;
    let k = d.k();
    let mut probs = vec![0.0; d.n() * k];
    for (i, row) in probs.chunks_exact_mut(k).enumerate() {
        softmax_scaled_into(d.logits(i), temps[i], row);
    }
    Ok((temps, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::normal_vec;

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            latent_dim: 3,
            architecture: Architecture {
                encoder_hidden: vec![6],
                decoder_hidden: vec![5],
                temp_hidden: vec![4, 4],
            },
            ..TrainConfig::default()
        }
    }

    fn random_model(d: usize, k: usize, seed: u64) -> AdaTsModel {
        let mut rng = seeded(seed);
        let mut m = AdaTsModel::init(d, k, &small_cfg(seed), &mut rng).unwrap();
        for p in &mut m.priors {
            p.mean = normal_vec(&mut rng, 3);
            p.log_std = normal_vec(&mut rng, 3).iter().map(|v| 0.3 * v).collect();
        }
        for l in m.encoder.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w *= 1.5);
        }
        // Nonzero biases keep ReLU pre-activations away from the kink at 0.
        for net in [&mut m.encoder, &mut m.decoder, &mut m.temp_mlp] {
            for l in net.layers_mut() {
                l.bias = normal_vec(&mut rng, l.bias.len());
            }
        }
        m
    }

    #[test]
    fn zero_encoder_gives_standard_posterior() {
        let cfg = TrainConfig {
            frozen_vae: true,
            ..small_cfg(1)
        };
        let m = AdaTsModel::init(4, 3, &cfg, &mut seeded(1)).unwrap();
        let post = m.encode(&[1.0, -5.0, 2.0, 0.3]).unwrap();
        assert_eq!(post, DiagonalGaussian::standard(3));
        assert!(m.encode(&[1.0]).is_err());
    }

    #[test]
    fn pseudo_likelihood_at_prior_mode() {
        let mut m = random_model(4, 3, 2);
        m.priors[1].log_std = vec![0.0; 3];
        let mean = m.priors[1].mean.clone();
        let q = m.pseudo_likelihood_vector(&mean).unwrap();
        let mode = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((q[1] - mode).abs() < 1e-14);
        let shifted: Vec<f64> = mean.iter().map(|v| v + 0.1).collect();
        assert!(m.pseudo_likelihood_vector(&shifted).unwrap()[1] < q[1]);
    }

    #[test]
    fn identical_priors_give_constant_vector() {
        let mut m = random_model(4, 3, 3);
        let p = m.priors[0].clone();
        m.priors = vec![p; 3];
        let q = m.pseudo_likelihood_vector(&[0.3, -0.2, 1.1]).unwrap();
        assert!(q.iter().all(|v| *v == q[0]));
    }

    #[test]
    fn pseudo_likelihood_matches_density_formula() {
        let m = random_model(4, 3, 4);
        let z = [0.4, -1.0, 0.25];
        let q = m.pseudo_likelihood_vector(&z).unwrap();
        for (j, p) in m.priors.iter().enumerate() {
            let mut direct = 0.0;
            for i in 0..3 {
                let s = p.log_std[i].exp();
                let dens = (-(z[i] - p.mean[i]).powi(2) / (2.0 * s * s)).exp()
                    / (s * (2.0 * std::f64::consts::PI).sqrt());
                direct += dens.ln();
            }
            assert!((q[j] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_temperature_network_gives_log2_plus_floor() {
        let mut m = random_model(4, 3, 5);
        for l in m.temp_mlp.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let t = m.predict_temperature(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(t, std::f64::consts::LN_2 + DEFAULT_TEMP_FLOOR);
    }

    #[test]
    fn temperature_positive_on_random_inputs() {
        let m = random_model(5, 4, 6);
        let mut rng = seeded(60);
        for _ in 0..10_000 {
            let x: Vec<f64> = normal_vec(&mut rng, 5).iter().map(|v| v * 10.0).collect();
            let t = m.predict_temperature(&x).unwrap();
            assert!(t > 0.0 && t.is_finite());
        }
    }

    #[test]
    fn elbo_closed_form_when_posterior_matches_prior_and_decoder_exact() {
        // Encoder outputs the constant (0, 0) posterior via zero weights; the
        // decoder is a zero network and phi = 0, so reconstruction is exact.
        let cfg = TrainConfig {
            frozen_vae: true,
            ..small_cfg(7)
        };
        let mut m = AdaTsModel::init(4, 2, &cfg, &mut seeded(7)).unwrap();
        for l in m.decoder.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let (v, _) = m.elbo(&[0.0; 4], 1, &[0.0; 3]).unwrap();
        assert!((v + 4.0 * std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn elbo_label_symmetric_with_identical_priors() {
        let mut m = random_model(4, 3, 8);
        let p = m.priors[2].clone();
        m.priors = vec![p; 3];
        let phi = [0.2, -0.1, 0.7, 1.0];
        let e = [0.3, -0.6, 0.1];
        let a = m.elbo(&phi, 0, &e).unwrap().0;
        assert_eq!(a, m.elbo(&phi, 1, &e).unwrap().0);
        assert_eq!(a, m.elbo(&phi, 2, &e).unwrap().0);
    }

    #[test]
    fn temperature_term_gradient_signs() {
        // d/dT log softmax(s/T)_y at T = 1
        let deriv = |s: &[f64], y: usize| {
            let mut p = vec![0.0; s.len()];
            softmax_scaled_into(s, 1.0, &mut p);
            p.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() - s[y]
        };
        assert!(deriv(&[6.0, 0.0, -1.0], 0) < 0.0);
        assert!(deriv(&[6.0, 0.0, -1.0], 2) > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for trial in 0..10u64 {
            let mut m = random_model(4, 3, 100 + trial);
            let mut rng = seeded(200 + trial);
            let phi = normal_vec(&mut rng, 4);
            let s: Vec<f64> = normal_vec(&mut rng, 3).iter().map(|v| 3.0 * v).collect();
            let e = normal_vec(&mut rng, 3);
            let y = trial as usize % 3;
            let (_, g) = m.joint_objective(&phi, &s, y, &e).unwrap();
            let (_, ge) = m.elbo(&phi, y, &e).unwrap();
            let analytic: Vec<Vec<f64>> = g.slices().iter().map(|v| v.to_vec()).collect();
            let analytic_elbo: Vec<Vec<f64>> = ge.slices().iter().map(|v| v.to_vec()).collect();
            for si in 0..analytic.len() {
                for j in 0..analytic[si].len() {
                    let orig = m.param_slices_mut()[si][j];
                    m.param_slices_mut()[si][j] = orig + h;
                    let (fp, ep) = (
                        m.joint_objective(&phi, &s, y, &e).unwrap().0,
                        m.elbo(&phi, y, &e).unwrap().0,
                    );
                    m.param_slices_mut()[si][j] = orig - h;
                    let (fm, em) = (
                        m.joint_objective(&phi, &s, y, &e).unwrap().0,
                        m.elbo(&phi, y, &e).unwrap().0,
                    );
                    m.param_slices_mut()[si][j] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let fde = (ep - em) / (2.0 * h);
                    let a = analytic[si][j];
                    assert!(
                        (fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-4),
                        "trial {trial} slice {si} idx {j}: fd {fd} analytic {a}"
                    );
                    let a = analytic_elbo[si][j];
                    assert!((fde - a).abs() <= 1e-4 * fde.abs().max(a.abs()).max(1e-4));
                }
            }
        }
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let m = random_model(4, 3, 9);
        let json = m.to_json().unwrap();
        let back = AdaTsModel::from_json(&json).unwrap();
        assert_eq!(back, m);
        let bumped = json.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            AdaTsModel::from_json(&bumped),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        let wrong = json.replacen("\"kind\":\"adats\"", "\"kind\":\"vanilla\"", 1);
        assert!(matches!(
            AdaTsModel::from_json(&wrong),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                temp_floor: 0.0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.lr), (50, 0.001));
        assert_eq!(c.fingerprint(), TrainConfig::default().fingerprint());
    }
}

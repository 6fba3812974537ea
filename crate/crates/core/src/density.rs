//! VAE density proxy over state-action images.
//!
//! The likelihood of a pair is never evaluated; a pair is treated as low
//! density when its reconstruction error exceeds a threshold calibrated on
//! held-out demonstrations.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::neural::{add_grads, get_f64, put_f64, BatchCache, Grads, LayerSpec, NetworkModel, OptimizerState, Tensor};
use crate::neural::{Activation, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    /// Dense encoder/decoder on the flattened image.
    Mlp { hidden: usize },
    /// Two stride-2 convolutions, mirrored by transposed convolutions.
    Conv { channels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VaeConfig {
    pub backbone: Backbone,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            backbone: Backbone::Mlp { hidden: 64 },
            latent_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    /// Outputs `[mu; log_var]`, `2 * latent_dim` values.
    pub encoder: NetworkModel,
    pub decoder: NetworkModel,
    pub latent_dim: usize,
}

impl VaeModel {
    pub fn new(input_shape: &[usize], cfg: &VaeConfig) -> Result<Self> {
        let l = cfg.latent_dim;
        if l == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        let n: usize = input_shape.iter().product();
        let (encoder, decoder) = match cfg.backbone {
            Backbone::Mlp { hidden } => (
                NetworkModel::mlp(input_shape, &[hidden], 2 * l, None, cfg.seed)?,
                NetworkModel::mlp(&[l], &[hidden], n, Some(input_shape), cfg.seed.wrapping_add(1))?,
            ),
            Backbone::Conv { channels } => {
                let [c, h, w] = input_shape else {
                    return Err(Error::Config("conv backbone needs a [planes, height, width] input".into()));
                };
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Config("conv backbone needs grid sides divisible by 4".into()));
                }
                let (c1, c2) = (channels, 2 * channels);
                let inner = c2 * (h / 4) * (w / 4);
                let act = || LayerSpec::Act(Activation::SmoothLeaky);
                let encoder = NetworkModel::new(
                    input_shape,
                    vec![
                        LayerSpec::Conv2d { in_ch: *c, out_ch: c1 },
                        act(),
                        LayerSpec::Conv2d { in_ch: c1, out_ch: c2 },
                        act(),
                        LayerSpec::Reshape(vec![inner]),
                        LayerSpec::Dense { inputs: inner, outputs: 2 * l },
                    ],
                    cfg.seed,
                )?;
                let decoder = NetworkModel::new(
                    &[l],
                    vec![
                        LayerSpec::Dense { inputs: l, outputs: inner },
                        act(),
                        LayerSpec::Reshape(vec![c2, h / 4, w / 4]),
                        LayerSpec::ConvTranspose2d { in_ch: c2, out_ch: c1 },
                        act(),
                        LayerSpec::ConvTranspose2d { in_ch: c1, out_ch: *c },
                    ],
                    cfg.seed.wrapping_add(1),
                )?;
                (encoder, decoder)
            }
        };
        VaeModel::from_parts(encoder, decoder, l)
    }

    pub fn from_parts(encoder: NetworkModel, decoder: NetworkModel, latent_dim: usize) -> Result<Self> {
        if encoder.output_shape().iter().product::<usize>() != 2 * latent_dim {
            return Err(domain("encoder output must be 2 * latent_dim"));
        }
        if decoder.input_shape().iter().product::<usize>() != latent_dim {
            return Err(domain("decoder input must be latent_dim"));
        }
        if decoder.output_shape().iter().product::<usize>() != encoder.input_shape().iter().product::<usize>() {
            return Err(domain("decoder output must match encoder input"));
        }
        Ok(VaeModel {
            encoder,
            decoder,
            latent_dim,
        })
    }

    pub fn input_len(&self) -> usize {
        self.encoder.input_shape().iter().product()
    }

    pub fn zero_grads(&self) -> VaeGrads {
        VaeGrads {
            encoder: self.encoder.zero_grads(),
            decoder: self.decoder.zero_grads(),
        }
    }

    /// Posterior mean for `x`.
    pub fn encode_mu(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.encoder.predict_slice(x)?.data;
        out.truncate(self.latent_dim);
        Ok(out)
    }

    /// Reconstruction through the posterior mean (no sampling).
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mu = self.encode_mu(x)?;
        Ok(self.decoder.predict_slice(&mu)?.data)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.latent_dim as u64).to_le_bytes())?;
        self.encoder.write_to(w)?;
        self.decoder.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let latent = u64::from_le_bytes(b) as usize;
        let encoder = NetworkModel::read_from(r)?;
        let decoder = NetworkModel::read_from(r)?;
        VaeModel::from_parts(encoder, decoder, latent)
    }

    pub fn same_parameters(&self, other: &VaeModel) -> bool {
        self.latent_dim == other.latent_dim
            && self.encoder.same_parameters(&other.encoder)
            && self.decoder.same_parameters(&other.decoder)
    }
}

impl ParamSet for VaeModel {
    fn tensors(&self) -> Vec<&Tensor> {
        self.encoder.params().chain(self.decoder.params()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder.params_mut().chain(self.decoder.params_mut()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder: Grads,
    pub decoder: Grads,
}

impl VaeGrads {
    pub fn add(&mut self, other: &VaeGrads) {
        add_grads(&mut self.encoder, &other.encoder);
        add_grads(&mut self.decoder, &other.decoder);
    }

    pub fn flat(self) -> Grads {
        self.encoder.into_iter().chain(self.decoder).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VaeParts {
    pub rmse: f64,
    pub kl: f64,
}

/// Closed-form `KL(N(mu, exp(log_var)) || N(0, I))`.
pub fn kl_standard_normal(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

/// Draws the reparameterization noise for one example.
pub fn draw_noise(latent_dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..latent_dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Encoder activations for a batch.
pub(crate) struct EncoderBatch {
    /// Per example `[mu; log_var]`.
    pub out: Vec<Vec<f64>>,
    pub cache: BatchCache,
}

pub(crate) fn encoder_batch(model: &VaeModel, xs: &[&[f64]]) -> Result<EncoderBatch> {
    let (out, cache) = model.encoder.forward_batch(xs)?;
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite encoder output".into()));
    }
    Ok(EncoderBatch { out, cache })
}

/// Auxiliary VAE terms requested for one batch example.
pub(crate) struct AuxTerm<'a> {
    pub index: usize,
    pub eps: &'a [f64],
    pub weight: f64,
}

/// Backpropagates through the backbone for a batch whose encoder pass is
/// `enc`. Adds `weight * d(RMSE + beta * KL)` for every entry of `aux` and
/// the extra latent-mean gradients `mu_grads` (already weighted). Returns
/// the unweighted terms of each `aux` entry. With `differentiate` unset the
/// terms are only evaluated.
pub(crate) fn backbone_backward(
    model: &VaeModel,
    xs: &[&[f64]],
    enc: &EncoderBatch,
    aux: &[AuxTerm<'_>],
    beta: f64,
    mu_grads: Option<&[Vec<f64>]>,
    grads: &mut VaeGrads,
    differentiate: bool,
) -> Result<Vec<VaeParts>> {
    let l = model.latent_dim;
    let mut parts = Vec::with_capacity(aux.len());
    let mut g_enc: Vec<Vec<f64>> = match mu_grads {
        Some(g) => g
            .iter()
            .map(|gm| {
                let mut v = vec![0.0; 2 * l];
                v[..l].copy_from_slice(gm);
                v
            })
            .collect(),
        None => vec![vec![0.0; 2 * l]; xs.len()],
    };
    if !aux.is_empty() {
        let sigmas: Vec<Vec<f64>> = aux
            .iter()
            .map(|a| enc.out[a.index][l..].iter().map(|lv| (0.5 * lv).exp()).collect())
            .collect();
        let zs: Vec<Vec<f64>> = aux
            .iter()
            .zip(&sigmas)
            .map(|(a, sg)| (0..l).map(|j| enc.out[a.index][j] + sg[j] * a.eps[j]).collect())
            .collect();
        let z_refs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let (xrs, dcache) = model.decoder.forward_batch(&z_refs)?;
        let mut g_xr = Vec::with_capacity(aux.len());
        for (a, xr) in aux.iter().zip(&xrs) {
            let x = xs[a.index];
            let out = &enc.out[a.index];
            let err = rmse(xr, x);
            let kl = kl_standard_normal(&out[..l], &out[l..]);
            if !err.is_finite() || !kl.is_finite() {
                return Err(Error::Numeric("non-finite VAE activations".into()));
            }
            let coef = if err > 0.0 { a.weight / (x.len() as f64 * err) } else { 0.0 };
            g_xr.push(xr.iter().zip(x).map(|(r, xi)| coef * (r - xi)).collect::<Vec<f64>>());
            parts.push(VaeParts { rmse: err, kl });
        }
        if differentiate {
            let g_z = model
                .decoder
                .backward_batch(&dcache, &g_xr, &mut grads.decoder, true)?
                .expect("input grad requested");
            for ((a, sg), gz) in aux.iter().zip(&sigmas).zip(&g_z) {
                let out = &enc.out[a.index];
                let g = &mut g_enc[a.index];
                for j in 0..l {
                    g[j] += gz[j] + a.weight * beta * out[j];
                    g[l + j] += gz[j] * a.eps[j] * 0.5 * sg[j] + a.weight * beta * 0.5 * (out[l + j].exp() - 1.0);
                }
            }
        }
    }
    if differentiate {
        model.encoder.backward_batch(&enc.cache, &g_enc, &mut grads.encoder, false)?;
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<G> {
    pub loss: f64,
    pub grads: G,
    pub parts: VaeParts,
}

/// `RMSE(x, decode(mu + sigma * eps)) + beta * KL`, with explicit noise.
pub fn vae_loss_with_noise(model: &VaeModel, x: &Tensor, beta: f64, eps: &[f64]) -> Result<LossOutput<VaeGrads>> {
    if !(beta >= 0.0) {
        return Err(domain("beta must be non-negative"));
    }
    if eps.len() != model.latent_dim {
        return Err(domain("noise length must equal latent_dim"));
    }
    let xs = [x.data.as_slice()];
    let enc = encoder_batch(model, &xs)?;
    let mut grads = model.zero_grads();
    let aux = [AuxTerm { index: 0, eps, weight: 1.0 }];
    let parts = backbone_backward(model, &xs, &enc, &aux, beta, None, &mut grads, true)?[0];
    Ok(LossOutput {
        loss: parts.rmse + beta * parts.kl,
        grads,
        parts,
    })
}

/// As [`vae_loss_with_noise`], drawing the noise from `noise_seed`.
pub fn vae_loss(model: &VaeModel, x: &Tensor, beta: f64, noise_seed: u64) -> Result<LossOutput<VaeGrads>> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let eps = draw_noise(model.latent_dim, &mut rng);
    vae_loss_with_noise(model, x, beta, &eps)
}

/// Cyclical KL weight: a linear ramp over the first `ramp_ratio` of each
/// cycle, then flat at `beta_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub cycle_len: u64,
    pub ramp_ratio: f64,
    pub beta_max: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            cycle_len: 400,
            ramp_ratio: 0.5,
            beta_max: 1e-3,
        }
    }
}

pub fn beta_at(schedule: &BetaSchedule, step: u64) -> f64 {
    let cycle = schedule.cycle_len.max(1);
    let phase = (step % cycle) as f64 / (schedule.ramp_ratio * cycle as f64);
    schedule.beta_max * phase.min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: BetaSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            schedule: BetaSchedule::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub rmse: f64,
    pub kl: f64,
    pub beta: f64,
}

/// Examples per gradient chunk; fixed so that the summation order, and
/// therefore the result, does not depend on the thread count.
pub(crate) const CHUNK: usize = 16;

/// Trains the VAE in place and returns the per-epoch log.
pub fn train_vae(model: &mut VaeModel, data: &[Tensor], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(domain("training set is empty"));
    }
    if let Some(bad) = data.iter().find(|x| x.len() != model.input_len()) {
        return Err(domain(format!("training image of shape {:?} does not fit the model", bad.shape)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_enc = OptimizerState::new(&model.encoder, cfg.learning_rate);
    let mut opt_dec = OptimizerState::new(&model.decoder, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step: u64 = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_rmse, mut sum_kl, mut sum_beta, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(batch) {
            let beta = beta_at(&cfg.schedule, step);
            let noise: Vec<Vec<f64>> = idx.iter().map(|_| draw_noise(model.latent_dim, &mut rng)).collect();
            let w = 1.0 / idx.len() as f64;
            let m = &*model;
            let partials: Vec<Result<(VaeGrads, VaeParts)>> = idx
                .par_chunks(CHUNK)
                .zip(noise.par_chunks(CHUNK))
                .map(|(ids, eps)| {
                    let mut g = m.zero_grads();
                    let xs: Vec<&[f64]> = ids.iter().map(|&i| data[i].data.as_slice()).collect();
                    let enc = encoder_batch(m, &xs)?;
                    let aux: Vec<AuxTerm<'_>> = eps
                        .iter()
                        .enumerate()
                        .map(|(index, e)| AuxTerm { index, eps: e, weight: w })
                        .collect();
                    let mut parts = VaeParts::default();
                    for p in backbone_backward(m, &xs, &enc, &aux, beta, None, &mut g, true)? {
                        parts.rmse += p.rmse;
                        parts.kl += p.kl;
                    }
                    Ok((g, parts))
                })
                .collect();
            let mut total = model.zero_grads();
            let mut parts = VaeParts::default();
            for p in partials {
                let (g, pp) = p.map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
                total.add(&g);
                parts.rmse += pp.rmse;
                parts.kl += pp.kl;
            }
            opt_enc
                .step(&mut model.encoder, &total.encoder)
                .and_then(|_| opt_dec.step(&mut model.decoder, &total.decoder))
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            step += 1;
            sum_rmse += parts.rmse * w;
            sum_kl += parts.kl * w;
            sum_beta += beta;
            batches += 1;
        }
        let k = batches as f64;
        log.push(EpochLog {
            epoch,
            rmse: sum_rmse / k,
            kl: sum_kl / k,
            beta: sum_beta / k,
        });
    }
    Ok(log)
}

pub fn write_training_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,rmse,kl,beta\n");
    for e in log {
        text.push_str(&format!("{},{:?},{:?},{:?}\n", e.epoch, e.rmse, e.kl, e.beta));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// RMSE between `x` and its posterior-mean reconstruction.
pub fn recon_error(model: &VaeModel, x: &[f64]) -> Result<f64> {
    let xr = model.reconstruct(x)?;
    Ok(rmse(&xr, x))
}

pub fn mean_recon_error(model: &VaeModel, data: &[Tensor]) -> Result<f64> {
    if data.is_empty() {
        return Err(domain("no images to score"));
    }
    let errs: Vec<f64> = data
        .par_iter()
        .map(|x| recon_error(model, &x.data))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityThreshold {
    pub e_th: f64,
    pub calibration_quantile: f64,
}

impl DensityThreshold {
    /// Never flags anything.
    pub fn unbounded() -> Self {
        DensityThreshold {
            e_th: f64::INFINITY,
            calibration_quantile: 1.0,
        }
    }

    pub fn is_low_density(&self, error: f64) -> bool {
        error > self.e_th
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        put_f64(w, self.e_th)?;
        put_f64(w, self.calibration_quantile)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        Ok(DensityThreshold {
            e_th: get_f64(r)?,
            calibration_quantile: get_f64(r)?,
        })
    }
}

/// Order-statistic quantile: the `ceil(q * n)`-th smallest value (1-based,
/// at least the first), so that exactly `n - ceil(q * n)` distinct values
/// lie above it.
pub fn quantile_threshold(errors: &[f64], quantile: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(domain("calibration set is empty"));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(domain("quantile must lie in [0, 1]"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

pub fn calibrate_threshold(model: &VaeModel, held_out: &[Tensor], quantile: f64) -> Result<DensityThreshold> {
    let errors: Vec<f64> = held_out
        .par_iter()
        .map(|x| recon_error(model, &x.data))
        .collect::<Result<_>>()?;
    Ok(DensityThreshold {
        e_th: quantile_threshold(&errors, quantile)?,
        calibration_quantile: quantile,
    })
}

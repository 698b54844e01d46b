//! Optimization loop: Adam with L2 weight decay, plateau learning-rate decay,
//! per-iteration maintenance of the decoder gradient average and the
//! gradient-constraint term of the objective.
//!
//! The gradient of `L_grad` with respect to the parameters involves second
//! derivatives of the reconstruction loss. It is obtained as a Hessian-vector
//! product by a forward difference of decoder gradients along
//! `v = ∂L_grad/∂g`, where `g` are the current decoder gradients. Only the
//! decoder is re-run for the perturbed pass; the encoder backward is linear in
//! its upstream gradient, so both contributions share one encoder backward.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{augment, DatasetSplit, ImageSample, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::model::{
    backward_decoder_with, decode_with, DecoderPass, EncoderPass, Gradients, Mode, Model,
    ModelSpec, BOTTLENECK_SIZE,
};
use crate::nn::Tensor;
use crate::objective::{
    gradient_loss, gradient_loss_grad, kl_divergence_grad, recon_loss_grad, squared_error_sum,
    GradientState, LossBreakdown,
};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    /// Epochs without relative improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub plateau_rel_tol: f64,
    pub epochs: usize,
    /// L2 penalty applied by the optimizer (not part of `J`).
    pub weight_decay: f64,
    pub batch_size: usize,
    /// KL weight. 1 gives the plain VAE objective.
    pub beta: f64,
    /// Weight of the gradient-constraint term in `J`.
    pub alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Finite-difference step for the Hessian-vector product, relative to the
    /// decoder parameter norm.
    pub hvp_rel_step: f64,
    /// Apply random horizontal flips to training batches.
    pub augment: bool,
    /// Re-estimate batch-norm population statistics after every epoch from the
    /// un-augmented training set, passed through the deterministic scoring
    /// path. When off, the momentum running averages from training are kept.
    pub recalibrate_batch_norm: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-2,
            lr_decay_factor: 0.1,
            plateau_patience: 10,
            plateau_rel_tol: 1e-4,
            epochs: 100,
            weight_decay: 1e-4,
            batch_size: 64,
            beta: 3.0,
            alpha: 0.03,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            hvp_rel_step: 1e-3,
            augment: true,
            recalibrate_batch_norm: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_init", self.lr_init),
            ("lr_decay_factor", self.lr_decay_factor),
            ("adam_eps", self.adam_eps),
            ("hvp_rel_step", self.hvp_rel_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "training.{name} must be > 0, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("beta", self.beta),
            ("alpha", self.alpha),
            ("plateau_rel_tol", self.plateau_rel_tol),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "training.{name} must be >= 0, got {v}"
                )));
            }
        }
        if self.lr_decay_factor > 1.0 {
            return Err(Error::Config(
                "training.lr_decay_factor must be <= 1".into(),
            ));
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "training.{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("training.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 over the training configuration and architecture.
    pub fn fingerprint(&self, spec: &ModelSpec) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serializable config"));
        h.update(serde_json::to_vec(spec).expect("serializable spec"));
        hex::encode(h.finalize())
    }
}

/// Adam with coupled L2 weight decay (`g ← g + λθ`).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainingConfig, model: &Model<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            lr: cfg.lr_init,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f32>>, grads: &Gradients<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr / bc1) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (wd, eps) = (self.weight_decay as f32, self.eps as f32);
        let inv_bc2 = (1.0 / bc2) as f32;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = gi + wd * *pi;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *pi -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without a
/// relative improvement larger than `rel_tol` in validation loss.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    rel_tol: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, rel_tol: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            rel_tol,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self::new(
            cfg.lr_init,
            cfg.lr_decay_factor,
            cfg.plateau_patience,
            cfg.plateau_rel_tol,
        )
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => val_loss < b - self.rel_tol * b.abs(),
        };
        if improved {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience.max(1) {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub grad_loss: f64,
    #[serde(rename = "J")]
    pub total_j: f64,
    pub lr: f64,
    pub val_loss: f64,
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: Model<f32>,
    /// Gradient average over every optimizer iteration.
    pub gradient_state: GradientState,
    pub log: Vec<EpochLog>,
    pub fingerprint: String,
    pub best_epoch: usize,
    pub iterations: u64,
}

/// Result of one forward/backward evaluation of `J` on a batch.
pub struct StepOutput<T> {
    pub loss: LossBreakdown,
    pub grads: Gradients<T>,
    /// Reconstruction-loss gradients of each decoder layer group.
    pub decoder_grads: Vec<Vec<f64>>,
    pub encoder_pass: EncoderPass<T>,
    pub decoder_pass: DecoderPass<T>,
}

/// Stack samples into a channel-major `(3, N, 64, 64)` tensor.
pub fn samples_to_tensor<'a, T: Real>(
    samples: impl IntoIterator<Item = &'a ImageSample>,
) -> Tensor<T> {
    let samples: Vec<&ImageSample> = samples.into_iter().collect();
    let n = samples.len();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut t = Tensor::zeros([3, n, IMAGE_SIZE, IMAGE_SIZE]);
    let d = t.data_mut();
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(
            s.tensor.dim(),
            (IMAGE_SIZE, IMAGE_SIZE, 3),
            "sample {} is not a 64x64 RGB image",
            s.id
        );
        for ((y, x, c), &v) in s.tensor.indexed_iter() {
            d[(c * n + i) * plane + y * IMAGE_SIZE + x] = T::lit(v as f64);
        }
    }
    t
}

/// `2(x̂ − x) / count` and `Σ(x̂ − x)² / count`.
pub(crate) fn recon_grad<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> (Tensor<T>, f64) {
    let g = recon_loss_grad(x_hat.data(), x.data()).expect("matching shapes");
    let recon = squared_error_sum(x_hat.data().iter().copied(), x.data().iter().copied())
        / x.data().len() as f64;
    (Tensor::from_vec(x.shape(), g), recon)
}

pub(crate) fn group_grads<T: Real>(model: &Model<T>, grads: &Gradients<T>) -> Vec<Vec<f64>> {
    model
        .decoder_layer_groups()
        .into_iter()
        .map(|(_, r)| {
            grads.tensors[r]
                .iter()
                .flatten()
                .map(|v| v.as_f64())
                .collect()
        })
        .collect()
}

fn decoder_norm<T: Real>(model: &Model<T>) -> f64 {
    model
        .decoder
        .params()
        .iter()
        .flat_map(|p| p.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Evaluate the loss and all parameter gradients of `J` for one batch.
///
/// `eps` supplies the reparameterization noise for variational models (`None`
/// means `ε = 0`). BN uses batch statistics; running statistics are not touched.
#[allow(clippy::too_many_arguments)]
pub fn compute_step<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    eps: Option<&Tensor<T>>,
    beta: f64,
    alpha: f64,
    state: &GradientState,
    hvp_rel_step: f64,
) -> Result<StepOutput<T>> {
    let variational = model.kind().is_variational();
    let enc = model.encode_pass(x, Mode::Train)?;
    let half = T::lit(0.5);
    let z = match (&enc.log_var, eps) {
        (Some(lv), Some(e)) => {
            let mut z = enc.mu.clone();
            for ((zi, &l), &ei) in z.data_mut().iter_mut().zip(lv.data()).zip(e.data()) {
                *zi = *zi + (l * half).exp() * ei;
            }
            z
        }
        _ => enc.mu.clone(),
    };
    let dec = model.decode_pass(&z, Mode::Train);
    let (dx_hat, recon) = recon_grad(&dec.output, x);

    let mut grads = Gradients::zeros_like(model);
    let mut dz = model
        .backward_decoder(&dec, dx_hat, &mut grads, true)
        .expect("decoder input gradient");
    let decoder_grads = group_grads(model, &grads);
    let grad_loss = gradient_loss(&decoder_grads, state)?;

    if alpha > 0.0 && state.k > 0 {
        let v = gradient_loss_grad(&decoder_grads, state)?;
        let v_norm = v.iter().flatten().map(|a| a * a).sum::<f64>().sqrt();
        if v_norm > 0.0 {
            let r = hvp_rel_step * decoder_norm(model).max(1.0) / v_norm;
            let mut perturbed = model.decoder.clone();
            {
                let mut tensors = perturbed.params_mut();
                let offset = model.decoder_offset();
                for ((_, range), dir) in model.decoder_layer_groups().into_iter().zip(&v) {
                    let mut it = dir.iter();
                    for t in range {
                        for p in tensors[t - offset].iter_mut() {
                            *p = *p + T::lit(r * it.next().expect("direction length"));
                        }
                    }
                }
            }
            let dec_p = decode_with(&perturbed, &z, Mode::Train);
            let (dx_p, _) = recon_grad(&dec_p.output, x);
            let mut grads_p = Gradients {
                tensors: perturbed
                    .params()
                    .iter()
                    .map(|p| vec![T::zero(); p.len()])
                    .collect(),
            };
            let dz_p = backward_decoder_with(&perturbed, 0, &dec_p, dx_p, &mut grads_p, true)
                .expect("decoder input gradient");
            let scale = T::lit(alpha / r);
            let offset = model.decoder_offset();
            for (t, gp) in grads_p.tensors.iter().enumerate() {
                for (g, &p) in grads.tensors[offset + t].iter_mut().zip(gp) {
                    *g = *g + scale * (p - *g);
                }
            }
            for (d, &p) in dz.data_mut().iter_mut().zip(dz_p.data()) {
                *d = *d + scale * (p - *d);
            }
        }
    }

    let n = x.batch();
    let kl = if variational {
        let lv = enc.log_var.as_ref().expect("variational");
        let plane = BOTTLENECK_SIZE * BOTTLENECK_SIZE;
        let c = enc.mu.channels();
        let (g_mu, g_lv) = kl_divergence_grad(enc.mu.data(), lv.data(), n)?;
        let b = T::lit(beta);
        let mut kl_sum = 0.0;
        let mut d_mu = dz.clone();
        let mut d_lv = Tensor::zeros(lv.shape());
        for i in 0..enc.mu.data().len() {
            let (m, l) = (enc.mu.data()[i], lv.data()[i]);
            let (mf, lf) = (m.as_f64(), l.as_f64());
            kl_sum += -0.5 * (1.0 + lf - mf * mf - lf.exp());
            d_mu.data_mut()[i] = d_mu.data()[i] + b * g_mu[i];
            let mut g = b * g_lv[i];
            if let Some(e) = eps {
                g = g + dz.data()[i] * e.data()[i] * half * (l * half).exp();
            }
            d_lv.data_mut()[i] = g;
        }
        debug_assert_eq!(enc.mu.data().len(), c * n * plane);
        model.backward_encoder(&enc, d_mu, Some(d_lv), &mut grads);
        kl_sum / n as f64
    } else {
        model.backward_encoder(&enc, dz, None, &mut grads);
        0.0
    };

    let effective_beta = if variational { beta } else { 0.0 };
    Ok(StepOutput {
        loss: LossBreakdown::new(recon, kl, effective_beta, grad_loss, alpha),
        grads,
        decoder_grads,
        encoder_pass: enc,
        decoder_pass: dec,
    })
}

/// Per-sample negative ELBO (`recon + β·KL`, or `recon` for the CAE) in
/// evaluation mode with `ε = 0`.
pub fn per_sample_elbo(
    model: &Model<f32>,
    samples: &[ImageSample],
    beta: f64,
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for batch in samples.chunks(chunk.max(1)) {
        let x = samples_to_tensor::<f32>(batch);
        let enc = model.encode_pass(&x, Mode::Eval)?;
        let dec = model.decode_pass(&enc.mu, Mode::Eval);
        let recon = per_sample_recon(&dec.output, &x);
        let kl = match &enc.log_var {
            Some(lv) => per_sample_kl(&enc.mu, lv)?,
            None => vec![0.0; batch.len()],
        };
        out.extend(recon.iter().zip(&kl).map(|(r, k)| r + beta * k));
    }
    Ok(out)
}

pub(crate) fn per_sample_recon<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Vec<f64> {
    let [c, n, h, w] = x.shape();
    let plane = h * w;
    let mut acc = vec![0.0; n];
    for ch in 0..c {
        for (i, a) in acc.iter_mut().enumerate() {
            let base = (ch * n + i) * plane;
            *a += crate::objective::squared_error_sum(
                x_hat.data()[base..base + plane].iter().copied(),
                x.data()[base..base + plane].iter().copied(),
            );
        }
    }
    acc.into_iter().map(|s| s / (c * plane) as f64).collect()
}

pub(crate) fn per_sample_kl<T: Real>(mu: &Tensor<T>, log_var: &Tensor<T>) -> Result<Vec<f64>> {
    let [c, n, h, w] = mu.shape();
    let plane = h * w;
    (0..n)
        .map(|i| {
            let idx = (0..c).flat_map(move |ch| {
                let base = (ch * n + i) * plane;
                base..base + plane
            });
            crate::objective::kl_row(
                idx.clone().map(|j| mu.data()[j]),
                idx.map(|j| log_var.data()[j]),
            )
        })
        .collect()
}

/// Mean validation loss in evaluation mode; never mutates the model.
pub fn validate_epoch(
    model: &Model<f32>,
    validation: &[ImageSample],
    beta: f64,
    chunk: usize,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let per = per_sample_elbo(model, validation, beta, chunk)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Progress notifications from [`train_with`].
pub enum TrainEvent<'a> {
    Epoch {
        log: &'a EpochLog,
        model: &'a Model<f32>,
        state: &'a GradientState,
        is_best: bool,
    },
}

pub fn train(split: &DatasetSplit, spec: &ModelSpec, cfg: &TrainingConfig) -> Result<TrainedModel> {
    train_with(split, spec, cfg, |_| Ok(()))
}

pub fn train_with(
    split: &DatasetSplit,
    spec: &ModelSpec,
    cfg: &TrainingConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    spec.validate()?;
    split.validate()?;
    if split.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if split.validation.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut model = Model::<f32>::new(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg, &model);
    let mut sched = PlateauScheduler::from_config(cfg);
    let mut state = model.empty_gradient_state();
    let variational = spec.kind.is_variational();
    let mut best: Option<(f64, Model<f32>, usize)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ImageSample> = idx
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&split.train[i], &mut rng)
                    } else {
                        split.train[i].clone()
                    }
                })
                .collect();
            let x = samples_to_tensor::<f32>(&batch);
            let eps = variational.then(|| {
                let shape = [
                    spec.bottleneck_channels,
                    batch.len(),
                    BOTTLENECK_SIZE,
                    BOTTLENECK_SIZE,
                ];
                let n = shape.iter().product();
                Tensor::from_vec(
                    shape,
                    (0..n)
                        .map(|_| rng.sample::<f32, _>(StandardNormal))
                        .collect(),
                )
            });
            let step = compute_step(
                &model,
                &x,
                eps.as_ref(),
                cfg.beta,
                cfg.alpha,
                &state,
                cfg.hvp_rel_step,
            )?;
            let l = step.loss;
            let grads_finite = step.grads.tensors.iter().flatten().all(|g| g.is_finite());
            if !l.is_finite() || !grads_finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    recon: l.recon,
                    kl: l.kl,
                    grad_loss: l.grad_loss,
                });
            }
            state.update(&step.decoder_grads)?;
            model.update_running_stats(&step.encoder_pass, &step.decoder_pass);
            adam.step(model.params_mut(), &step.grads);
            sums.recon += l.recon;
            sums.kl += l.kl;
            sums.elbo_loss += l.elbo_loss;
            sums.grad_loss += l.grad_loss;
            sums.total_j += l.total_j;
            batches += 1;
        }
        if cfg.recalibrate_batch_norm {
            let chunks: Vec<Tensor<f32>> = split
                .train
                .chunks(cfg.batch_size)
                .map(samples_to_tensor)
                .collect();
            model.recalibrate_batch_norm(&chunks)?;
        }
        let val_loss = validate_epoch(
            &model,
            &split.validation,
            if variational { cfg.beta } else { 0.0 },
            cfg.batch_size,
        )?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: batches,
                recon: f64::NAN,
                kl: f64::NAN,
                grad_loss: f64::NAN,
            });
        }
        let nb = batches as f64;
        let row = EpochLog {
            epoch,
            recon: sums.recon / nb,
            kl: sums.kl / nb,
            grad_loss: sums.grad_loss / nb,
            total_j: sums.total_j / nb,
            lr: adam.lr,
            val_loss,
        };
        adam.lr = sched.step(val_loss);
        let is_best = best.as_ref().is_none_or(|(b, ..)| val_loss < *b);
        if is_best {
            best = Some((val_loss, model.clone(), epoch));
        }
        log::info!(
            "epoch {epoch}/{}: recon={:.5} kl={:.4} grad_loss={:.4} J={:.5} val={:.5} lr={:.1e}",
            cfg.epochs,
            row.recon,
            row.kl,
            row.grad_loss,
            row.total_j,
            val_loss,
            row.lr
        );
        on_event(TrainEvent::Epoch {
            log: &row,
            model: &model,
            state: &state,
            is_best,
        })?;
        log.push(row);
    }

    let (_, best_model, best_epoch) = best.expect("at least one epoch");
    Ok(TrainedModel {
        model: best_model,
        iterations: state.k,
        gradient_state: state,
        log,
        fingerprint: cfg.fingerprint(spec),
        best_epoch,
    })
}

//! Convolutional β-VAE / VAE / CAE with fixed 64×64 input and an 8×8 bottleneck.
//!
//! Encoder: five 3×3 conv + batch-norm + LeakyReLU stages with three 2×2 max
//! pools, then either two separate 3×3 conv heads (posterior mean and log
//! variance) or, for the convolutional autoencoder, one deterministic 3×3 conv
//! bottleneck. Decoder: six 3×3 transposed-conv stages (batch-norm + LeakyReLU
//! on all but the last, which ends in Tanh) with three ×2 bicubic upsamplings.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Sequential, Tape, Tensor};
use crate::real::Real;

/// Spatial size of the bottleneck feature map.
pub const BOTTLENECK_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BetaVae,
    Vae,
    Cae,
}

impl ModelKind {
    pub fn is_variational(self) -> bool {
        !matches!(self, ModelKind::Cae)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::BetaVae => "beta_vae",
            ModelKind::Vae => "vae",
            ModelKind::Cae => "cae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta_vae" => Ok(ModelKind::BetaVae),
            "vae" => Ok(ModelKind::Vae),
            "cae" => Ok(ModelKind::Cae),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected beta_vae, vae or cae)"
            ))),
        }
    }
}

/// Architecture description. Everything needed to rebuild the layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub latent_dim: usize,
    /// Output channels of the five encoder conv stages.
    pub encoder_filters: Vec<usize>,
    pub bottleneck_channels: usize,
    pub leaky_slope: f64,
    /// Encoder stages (0-based) followed by a 2×2 max pool.
    pub pool_after: Vec<usize>,
    /// Decoder stages (0-based) followed by a ×2 bicubic upsample.
    pub upsample_after: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::new(ModelKind::BetaVae)
    }
}

impl ModelSpec {
    pub const ENCODER_STAGES: usize = 5;
    pub const DECODER_STAGES: usize = 6;

    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            latent_dim: 640,
            encoder_filters: vec![16, 32, 64, 128, 256],
            bottleneck_channels: 10,
            leaky_slope: 0.01,
            pool_after: vec![1, 2, 3],
            upsample_after: vec![1, 2, 3],
        }
    }

    /// Same topology with a custom filter ladder; latent size follows the bottleneck.
    pub fn with_filters(mut self, encoder_filters: Vec<usize>, bottleneck_channels: usize) -> Self {
        self.encoder_filters = encoder_filters;
        self.bottleneck_channels = bottleneck_channels;
        self.latent_dim = bottleneck_channels * BOTTLENECK_SIZE * BOTTLENECK_SIZE;
        self
    }

    /// Output channels of the six decoder stages: the encoder ladder reversed, then RGB.
    pub fn decoder_filters(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.encoder_filters.iter().rev().copied().collect();
        f.push(3);
        f
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.encoder_filters.len() != Self::ENCODER_STAGES {
            return cfg(format!(
                "encoder_filters must have {} entries, got {}",
                Self::ENCODER_STAGES,
                self.encoder_filters.len()
            ));
        }
        if self.encoder_filters.contains(&0) || self.bottleneck_channels == 0 {
            return cfg("filter counts must be positive".into());
        }
        if self.encoder_filters.windows(2).any(|w| w[1] < w[0]) {
            return cfg(format!(
                "encoder_filters must be non-decreasing, got {:?}",
                self.encoder_filters
            ));
        }
        let want = self.bottleneck_channels * BOTTLENECK_SIZE * BOTTLENECK_SIZE;
        if self.latent_dim != want {
            return cfg(format!(
                "latent_dim {} must equal bottleneck_channels × 8 × 8 = {want}",
                self.latent_dim
            ));
        }
        for (name, v, stages) in [
            ("pool_after", &self.pool_after, Self::ENCODER_STAGES),
            (
                "upsample_after",
                &self.upsample_after,
                Self::DECODER_STAGES - 1,
            ),
        ] {
            let mut sorted = v.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != 3 || sorted.iter().any(|&s| s >= stages) {
                return cfg(format!(
                    "{name} must list 3 distinct stage indices below {stages}, got {v:?}"
                ));
            }
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return cfg(format!(
                "leaky_slope must lie in [0, 1), got {}",
                self.leaky_slope
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm.
    Train,
    /// Running batch-norm statistics; samples are independent.
    Eval,
}

impl Mode {
    fn batch_stats(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Posterior parameters, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub mu: Array2<T>,
    pub log_var: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample<T> {
    pub z: Array2<T>,
}

/// `z = μ + exp(½·log σ²) ⊙ ε`, element-wise.
pub fn reparameterize<T: Real>(
    enc: &EncoderOutput<T>,
    eps: ArrayView2<'_, T>,
) -> Result<LatentSample<T>> {
    if enc.mu.dim() != eps.dim() || enc.log_var.dim() != eps.dim() {
        return Err(Error::shape(
            "reparameterize",
            format!("{:?}", enc.mu.dim()),
            format!("{:?}", eps.dim()),
        ));
    }
    let half = T::lit(0.5);
    let mut z = enc.mu.clone();
    ndarray::Zip::from(&mut z)
        .and(&enc.log_var)
        .and(eps)
        .for_each(|z, &lv, &e| *z = *z + (lv * half).exp() * e);
    Ok(LatentSample { z })
}

/// Everything the encoder backward pass needs.
#[derive(Clone, Debug)]
pub struct EncoderPass<T> {
    trunk: Tape<T>,
    heads: Vec<Tape<T>>,
    /// `(bottleneck, N, 8, 8)`: posterior mean, or the CAE code.
    pub mu: Tensor<T>,
    /// Posterior log-variance (variational kinds only).
    pub log_var: Option<Tensor<T>>,
}

/// Decoder forward record.
#[derive(Clone, Debug)]
pub struct DecoderPass<T> {
    tape: Tape<T>,
    pub output: Tensor<T>,
}

/// Parameter gradients, one buffer per parameter tensor in [`Model::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            tensors: model
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.len()])
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    pub encoder: Sequential<T>,
    /// `[mu, log_var]` for variational kinds, `[bottleneck]` for the CAE.
    pub heads: Vec<Sequential<T>>,
    pub decoder: Sequential<T>,
}

impl<T: Real> Model<T> {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = spec.leaky_slope;

        let mut enc = Vec::new();
        let mut cin = 3;
        for (stage, &cout) in spec.encoder_filters.iter().enumerate() {
            enc.push(Layer::Conv(Conv2d::new(cin, cout, &mut rng)));
            enc.push(Layer::BatchNorm(BatchNorm2d::new(cout)));
            enc.push(Layer::LeakyRelu(slope));
            if spec.pool_after.contains(&stage) {
                enc.push(Layer::MaxPool2);
            }
            cin = cout;
        }
        let head_count = if spec.kind.is_variational() { 2 } else { 1 };
        let heads = (0..head_count)
            .map(|_| {
                Sequential::new(vec![Layer::Conv(Conv2d::new(
                    cin,
                    spec.bottleneck_channels,
                    &mut rng,
                ))])
            })
            .collect();

        let mut dec = Vec::new();
        let mut cin = spec.bottleneck_channels;
        let filters = spec.decoder_filters();
        let last = filters.len() - 1;
        for (stage, &cout) in filters.iter().enumerate() {
            dec.push(Layer::ConvTranspose(ConvTranspose2d::new(
                cin, cout, &mut rng,
            )));
            if stage == last {
                dec.push(Layer::Tanh);
            } else {
                dec.push(Layer::BatchNorm(BatchNorm2d::new(cout)));
                dec.push(Layer::LeakyRelu(slope));
                if spec.upsample_after.contains(&stage) {
                    dec.push(Layer::Upsample2);
                }
            }
            cin = cout;
        }

        Ok(Self {
            spec: spec.clone(),
            encoder: Sequential::new(enc),
            heads,
            decoder: Sequential::new(dec),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut p = self.encoder.params();
        for h in &self.heads {
            p.extend(h.params());
        }
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut p = self.encoder.params_mut();
        for h in &mut self.heads {
            p.extend(h.params_mut());
        }
        p.extend(self.decoder.params_mut());
        p
    }

    /// Names of the parameter tensors, aligned with [`Model::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut push = |prefix: &str, seq: &Sequential<T>| {
            for (i, layer) in seq.layers.iter().enumerate() {
                for n in layer.param_names() {
                    names.push(format!("{prefix}.{i}.{}.{n}", layer.kind_name()));
                }
            }
        };
        push("encoder", &self.encoder);
        let head_names: &[&str] = if self.kind().is_variational() {
            &["mu_head", "log_var_head"]
        } else {
            &["bottleneck"]
        };
        for (h, name) in self.heads.iter().zip(head_names) {
            push(name, h);
        }
        push("decoder", &self.decoder);
        names
    }

    /// Running batch-norm statistics, in layer order: `(mean, var)` per BN layer.
    pub fn buffers(&self) -> Vec<(&[T], &[T])> {
        self.bn_layers()
            .map(|b| (b.running_mean.as_slice(), b.running_var.as_slice()))
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(&mut Vec<T>, &mut Vec<T>)> {
        self.encoder
            .layers
            .iter_mut()
            .chain(self.decoder.layers.iter_mut())
            .filter_map(|l| match l {
                Layer::BatchNorm(b) => Some((&mut b.running_mean, &mut b.running_var)),
                _ => None,
            })
            .collect()
    }

    fn bn_layers(&self) -> impl Iterator<Item = &BatchNorm2d<T>> {
        self.encoder
            .layers
            .iter()
            .chain(self.decoder.layers.iter())
            .filter_map(|l| match l {
                Layer::BatchNorm(b) => Some(b),
                _ => None,
            })
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Index of the first decoder parameter tensor.
    pub fn decoder_offset(&self) -> usize {
        self.encoder.tensor_count() + self.heads.iter().map(|h| h.tensor_count()).sum::<usize>()
    }

    /// Decoder "layers" for the gradient constraint: one group per decoder
    /// stage (its transposed conv plus batch-norm), as ranges of parameter
    /// tensor indices.
    pub fn decoder_layer_groups(&self) -> Vec<(String, Range<usize>)> {
        let mut groups: Vec<(String, Range<usize>)> = Vec::new();
        let mut idx = self.decoder_offset();
        for layer in &self.decoder.layers {
            let n = layer.params().len();
            if n == 0 {
                continue;
            }
            if matches!(layer, Layer::ConvTranspose(_)) || groups.is_empty() {
                groups.push((format!("decoder.stage{}", groups.len()), idx..idx + n));
            } else {
                groups.last_mut().expect("group").1.end += n;
            }
            idx += n;
        }
        groups
    }

    /// Hex SHA-256 over parameters and running statistics.
    /// Empty gradient history matching this model's decoder layer groups.
    pub fn empty_gradient_state(&self) -> crate::objective::GradientState {
        let params = self.params();
        crate::objective::GradientState::new(
            self.decoder_layer_groups()
                .into_iter()
                .map(|(name, r)| (name, params[r].iter().map(|p| p.len()).sum()))
                .collect(),
        )
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        for (m, v) in self.buffers() {
            for x in m.iter().chain(v) {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn encode_pass(&self, x: &Tensor<T>, mode: Mode) -> Result<EncoderPass<T>> {
        let [c, _, h, w] = x.shape();
        if c != 3 || h != IMAGE_SIZE || w != IMAGE_SIZE {
            return Err(Error::shape(
                "encode",
                format!("(N, {IMAGE_SIZE}, {IMAGE_SIZE}, 3)"),
                format!("(N, {h}, {w}, {c})"),
            ));
        }
        let (feat, trunk) = self.encoder.forward(x, mode.batch_stats());
        let mut outs = Vec::new();
        let mut heads = Vec::new();
        for head in &self.heads {
            let (o, t) = head.forward(&feat, mode.batch_stats());
            outs.push(o);
            heads.push(t);
        }
        let mut outs = outs.into_iter();
        let mu = outs.next().expect("at least one head");
        Ok(EncoderPass {
            trunk,
            heads,
            mu,
            log_var: outs.next(),
        })
    }

    /// Re-estimate every batch-norm population statistic from `batches`
    /// pushed through the deterministic path (`z = μ`) that scoring uses.
    pub fn recalibrate_batch_norm<'a>(
        &mut self,
        batches: impl IntoIterator<Item = &'a Tensor<T>>,
    ) -> Result<()>
    where
        T: 'a,
    {
        let mut trunk = Vec::new();
        let mut heads = vec![Vec::new(); self.heads.len()];
        let mut decoder = Vec::new();
        for x in batches {
            let enc = self.encode_pass(x, Mode::Train)?;
            let dec = self.decode_pass(&enc.mu, Mode::Train);
            self.encoder.accumulate_moments(&enc.trunk, &mut trunk);
            for ((seq, tape), acc) in self.heads.iter().zip(&enc.heads).zip(&mut heads) {
                seq.accumulate_moments(tape, acc);
            }
            self.decoder.accumulate_moments(&dec.tape, &mut decoder);
        }
        self.encoder.set_population_stats(&trunk);
        for (seq, acc) in self.heads.iter_mut().zip(&heads) {
            seq.set_population_stats(acc);
        }
        self.decoder.set_population_stats(&decoder);
        Ok(())
    }

    pub fn decode_pass(&self, z: &Tensor<T>, mode: Mode) -> DecoderPass<T> {
        decode_with(&self.decoder, z, mode)
    }

    /// Backpropagate `dx_hat` through the decoder, writing decoder parameter
    /// gradients into `grads`. Returns the gradient w.r.t. the decoder input
    /// when requested.
    pub fn backward_decoder(
        &self,
        pass: &DecoderPass<T>,
        dx_hat: Tensor<T>,
        grads: &mut Gradients<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        backward_decoder_with(
            &self.decoder,
            self.decoder_offset(),
            pass,
            dx_hat,
            grads,
            need_input_grad,
        )
    }

    /// Backpropagate head gradients (`d_mu`, and `d_log_var` for variational
    /// kinds) through the heads and the encoder trunk, accumulating into `grads`.
    pub fn backward_encoder(
        &self,
        pass: &EncoderPass<T>,
        d_mu: Tensor<T>,
        d_log_var: Option<Tensor<T>>,
        grads: &mut Gradients<T>,
    ) {
        let mut offset = self.encoder.tensor_count();
        let mut d_feat: Option<Tensor<T>> = None;
        let upstream = std::iter::once(Some(d_mu)).chain(std::iter::once(d_log_var));
        for ((head, tape), d) in self.heads.iter().zip(&pass.heads).zip(upstream) {
            let n = head.tensor_count();
            let d = d.expect("gradient for every head");
            let df = head
                .backward(tape, d, &mut grads.tensors[offset..offset + n], true)
                .expect("input grad");
            d_feat = Some(match d_feat {
                None => df,
                Some(mut acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(df.data()) {
                        *a = *a + *b;
                    }
                    acc
                }
            });
            offset += n;
        }
        let n = self.encoder.tensor_count();
        self.encoder.backward(
            &pass.trunk,
            d_feat.expect("heads"),
            &mut grads.tensors[..n],
            false,
        );
    }

    pub fn update_running_stats(&mut self, enc: &EncoderPass<T>, dec: &DecoderPass<T>) {
        self.encoder.update_running_stats(&enc.trunk);
        self.decoder.update_running_stats(&dec.tape);
    }

    /// Posterior parameters for an `(N, 64, 64, 3)` batch.
    pub fn encode(&self, batch: ArrayView4<'_, T>, mode: Mode) -> Result<EncoderOutput<T>> {
        if !self.kind().is_variational() {
            return Err(Error::Usage(
                "the convolutional autoencoder has no posterior; use bottleneck()".into(),
            ));
        }
        let pass = self.encode_pass(&batch_to_tensor(batch)?, mode)?;
        Ok(EncoderOutput {
            mu: flatten_latent(&pass.mu),
            log_var: flatten_latent(pass.log_var.as_ref().expect("variational")),
        })
    }

    /// Bottleneck activation `(N, C, 8, 8)`: posterior mean for variational
    /// kinds, the deterministic code for the CAE.
    pub fn bottleneck(&self, batch: ArrayView4<'_, T>, mode: Mode) -> Result<Array4<T>> {
        let pass = self.encode_pass(&batch_to_tensor(batch)?, mode)?;
        let [c, n, h, w] = pass.mu.shape();
        let flat = flatten_latent(&pass.mu);
        Ok(flat
            .into_shape_with_order((n, c, h, w))
            .expect("latent reshape"))
    }

    pub fn decode(&self, z: &LatentSample<T>, mode: Mode) -> Result<Array4<T>> {
        let t = unflatten_latent(z.z.view(), self.spec.bottleneck_channels)?;
        Ok(tensor_to_batch(&self.decode_pass(&t, mode).output))
    }

    /// encode → reparameterize (ε ~ N(0, I) from `rng`) → decode.
    pub fn forward(
        &self,
        batch: ArrayView4<'_, T>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Array4<T>, EncoderOutput<T>, LatentSample<T>)> {
        let enc = self.encode(batch, mode)?;
        let eps = Array2::from_shape_fn(enc.mu.dim(), |_| T::lit(rng.sample(StandardNormal)));
        let z = reparameterize(&enc, eps.view())?;
        let recon = self.decode(&z, mode)?;
        Ok((recon, enc, z))
    }

    /// Deterministic reconstruction through the CAE bottleneck.
    pub fn cae_forward(&self, batch: ArrayView4<'_, T>, mode: Mode) -> Result<Array4<T>> {
        if self.kind() != ModelKind::Cae {
            return Err(Error::Usage(format!(
                "cae_forward called on a {} model",
                self.kind()
            )));
        }
        let pass = self.encode_pass(&batch_to_tensor(batch)?, mode)?;
        Ok(tensor_to_batch(&self.decode_pass(&pass.mu, mode).output))
    }
}

pub(crate) fn decode_with<T: Real>(
    decoder: &Sequential<T>,
    z: &Tensor<T>,
    mode: Mode,
) -> DecoderPass<T> {
    let (output, tape) = decoder.forward(z, mode.batch_stats());
    DecoderPass { tape, output }
}

pub(crate) fn backward_decoder_with<T: Real>(
    decoder: &Sequential<T>,
    offset: usize,
    pass: &DecoderPass<T>,
    dx_hat: Tensor<T>,
    grads: &mut Gradients<T>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let n = decoder.tensor_count();
    decoder.backward(
        &pass.tape,
        dx_hat,
        &mut grads.tensors[offset..offset + n],
        need_input_grad,
    )
}

/// `(N, H, W, C)` array → channel-major tensor.
pub fn batch_to_tensor<T: Real>(batch: ArrayView4<'_, T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = batch.dim();
    if c != 3 || h != IMAGE_SIZE || w != IMAGE_SIZE {
        return Err(Error::shape(
            "encode",
            format!("(N, {IMAGE_SIZE}, {IMAGE_SIZE}, 3)"),
            format!("({n}, {h}, {w}, {c})"),
        ));
    }
    let permuted = batch.permuted_axes([3, 0, 1, 2]);
    Ok(Tensor::from_vec(
        [c, n, h, w],
        permuted.iter().copied().collect(),
    ))
}

/// Channel-major tensor → `(N, H, W, C)` array.
pub fn tensor_to_batch<T: Real>(t: &Tensor<T>) -> Array4<T> {
    let [c, n, h, w] = t.shape();
    let a = Array4::from_shape_vec((c, n, h, w), t.data().to_vec()).expect("tensor shape");
    a.permuted_axes([1, 2, 3, 0])
        .as_standard_layout()
        .into_owned()
}

/// `(C, N, 8, 8)` → `(N, C·64)` with per-sample `(c, y, x)` ordering.
pub fn flatten_latent<T: Real>(t: &Tensor<T>) -> Array2<T> {
    let [c, n, h, w] = t.shape();
    let plane = h * w;
    Array2::from_shape_fn((n, c * plane), |(s, j)| {
        let (ch, p) = (j / plane, j % plane);
        t.data()[(ch * n + s) * plane + p]
    })
}

pub fn unflatten_latent<T: Real>(z: ArrayView2<'_, T>, channels: usize) -> Result<Tensor<T>> {
    let (n, d) = z.dim();
    let plane = BOTTLENECK_SIZE * BOTTLENECK_SIZE;
    if d != channels * plane {
        return Err(Error::shape(
            "decode",
            format!("latent dim {}", channels * plane),
            format!("latent dim {d}"),
        ));
    }
    let mut t = Tensor::zeros([channels, n, BOTTLENECK_SIZE, BOTTLENECK_SIZE]);
    for s in 0..n {
        for j in 0..d {
            let (ch, p) = (j / plane, j % plane);
            t.data_mut()[(ch * n + s) * plane + p] = z[[s, j]];
        }
    }
    Ok(t)
}

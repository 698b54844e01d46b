use super::conv::{Conv2d, ConvTranspose2d};
use super::norm::{BatchNorm2d, BatchNormCache};
use super::pool::{max_pool2, max_pool2_backward};
use super::tensor::Tensor;
use super::upsample::{upsample_bicubic2, upsample_bicubic2_backward};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    LeakyRelu(f64),
    MaxPool2,
    Upsample2,
    Tanh,
}

impl<T: Real> Layer<T> {
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::ConvTranspose(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvTranspose(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Conv(_) | Layer::ConvTranspose(_) => &["weight", "bias"],
            Layer::BatchNorm(_) => &["gamma", "beta"],
            _ => &[],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::ConvTranspose(_) => "tconv",
            Layer::BatchNorm(_) => "bn",
            Layer::LeakyRelu(_) => "lrelu",
            Layer::MaxPool2 => "maxpool",
            Layer::Upsample2 => "upsample",
            Layer::Tanh => "tanh",
        }
    }
}

/// Per-layer state retained by a forward pass.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Input(Tensor<T>),
    BatchNorm(BatchNormCache<T>),
    Output(Tensor<T>),
    Pool {
        argmax: Vec<u32>,
        input_shape: [usize; 4],
    },
    Upsample {
        input_shape: [usize; 4],
    },
}

/// Forward record of a [`Sequential`], consumed by its backward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    pub caches: Vec<LayerCache<T>>,
}

/// Batch-norm input moments pooled over several batches, one entry per
/// batch-norm layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnMoments {
    pub count: f64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    /// Number of parameter tensors (weights, biases, gammas, betas).
    pub fn tensor_count(&self) -> usize {
        self.layers.iter().map(|l| l.params().len()).sum()
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn forward(&self, x: &Tensor<T>, use_batch_stats: bool) -> (Tensor<T>, Tape<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) => (c.forward(&cur), LayerCache::Input(cur)),
                Layer::ConvTranspose(c) => (c.forward(&cur), LayerCache::Input(cur)),
                Layer::BatchNorm(b) => {
                    let (y, cache) = b.forward(&cur, use_batch_stats);
                    (y, LayerCache::BatchNorm(cache))
                }
                Layer::LeakyRelu(slope) => {
                    let s = T::lit(*slope);
                    let y = cur.map(|v| if v > T::zero() { v } else { s * v });
                    (y.clone(), LayerCache::Output(y))
                }
                Layer::Tanh => {
                    let y = cur.map(|v| v.tanh());
                    (y.clone(), LayerCache::Output(y))
                }
                Layer::MaxPool2 => {
                    let (y, argmax) = max_pool2(&cur);
                    (
                        y,
                        LayerCache::Pool {
                            argmax,
                            input_shape: cur.shape(),
                        },
                    )
                }
                Layer::Upsample2 => (
                    upsample_bicubic2(&cur),
                    LayerCache::Upsample {
                        input_shape: cur.shape(),
                    },
                ),
            };
            caches.push(cache);
            cur = next;
        }
        (cur, Tape { caches })
    }

    /// Backpropagate `dy` through the stack.
    ///
    /// Parameter gradients are written into `grads` (one buffer per parameter
    /// tensor, in [`Sequential::params`] order). The input gradient is returned
    /// only when `need_input_grad` is set.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dy: Tensor<T>,
        grads: &mut [Vec<T>],
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(grads.len(), self.tensor_count());
        let mut slot = grads.len();
        let mut cur = dy;
        let first_param_layer = self.layers.iter().position(|l| !l.params().is_empty());
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            // Nothing upstream needs a gradient below the first parameterized layer.
            let need_dx = need_input_grad || first_param_layer.is_some_and(|f| i > f);
            cur = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Input(x)) => {
                    let (dx, dw, db) = c.backward(x, &cur, need_dx);
                    slot -= 2;
                    grads[slot] = dw;
                    grads[slot + 1] = db;
                    dx?
                }
                (Layer::ConvTranspose(c), LayerCache::Input(x)) => {
                    let (dx, dw, db) = c.backward(x, &cur, need_dx);
                    slot -= 2;
                    grads[slot] = dw;
                    grads[slot + 1] = db;
                    dx?
                }
                (Layer::BatchNorm(b), LayerCache::BatchNorm(c)) => {
                    let (dx, dg, db) = b.backward(c, &cur);
                    slot -= 2;
                    grads[slot] = dg;
                    grads[slot + 1] = db;
                    dx
                }
                (Layer::LeakyRelu(slope), LayerCache::Output(y)) => {
                    let s = T::lit(*slope);
                    let mut g = cur;
                    for (gi, &yi) in g.data_mut().iter_mut().zip(y.data()) {
                        if yi <= T::zero() {
                            *gi = *gi * s;
                        }
                    }
                    g
                }
                (Layer::Tanh, LayerCache::Output(y)) => {
                    let mut g = cur;
                    for (gi, &yi) in g.data_mut().iter_mut().zip(y.data()) {
                        *gi = *gi * (T::one() - yi * yi);
                    }
                    g
                }
                (
                    Layer::MaxPool2,
                    LayerCache::Pool {
                        argmax,
                        input_shape,
                    },
                ) => max_pool2_backward(&cur, argmax, *input_shape),
                (Layer::Upsample2, LayerCache::Upsample { input_shape }) => {
                    upsample_bicubic2_backward(&cur, *input_shape)
                }
                (l, _) => panic!("tape does not match layer {}", l.kind_name()),
            };
        }
        need_input_grad.then_some(cur)
    }

    /// Pool the batch statistics recorded in `tape` into `acc`.
    pub fn accumulate_moments(&self, tape: &Tape<T>, acc: &mut Vec<BnMoments>) {
        let mut k = 0;
        for (layer, cache) in self.layers.iter().zip(&tape.caches) {
            let (Layer::BatchNorm(_), LayerCache::BatchNorm(c)) = (layer, cache) else {
                continue;
            };
            let (means, vars) = c
                .batch_stats
                .as_ref()
                .expect("forward ran with batch statistics");
            let m = c.xhat.channel_len() as f64;
            if acc.len() == k {
                acc.push(BnMoments {
                    count: 0.0,
                    sum: vec![0.0; means.len()],
                    sum_sq: vec![0.0; means.len()],
                });
            }
            let a = &mut acc[k];
            a.count += m;
            let unbias = if m > 1.0 { (m - 1.0) / m } else { 1.0 };
            for (ch, (mean, var)) in means.iter().zip(vars).enumerate() {
                let mu = mean.as_f64();
                a.sum[ch] += m * mu;
                a.sum_sq[ch] += m * (var.as_f64() * unbias + mu * mu);
            }
            k += 1;
        }
    }

    /// Replace running statistics with pooled population moments.
    pub fn set_population_stats(&mut self, acc: &[BnMoments]) {
        let bns = self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        });
        for (b, a) in bns.zip(acc) {
            let correction = if a.count > 1.0 {
                a.count / (a.count - 1.0)
            } else {
                1.0
            };
            for ch in 0..b.channels() {
                let mean = a.sum[ch] / a.count;
                let var = (a.sum_sq[ch] / a.count - mean * mean).max(0.0) * correction;
                b.running_mean[ch] = T::lit(mean);
                b.running_var[ch] = T::lit(var);
            }
        }
    }

    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (Layer::BatchNorm(b), LayerCache::BatchNorm(c)) = (layer, cache) {
                b.update_running_stats(c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BatchNorm2d;

    #[test]
    fn pooled_moments_match_concatenated_batches() {
        let mut net = Sequential::<f64>::new(vec![Layer::BatchNorm(BatchNorm2d::new(2))]);
        // Two batches of different sizes, shape (C=2, N, 1, 2).
        let a = Tensor::from_vec([2, 2, 1, 2], vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.5, 4.0, 2.0]);
        let b = Tensor::from_vec([2, 1, 1, 2], vec![7.0, -2.0, 3.0, 3.5]);
        let mut acc = Vec::new();
        for x in [&a, &b] {
            let (_, tape) = net.forward(x, true);
            net.accumulate_moments(&tape, &mut acc);
        }
        net.set_population_stats(&acc);
        let per_channel = [
            vec![1.0, 2.0, 3.0, 5.0, 7.0, -2.0],
            vec![-1.0, 0.5, 4.0, 2.0, 3.0, 3.5],
        ];
        let Layer::BatchNorm(bn) = &net.layers[0] else {
            unreachable!()
        };
        for (ch, v) in per_channel.iter().enumerate() {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((bn.running_mean[ch] - mean).abs() < 1e-12);
            assert!((bn.running_var[ch] - var).abs() < 1e-12);
        }
    }
}

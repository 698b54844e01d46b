use super::tensor::Tensor;
use crate::real::Real;

/// Per-channel batch normalization with learnable affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// What the backward pass needs from a batch-norm forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// `Some((mean, unbiased var))` when batch statistics were used.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor<T>, use_batch_stats: bool) -> (Tensor<T>, BatchNormCache<T>) {
        let c = x.channels();
        assert_eq!(c, self.channels(), "batch-norm channels");
        let m = x.channel_len();
        let eps = T::lit(self.eps);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(c);
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        for ch in 0..c {
            let src = &x.data()[ch * m..(ch + 1) * m];
            let (mean, var) = if use_batch_stats {
                let mf = T::from_usize(m).unwrap();
                let mean = src.iter().copied().sum::<T>() / mf;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                means.push(mean);
                let unbiased = if m > 1 {
                    var * mf / T::from_usize(m - 1).unwrap()
                } else {
                    var
                };
                vars.push(unbiased);
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            let xh = &mut xhat.data_mut()[ch * m..(ch + 1) * m];
            let out = &mut y.data_mut()[ch * m..(ch + 1) * m];
            for ((h, o), &v) in xh.iter_mut().zip(out.iter_mut()).zip(src) {
                *h = (v - mean) * is;
                *o = g * *h + b;
            }
        }
        let batch_stats = use_batch_stats.then_some((means, vars));
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Vec<T>, Vec<T>) {
        let c = dy.channels();
        let m = dy.channel_len();
        let mf = T::from_usize(m).unwrap();
        let mut dx = Tensor::zeros(dy.shape());
        let mut dgamma = Vec::with_capacity(c);
        let mut dbeta = Vec::with_capacity(c);
        for ch in 0..c {
            let g = &dy.data()[ch * m..(ch + 1) * m];
            let xh = &cache.xhat.data()[ch * m..(ch + 1) * m];
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            dgamma.push(sum_gx);
            dbeta.push(sum_g);
            let scale = self.gamma[ch] * cache.inv_std[ch];
            let out = &mut dx.data_mut()[ch * m..(ch + 1) * m];
            if cache.batch_stats.is_some() {
                let mean_g = sum_g / mf;
                let mean_gx = sum_gx / mf;
                for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
                    *o = scale * (gi - mean_g - xi * mean_gx);
                }
            } else {
                for (o, &gi) in out.iter_mut().zip(g) {
                    *o = scale * gi;
                }
            }
        }
        (dx, dgamma, dbeta)
    }

    /// Fold batch statistics from a training forward into the running estimates.
    pub fn update_running_stats(&mut self, cache: &BatchNormCache<T>) {
        if let Some((mean, var)) = &cache.batch_stats {
            let mom = T::lit(self.momentum);
            let keep = T::one() - mom;
            for ch in 0..self.channels() {
                self.running_mean[ch] = keep * self.running_mean[ch] + mom * mean[ch];
                self.running_var[ch] = keep * self.running_var[ch] + mom * var[ch];
            }
        }
    }
}

use rand::Rng;

use super::tensor::Tensor;
use crate::real::Real;

const K: usize = 3;
const TAPS: usize = K * K;

/// Unfold 3×3 neighbourhoods (zero padding 1) into a `(C·9) × (N·H·W)` matrix.
pub(crate) fn im2col<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let [c, n, h, w] = x.shape();
    let cols_n = n * h * w;
    let mut cols = vec![T::zero(); c * TAPS * cols_n];
    let src = x.data();
    for ch in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = (ch * TAPS + ky * K + kx) * cols_n;
                for b in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s = ((ch * n + b) * h + sy as usize) * w;
                        let d = row + (b * h + y) * w;
                        match kx {
                            0 => cols[d + 1..d + w].copy_from_slice(&src[s..s + w - 1]),
                            1 => cols[d..d + w].copy_from_slice(&src[s..s + w]),
                            _ => cols[d..d + w - 1].copy_from_slice(&src[s + 1..s + w]),
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a `(C, N, H, W)` grid.
pub(crate) fn col2im<T: Real>(cols: &[T], shape: [usize; 4]) -> Tensor<T> {
    let [c, n, h, w] = shape;
    let cols_n = n * h * w;
    assert_eq!(cols.len(), c * TAPS * cols_n);
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for ch in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = (ch * TAPS + ky * K + kx) * cols_n;
                for b in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let o = ((ch * n + b) * h + sy as usize) * w;
                        let s = row + (b * h + y) * w;
                        let (dst_range, src_range) = match kx {
                            0 => (o..o + w - 1, s + 1..s + w),
                            1 => (o..o + w, s..s + w),
                            _ => (o + 1..o + w, s..s + w - 1),
                        };
                        for (d, &v) in dst[dst_range].iter_mut().zip(&cols[src_range]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Elements of an unrolled column buffer kept per GEMM call; large enough
/// for efficient kernels, small enough to stay cache resident.
const COLS_BUDGET: usize = 1 << 19;

/// Split `n` samples into `(start, len)` chunks whose column buffers
/// (`per_sample` elements each) fit [`COLS_BUDGET`].
fn batch_chunks(n: usize, per_sample: usize) -> impl Iterator<Item = (usize, usize)> {
    let step = (COLS_BUDGET / per_sample.max(1)).clamp(1, n.max(1));
    (0..n).step_by(step).map(move |s| (s, step.min(n - s)))
}

fn uniform_init<T: Real>(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect()
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    let per = out.len() / bias.len();
    for (chunk, &b) in out.chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>) -> Vec<T> {
    dy.data()
        .chunks(dy.channel_len())
        .map(|c| c.iter().copied().sum())
        .collect()
}

/// 3×3 convolution, stride 1, zero padding 1 (spatial size preserved).
///
/// `weight` is stored `(C_out, C_in·3·3)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * TAPS;
        Self {
            in_channels,
            out_channels,
            weight: uniform_init(rng, out_channels * fan_in, fan_in),
            bias: uniform_init(rng, out_channels, fan_in),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [c, n, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let mut out = Tensor::zeros([self.out_channels, n, h, w]);
        for (start, len) in batch_chunks(n, c * TAPS * h * w) {
            let xc = x.select_batch(start, len);
            let cols = im2col(&xc);
            let mut yc = Tensor::zeros([self.out_channels, len, h, w]);
            T::gemm(
                false,
                false,
                self.out_channels,
                c * TAPS,
                len * h * w,
                T::one(),
                &self.weight,
                &cols,
                T::zero(),
                yc.data_mut(),
            );
            out.write_batch(start, &yc);
        }
        add_bias(out.data_mut(), &self.bias);
        out
    }

    /// Returns `(dx, dweight, dbias)`; `dx` is skipped when `need_input_grad` is false.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_input_grad: bool,
    ) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
        let [c, n, h, w] = x.shape();
        let mut dw = vec![T::zero(); self.weight.len()];
        let mut dx = need_input_grad.then(|| Tensor::zeros([c, n, h, w]));
        for (start, len) in batch_chunks(n, c * TAPS * h * w) {
            let cols_n = len * h * w;
            let cols = im2col(&x.select_batch(start, len));
            let dyc = dy.select_batch(start, len);
            T::gemm(
                false,
                true,
                self.out_channels,
                cols_n,
                c * TAPS,
                T::one(),
                dyc.data(),
                &cols,
                T::one(),
                &mut dw,
            );
            if let Some(dx) = dx.as_mut() {
                let mut dcols = cols;
                T::gemm(
                    true,
                    false,
                    c * TAPS,
                    self.out_channels,
                    cols_n,
                    T::one(),
                    &self.weight,
                    dyc.data(),
                    T::zero(),
                    &mut dcols,
                );
                dx.write_batch(start, &col2im(&dcols, [c, len, h, w]));
            }
        }
        (dx, dw, bias_grad(dy))
    }
}

/// 3×3 transposed convolution, stride 1, padding 1 (spatial size preserved).
///
/// `weight` is stored `(C_in, C_out·3·3)` row-major, the same layout as a
/// `(C_in, C_out, 3, 3)` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = out_channels * TAPS;
        Self {
            in_channels,
            out_channels,
            weight: uniform_init(rng, in_channels * fan_in, fan_in),
            bias: uniform_init(rng, out_channels, fan_in),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [c, n, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let mut out = Tensor::zeros([self.out_channels, n, h, w]);
        for (start, len) in batch_chunks(n, self.out_channels * TAPS * h * w) {
            let xc = x.select_batch(start, len);
            let mut cols = vec![T::zero(); self.out_channels * TAPS * len * h * w];
            T::gemm(
                true,
                false,
                self.out_channels * TAPS,
                c,
                len * h * w,
                T::one(),
                &self.weight,
                xc.data(),
                T::zero(),
                &mut cols,
            );
            out.write_batch(start, &col2im(&cols, [self.out_channels, len, h, w]));
        }
        add_bias(out.data_mut(), &self.bias);
        out
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_input_grad: bool,
    ) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
        let [c, n, h, w] = x.shape();
        let mut dw = vec![T::zero(); self.weight.len()];
        let mut dx = need_input_grad.then(|| Tensor::zeros([c, n, h, w]));
        for (start, len) in batch_chunks(n, self.out_channels * TAPS * h * w) {
            let cols_n = len * h * w;
            let dcols = im2col(&dy.select_batch(start, len));
            let xc = x.select_batch(start, len);
            T::gemm(
                false,
                true,
                c,
                cols_n,
                self.out_channels * TAPS,
                T::one(),
                xc.data(),
                &dcols,
                T::one(),
                &mut dw,
            );
            if let Some(dx) = dx.as_mut() {
                let mut dxc = Tensor::zeros([c, len, h, w]);
                T::gemm(
                    false,
                    false,
                    c,
                    self.out_channels * TAPS,
                    cols_n,
                    T::one(),
                    &self.weight,
                    &dcols,
                    T::zero(),
                    dxc.data_mut(),
                );
                dx.write_batch(start, &dxc);
            }
        }
        (dx, dw, bias_grad(dy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [c, n, h, w] = x.shape();
        let mut out = Tensor::zeros([conv.out_channels, n, h, w]);
        for o in 0..conv.out_channels {
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias[o];
                        for i in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let v =
                                        x.data()[((i * n + b) * h + sy as usize) * w + sx as usize];
                                    acc += conv.weight[o * c * 9 + i * 9 + ky * 3 + kx] * v;
                                }
                            }
                        }
                        out.data_mut()[((o * n + b) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter form of the transposed convolution.
    fn tconv_oracle(t: &ConvTranspose2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [c, n, h, w] = x.shape();
        let co = t.out_channels;
        let mut out = Tensor::zeros([co, n, h, w]);
        for i in 0..c {
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x.data()[((i * n + b) * h + y) * w + xx];
                        for o in 0..co {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let oy = y as isize + ky as isize - 1;
                                    let ox = xx as isize + kx as isize - 1;
                                    if oy < 0 || ox < 0 || oy >= h as isize || ox >= w as isize {
                                        continue;
                                    }
                                    out.data_mut()
                                        [((o * n + b) * h + oy as usize) * w + ox as usize] +=
                                        v * t.weight[i * co * 9 + o * 9 + ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        for o in 0..co {
            for v in &mut out.data_mut()[o * n * h * w..(o + 1) * n * h * w] {
                *v += t.bias[o];
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(3, 4, &mut rng);
        let x = random_tensor([3, 2, 5, 6], &mut rng);
        let got = conv.forward(&x);
        let want = conv_oracle(&conv, &x);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tconv_matches_scatter_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = ConvTranspose2d::<f64>::new(3, 2, &mut rng);
        let x = random_tensor([3, 2, 4, 5], &mut rng);
        let got = t.forward(&x);
        let want = tconv_oracle(&t, &x);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor([2, 2, 4, 3], &mut rng);
        let cols = im2col(&x);
        let c: Vec<f64> = (0..cols.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, x.shape());
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2d::<f64>::new(2, 3, &mut rng);
        let x = random_tensor([2, 2, 4, 4], &mut rng);
        let g = random_tensor([3, 2, 4, 4], &mut rng);
        let loss = |conv: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            conv.forward(x)
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (dx, dw, db) = conv.backward(&x, &g, true);
        let dx = dx.unwrap();
        let h = 1e-6;
        for i in [0, 5, 17, 30] {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6);
        }
        for i in [0, 7, 40] {
            let mut p = conv.clone();
            p.weight[i] += h;
            let mut m = conv.clone();
            m.weight[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
        let mut p = conv.clone();
        p.bias[1] += h;
        let mut m = conv.clone();
        m.bias[1] -= h;
        assert!(((loss(&p, &x) - loss(&m, &x)) / (2.0 * h) - db[1]).abs() < 1e-6);
    }

    #[test]
    fn tconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = ConvTranspose2d::<f64>::new(3, 2, &mut rng);
        let x = random_tensor([3, 1, 4, 5], &mut rng);
        let g = random_tensor([2, 1, 4, 5], &mut rng);
        let loss = |t: &ConvTranspose2d<f64>, x: &Tensor<f64>| -> f64 {
            t.forward(x)
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (dx, dw, _) = t.backward(&x, &g, true);
        let dx = dx.unwrap();
        let h = 1e-6;
        for i in [0, 11, 59] {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            assert!(((loss(&t, &p) - loss(&t, &m)) / (2.0 * h) - dx.data()[i]).abs() < 1e-6);
        }
        for i in [0, 13, 53] {
            let mut p = t.clone();
            p.weight[i] += h;
            let mut m = t.clone();
            m.weight[i] -= h;
            assert!(((loss(&p, &x) - loss(&m, &x)) / (2.0 * h) - dw[i]).abs() < 1e-6);
        }
    }
}

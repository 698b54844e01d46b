use super::tensor::Tensor;
use crate::real::Real;

const CUBIC_A: f64 = -0.75;

fn cubic_near(x: f64) -> f64 {
    ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
}

fn cubic_far(x: f64) -> f64 {
    ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
}

/// Four source taps (clamped to the border) and weights for each output
/// coordinate of a ×2 bicubic resize with half-pixel centres.
pub(crate) fn bicubic_taps(in_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..in_len * 2)
        .map(|o| {
            let src = (o as f64 + 0.5) * 0.5 - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let idx = [-1isize, 0, 1, 2].map(|d| (base + d).clamp(0, in_len as isize - 1) as usize);
            let wts = [
                cubic_far(t + 1.0),
                cubic_near(t),
                cubic_near(1.0 - t),
                cubic_far(2.0 - t),
            ];
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic upsampling by a factor of two on every `(c, n)` plane.
pub fn upsample_bicubic2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [c, n, h, w] = x.shape();
    let ty = bicubic_taps(h);
    let tx = bicubic_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let tx: Vec<([usize; 4], [T; 4])> = tx.into_iter().map(|(i, w)| (i, w.map(T::lit))).collect();
    let ty: Vec<([usize; 4], [T; 4])> = ty.into_iter().map(|(i, w)| (i, w.map(T::lit))).collect();
    let mut out = Tensor::zeros([c, n, oh, ow]);
    let mut rows = vec![T::zero(); h * ow];
    for plane in 0..c * n {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (ox, (idx, wt)) in tx.iter().enumerate() {
                rows[y * ow + ox] = (0..4).fold(T::zero(), |acc, k| acc + wt[k] * row[idx[k]]);
            }
        }
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, (idx, wt)) in ty.iter().enumerate() {
            let d = &mut dst[oy * ow..(oy + 1) * ow];
            for k in 0..4 {
                let r = &rows[idx[k] * ow..(idx[k] + 1) * ow];
                for (o, &v) in d.iter_mut().zip(r) {
                    *o = *o + wt[k] * v;
                }
            }
        }
    }
    out
}

pub fn upsample_bicubic2_backward<T: Real>(dy: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
    let [c, n, h, w] = input_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let tx: Vec<([usize; 4], [T; 4])> = bicubic_taps(w)
        .into_iter()
        .map(|(i, w)| (i, w.map(T::lit)))
        .collect();
    let ty: Vec<([usize; 4], [T; 4])> = bicubic_taps(h)
        .into_iter()
        .map(|(i, w)| (i, w.map(T::lit)))
        .collect();
    let mut dx = Tensor::zeros(input_shape);
    let mut rows = vec![T::zero(); h * ow];
    for plane in 0..c * n {
        let g = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        rows.iter_mut().for_each(|v| *v = T::zero());
        for (oy, (idx, wt)) in ty.iter().enumerate() {
            let gr = &g[oy * ow..(oy + 1) * ow];
            for k in 0..4 {
                let r = &mut rows[idx[k] * ow..(idx[k] + 1) * ow];
                for (o, &v) in r.iter_mut().zip(gr) {
                    *o = *o + wt[k] * v;
                }
            }
        }
        let d = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let r = &rows[y * ow..(y + 1) * ow];
            let drow = &mut d[y * w..(y + 1) * w];
            for (ox, (idx, wt)) in tx.iter().enumerate() {
                for k in 0..4 {
                    drow[idx[k]] = drow[idx[k]] + wt[k] * r[ox];
                }
            }
        }
    }
    dx
}

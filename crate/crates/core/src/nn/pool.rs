use super::tensor::Tensor;
use crate::real::Real;

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the selected input element.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [c, n, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial size");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([c, n, oh, ow]);
    let mut argmax = Vec::with_capacity(c * n * oh * ow);
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..c * n {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[o] = src[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2_backward<T: Real>(
    dy: &Tensor<T>,
    argmax: &[u32],
    input_shape: [usize; 4],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in dy.data().iter().zip(argmax) {
        d[i as usize] = d[i as usize] + g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_spatial_size_and_picks_maxima() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]);
        let (y, arg) = max_pool2::<f64>(&x);
        assert_eq!(y.shape(), [1, 1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 7.0]);
        let dx = max_pool2_backward(
            &Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]),
            &arg,
            x.shape(),
        );
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}

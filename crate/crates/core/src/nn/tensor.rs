use crate::real::Real;

/// Dense activation tensor in channel-major `(C, N, H, W)` layout.
///
/// Keeping channels outermost lets a 3×3 convolution over the whole batch run
/// as a single GEMM and makes per-channel batch-norm reductions contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn batch(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per channel: `N·H·W`.
    pub fn channel_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Self {
        Self::from_vec(shape, self.data)
    }

    /// Extract the samples `range` along the batch axis.
    pub fn select_batch(&self, start: usize, len: usize) -> Self {
        let [c, n, h, w] = self.shape;
        assert!(start + len <= n);
        let plane = h * w;
        let mut out = Vec::with_capacity(c * len * plane);
        for ch in 0..c {
            let base = (ch * n + start) * plane;
            out.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Self::from_vec([c, len, h, w], out)
    }

    /// Copy `chunk` (shape `(C, len, H, W)`) into samples `start..start + len`.
    pub fn write_batch(&mut self, start: usize, chunk: &Tensor<T>) {
        let [c, n, h, w] = self.shape;
        let [cc, len, ch_h, ch_w] = chunk.shape;
        assert!(cc == c && ch_h == h && ch_w == w && start + len <= n);
        let plane = h * w;
        for ch in 0..c {
            let dst = (ch * n + start) * plane;
            let src = ch * len * plane;
            self.data[dst..dst + len * plane].copy_from_slice(&chunk.data[src..src + len * plane]);
        }
    }
}

use rand::Rng;

use crate::scalar::Scalar;

/// Dense row-major tensor. Rank is dynamic (vectors, matrices, and
/// channel-major image/audio grids all use this one type); shape checks are
/// the responsibility of the operations that combine tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::zero(); dims.iter().product()],
        }
    }

    pub fn full(dims: &[usize], value: S) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Rank-0 wrapper for a single value (used for losses).
    pub fn scalar(value: S) -> Self {
        Tensor {
            dims: vec![],
            data: vec![value],
        }
    }

    /// Uniform samples in `[lo, hi)`. Draws `f64`s from the RNG so the
    /// random stream is identical for every scalar type.
    pub fn rand_uniform<R: Rng>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| S::of(lo + (hi - lo) * rng.gen::<f64>()))
            .collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single value of a rank-0 (or one-element) tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.dims[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: S) {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.dims[1] + j] = v;
    }

    /// Contiguous row of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.dims[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.dims,
            dims
        );
        self.dims = dims.to_vec();
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Exact byte-level equality (same shape, same bit patterns).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Convert elementwise to another scalar type through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &self.dims,
            self.data.iter().map(|&x| T::of(x.as_f64())).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_has_right_shape_and_content() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!(t.dims(), &[2, 3]);
        assert_eq!(t.len(), 6);
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    #[should_panic(expected = "does not match dims")]
    fn from_vec_rejects_length_mismatch() {
        let _ = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn row_and_at2_agree() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(t.row(1), &[4., 5., 6.]);
        assert_eq!(t.at2(0, 2), 3.0);
    }

    #[test]
    fn rand_uniform_same_stream_for_f32_and_f64() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::rand_uniform(&[4], -1.0, 1.0, &mut r1);
        let b = Tensor::<f64>::rand_uniform(&[4], -1.0, 1.0, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
            assert!((-1.0..1.0).contains(y));
        }
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).reshaped(&[4]);
        assert_eq!(t.dims(), &[4]);
        assert_eq!(t.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn bit_eq_detects_differences() {
        let a = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]);
        let mut b = a.clone();
        assert!(a.bit_eq(&b));
        b.data_mut()[1] = f32::from_bits(2.0f32.to_bits() + 1);
        assert!(!a.bit_eq(&b));
    }
}

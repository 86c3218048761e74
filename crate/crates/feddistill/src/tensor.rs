//! Dense row-major tensors. Shape is dynamic; data is a flat `Vec<Scalar>`.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    /// Panics if `shape` does not describe `data.len()` elements.
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        let t = Self { shape, data };
        t.debug_check_finite();
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: Scalar) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor. Panics otherwise.
    pub fn as_scalar(&self) -> Scalar {
        assert!(self.is_scalar(), "expected scalar tensor, got shape {:?}", self.shape);
        self.data[0]
    }

    /// (rows, cols) of a rank-2 tensor. Panics otherwise.
    pub fn dim2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Tensor { shape, data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Scalar {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }

    /// Non-finite values are rejected in debug builds only; release builds
    /// trade the scan for speed.
    pub fn debug_check_finite(&self) {
        debug_assert!(
            self.data.iter().all(|v| v.is_finite()),
            "non-finite value in tensor of shape {:?}",
            self.shape
        );
    }
}

//! Dense tensors, the autodiff tape, and the optimizer.

pub(crate) mod kernels;
pub mod optim;
pub mod tape;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat row-major tensor. Values are immutable after construction except
/// through explicit operations (optimizer updates, gradient accumulation).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![v; numel])
    }

    /// Normal(0, std) initialization; draws in f64 so that f32 and f64 builds
    /// consume the generator identically.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0f64, std)
            .map_err(|e| Error::Config(format!("bad init std {std}: {e}")))?;
        let values = (0..numel).map(|_| T::from_f64(dist.sample(rng))).collect();
        Tensor::new(shape, values)
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient length {} vs tensor {}",
                delta.len(),
                self.values.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); self.values.len()]);
        for (g, &d) in grad.iter_mut().zip(delta.iter()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Row-major n×n attention-allowance plane; `true` means the query row may
/// attend to that column. Construction rejects empty rows, so softmax never
/// sees one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlane {
    n: usize,
    allowed: Box<[bool]>,
}

impl MaskPlane {
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if n == 0 || allowed.len() != n * n {
            return Err(Error::Shape(format!("mask wants {n}×{n} entries, got {}", allowed.len())));
        }
        for q in 0..n {
            if !allowed[q * n..(q + 1) * n].iter().any(|&a| a) {
                return Err(Error::Data(format!("mask row {q} allows no positions")));
            }
        }
        Ok(MaskPlane { n, allowed: allowed.into_boxed_slice() })
    }

    pub fn fully_allowed(n: usize) -> Self {
        MaskPlane { n, allowed: vec![true; n * n].into_boxed_slice() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n + key]
    }

    pub(crate) fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.n..(query + 1) * self.n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(Vec::new(), vec![]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(vec![2]).unwrap().with_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn mask_rejects_empty_row() {
        let mut allowed = vec![true; 9];
        for j in 0..3 {
            allowed[3 + j] = false;
        }
        assert!(MaskPlane::new(3, allowed).is_err());
    }
}

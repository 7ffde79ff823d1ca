//! Dense row-major tensors.
//!
//! Runtime training uses `f32`; the verification harness instantiates the
//! same code with `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {} values but data has {}",
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor::new(shape.to_vec(), vec![value; numel(shape)]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(vec![1], vec![value]).expect("valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for optimizers updating parameter leaves in place.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element-wise precision conversion (grad is dropped).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

//! Dense tensor values and reverse-mode differentiation.
//!
//! Tensors are flat row-major buffers with explicit dims. All numeric code is
//! generic over [`Real`] so the same graph runs in f32 (training default) or
//! f64 (gradient checks).

use std::fmt;

use num_traits::Float;

pub mod adam;
pub mod kernels;
pub mod tape;

pub use adam::{clip_global_norm, Adam, AdamConfig, LrSchedule};
pub use tape::{prefix_maxpool, ConvMask, Tape, Var};

/// Scalar element type for all tensor math.
pub trait Real:
    Float + num_traits::FromPrimitive + num_traits::ToPrimitive + fmt::Debug + Send + Sync + 'static
{
    /// Lossy conversion from a literal. Panics only on NaN literals.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("value not representable as f64")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("value not representable as f32")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Errors raised by tensor construction and tape operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible; names both shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Buffer length does not match the product of dims.
    DataLength { expected: usize, got: usize },
    /// A softmax row had every entry masked.
    FullyMaskedRow { row: usize },
    /// backward() was called on a non-scalar.
    NotScalar { dims: Vec<usize> },
    /// Convolution kernels must have odd width.
    EvenKernelWidth { width: usize },
    /// Index outside the valid range.
    OutOfBounds {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    /// Cross-entropy saw a target id outside the vocabulary.
    TargetOutOfRange { target: usize, classes: usize },
    /// Every position of a loss was ignored.
    AllIgnored,
    /// Axis permutation is not a valid reordering.
    BadPermutation { perm: Vec<usize>, rank: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match dims (expected {expected})")
            }
            TensorError::FullyMaskedRow { row } => {
                write!(f, "softmax row {row} is fully masked")
            }
            TensorError::NotScalar { dims } => {
                write!(f, "backward requires a scalar loss, got dims {dims:?}")
            }
            TensorError::EvenKernelWidth { width } => {
                write!(f, "convolution kernel width must be odd, got {width}")
            }
            TensorError::OutOfBounds { what, got, limit } => {
                write!(f, "{what} out of bounds: {got} (limit {limit})")
            }
            TensorError::TargetOutOfRange { target, classes } => {
                write!(f, "target id {target} outside vocabulary of size {classes}")
            }
            TensorError::AllIgnored => write!(f, "loss has no non-ignored positions"),
            TensorError::BadPermutation { perm, rank } => {
                write!(f, "{perm:?} is not a permutation of 0..{rank}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(dims: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![F::zero(); n],
        }
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            dims: vec![],
            data: vec![x],
        }
    }

    pub fn filled(dims: Vec<usize>, x: F) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![x; n],
        }
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Scalar extraction; panics if not a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        assert_eq!(self.dims, other.dims);
        let mut m = F::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        m
    }

    pub fn map_to<G: Real>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
        }
    }
}

/// Boolean mask with tensor dims, used by attention and loss selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub dims: Vec<usize>,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Vec<usize>, data: Vec<bool>) -> Result<Self, TensorError> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Mask { dims, data })
    }

    pub fn all_true(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Mask {
            dims,
            data: vec![true; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_checks_data_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                expected: 6,
                got: 5
            }
        );
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(2.5f64);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 2.5);
        assert_eq!(t.rank(), 0);
    }

    #[test]
    fn mask_counts() {
        let m = Mask::new(vec![2, 2], vec![true, false, true, true]).unwrap();
        assert_eq!(m.count_true(), 3);
    }
}

//! Hand-written CNN: layers with explicit backward passes, the error-detector
//! architecture, Adam training, finite-difference gradient checks and the
//! NGCK checkpoint format.
//!
//! Activations are `N x H x W x C` (batch, frequency, time, channel),
//! row-major. Convolutions lower to one matrix product through im2col.

mod checkpoint;
mod detector;
mod gradcheck;
mod layers;
mod sequential;
mod train;

use std::fmt::Debug;

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointMeta, NamedTensor, NGCK_MAGIC, NGCK_VERSION};
pub use detector::{bce_grad, bce_loss, sigmoid, ArchConfig, ErrorDetector, BCE_EPS, FEATURE_MAP_SHAPES};
pub use gradcheck::{check_sequential, detector_grad_check, grad_check, linear_head_grad_check, GradCheckConfig, GradCheckReport, KindReport};
pub use layers::{BatchNorm, Conv2d, Dense, Dropout, Layer, LayerKind, Param};
pub use sequential::{Adam, AdamConfig, Mode, Sequential};
pub use train::{
    evaluate, predict_source, train, EpochStats, PatchBatchSource, TrainConfig, TrainOutcome,
};

/// Floating-point element type of a network.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c`, every matrix row-major;
    /// `op(a)` is `m x k`, `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(trans_a: bool, trans_b: bool, m: usize, n: usize, k: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // logical (rows x cols); stored transposed when `trans`
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(trans_a: bool, trans_b: bool, m: usize, n: usize, k: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let (rsb, csb) = strides(trans_b, k, n);
                // SAFETY: the asserts above bound every index the kernel touches
                // for these shapes and strides, and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor".into(),
                expected: dims,
                actual: vec![data.len()],
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![T::zero(); n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

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

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape".into(),
                expected: dims,
                actual: self.dims,
            });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }
}

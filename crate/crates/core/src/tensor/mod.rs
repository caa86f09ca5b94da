//! Minimal dense tensor engine: rank-4 values, a tape-based autodiff graph
//! with exactly the operations the detector's forward pass needs, SGD with
//! momentum and weight decay, and the binary checkpoint format.

mod checkpoint;
mod conv;
mod graph;
mod params;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_file, save_checkpoint, save_checkpoint_file,
    CHECKPOINT_MAGIC,
};
pub use graph::{Graph, NodeId, RowRef};
pub use params::{sgd_step, xavier_init, ParamId, ParamStore, Parameter, SgdConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of a rank-4 tensor in `(batch, channels, height, width)` order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    /// Scalars are `(1,1,1,1)` tensors.
    pub fn scalar() -> Self {
        Shape4::new(1, 1, 1, 1)
    }

    /// Row-vector layout used for per-anchor rows: `(rows, cols, 1, 1)`.
    pub fn rows(rows: usize, cols: usize) -> Self {
        Shape4::new(rows, cols, 1, 1)
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Row-major flat index.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}x{}x{}x{})", self.n, self.c, self.h, self.w)
    }
}

/// A dense rank-4 tensor. Values are stored row-major in `(n, c, h, w)`
/// order; gradients live in the graph nodes, not here.
#[derive(Clone, Debug)]
pub struct Tensor<F: Scalar> {
    pub shape: Shape4,
    pub values: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor {
            shape,
            values: vec![F::zero(); shape.count()],
        }
    }

    pub fn filled(shape: Shape4, v: F) -> Self {
        Tensor {
            shape,
            values: vec![v; shape.count()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: Shape4::scalar(),
            values: vec![v],
        }
    }

    pub fn from_vec(shape: Shape4, values: Vec<F>) -> Result<Self> {
        if values.len() != shape.count() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_string(),
                rhs: format!("{} values", values.len()),
            });
        }
        Ok(Tensor { shape, values })
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> F {
        self.values[self.shape.at(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut F {
        &mut self.values[self.shape.at(n, c, h, w)]
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.shape.count(), 1);
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

//! Dense double-precision tensors of rank 0, 1 or 2.
//!
//! A [`Tensor`] is an immutable value: its storage is reference counted so
//! cloning is cheap and tensors can be shared across threads. A tensor produced
//! by a recording [`Tape`](crate::autodiff::Tape) carries the id of the node that
//! produced it; tensors without a node id are constants.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn from_dims(dims: &[usize]) -> Result<Shape> {
        match *dims {
            [] => Ok(Shape::Scalar),
            [n] => Ok(Shape::Vector(n)),
            [r, c] => Ok(Shape::Matrix(r, c)),
            _ => Err(Error::usage(format!(
                "tensors have rank at most 2, got dims {dims:?}"
            ))),
        }
    }

    pub fn rank(self) -> usize {
        match self {
            Shape::Scalar => 0,
            Shape::Vector(_) => 1,
            Shape::Matrix(..) => 2,
        }
    }

    pub fn dims(self) -> Vec<usize> {
        match self {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }

    /// Number of stored values.
    pub fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "[]"),
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}, {c}]"),
        }
    }
}

/// Handle of a node on a [`Tape`](crate::autodiff::Tape).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if shape.len() != data.len() {
            return Err(Error::usage(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Shape::Scalar,
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: Shape::Vector(data.len()),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor {
            shape,
            data: Arc::new(vec![0.0; shape.len()]),
            node: None,
        }
    }

    pub fn identity(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: Shape::Matrix(n, n),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Value of a scalar or single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim("item", self.shape, Shape::Scalar));
        }
        Ok(self.data[0])
    }

    /// Row `r` of a matrix.
    pub fn row(&self, r: usize) -> &[f64] {
        match self.shape {
            Shape::Matrix(rows, cols) => {
                assert!(r < rows, "row {r} out of range for {}", self.shape);
                &self.data[r * cols..(r + 1) * cols]
            }
            _ => panic!("row() on non-matrix tensor of shape {}", self.shape),
        }
    }

    /// Same values, no tape node.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Mutable access to the values, copying the storage if it is shared.
    /// Drops the node id since the tensor no longer matches any recorded value.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Tensor {
        self.node = Some(node);
        self
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.len(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }
}

/// Equality of shape and values; node ids are ignored.
impl PartialEq for Tensor {
    fn eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Bitwise equality of two tensors (distinguishes `-0.0` from `0.0`, equates NaNs).
pub fn bit_identical(a: &Tensor, b: &Tensor) -> bool {
    a.shape == b.shape
        && a.data
            .iter()
            .zip(b.data.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

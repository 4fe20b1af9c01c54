//! Dense f32 tensors and a define-by-run reverse-mode autodiff tape.

mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, Reduction, Var};
pub use kernels::softmax_cross_entropy;

use crate::error::{Error, Result};

/// Row-major dense array of `f32` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                axis: "len",
                expected,
                found: data.len(),
            });
        }
        if shape.contains(&0) {
            return Err(Error::validation(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f32>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                axis: "len",
                expected: self.data.len(),
                found: n,
            });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Extents of a rank-4 `[N, C, H, W]` tensor.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Dimension {
                op,
                axis: "rank",
                expected: 4,
                found: self.shape.len(),
            }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[a, b] => Ok([a, b]),
            _ => Err(Error::Dimension {
                op,
                axis: "rank",
                expected: 2,
                found: self.shape.len(),
            }),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::validation("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Dimension {
                    op: "stack",
                    axis: "item",
                    expected: first.numel(),
                    found: t.numel(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Slice `index` along the leading axis.
    pub fn item(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }
}

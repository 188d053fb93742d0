//! Dense row-major `f32` tensors of rank up to four.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// A dense tensor. Image tensors use batch × channel × height × width layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!("shape {shape:?} holds {numel} values, got {}", data.len())));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of {} values",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} values", self.data.len());
        self.data[0]
    }

    /// Unpacks a rank-4 shape.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dimension(format!("expected a rank-4 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what}: value {} at flat index {pos}", self.data[pos])));
        }
        if let Some(g) = &self.grad {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{what} gradient: value {} at flat index {pos}", g[pos])));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps the listed indices along `axis`, in the order given.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::Dimension(format!("axis {axis} out of range for shape {:?}", self.shape)));
        }
        let dim = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::Dimension(format!("index {bad} out of range for axis {axis} of size {dim}")));
        }
        if indices.is_empty() {
            return Err(Error::Dimension(format!("empty selection on axis {axis}")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * dim + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Tensor::new(shape, data)
    }

    /// Zeroes the listed indices along `axis`.
    pub fn zero_along(&mut self, axis: usize, indices: &[usize]) {
        let dim = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        for o in 0..outer {
            for &i in indices {
                let start = (o * dim + i) * inner;
                self.data[start..start + inner].fill(0.0);
            }
        }
    }

    /// Stacks same-shaped tensors along the leading (batch) axis.
    pub fn cat_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Dimension("cannot batch zero tensors".into()))?;
        let inner = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
        for p in parts {
            if &p.shape[1..] != inner {
                return Err(Error::Dimension(format!("batch parts disagree: {:?} vs {:?}", first.shape, p.shape)));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Tensor::new(shape, data)
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Dimension(format!("rank must be 1..={MAX_RANK}, got shape {shape:?}")));
    }
    if shape.contains(&0) {
        return Err(Error::Dimension(format!("zero-sized dimension in shape {shape:?}")));
    }
    Ok(())
}

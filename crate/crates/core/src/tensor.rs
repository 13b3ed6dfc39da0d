//! Dense row-major tensors and trainable parameters.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension; 1 for scalars.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension; 1 for scalars.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::dim(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Appends rows to a 2-D tensor in place.
    pub fn push_rows(&mut self, rows: &[S]) -> Result<()> {
        let c = self.cols();
        if self.shape.len() != 2 || !rows.len().is_multiple_of(c) {
            return Err(Error::dim(format!(
                "cannot append {} values to {:?}",
                rows.len(),
                self.shape
            )));
        }
        self.data.extend_from_slice(rows);
        self.shape[0] += rows.len() / c;
        Ok(())
    }

    /// Keeps the first `n` rows of a 2-D tensor.
    pub fn truncate_rows(&mut self, n: usize) {
        if n < self.rows() {
            let c = self.cols();
            self.data.truncate(n * c);
            self.shape[0] = n;
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| T::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{op} produced a non-finite value")))
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:.4?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// A tensor that optimizers may update, with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub requires_grad: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        Param {
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn frozen(value: Tensor<S>) -> Self {
        Param {
            value,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<S>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                self.value.shape()
            )));
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Param<T> {
        Param {
            value: self.value.cast(),
            grad: self.grad.as_ref().map(Tensor::cast),
            requires_grad: self.requires_grad,
        }
    }
}

/// Implemented by every model so optimizers, checkpoints and gradient checks
/// can enumerate parameters in a stable order.
pub trait ParamVisitor<S: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<S>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>));

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| {
            if p.requires_grad {
                n += p.value.numel();
            }
        });
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.grad = None);
    }
}

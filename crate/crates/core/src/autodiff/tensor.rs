use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` array with a gradient buffer of the same length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

/// Serialized form: shape and values only. Gradients are never persisted.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor::new(&r.shape, r.values)
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr { shape: t.shape, values: t.values }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must be non-empty with positive extents"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            grad: vec![0.0; numel],
            values,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(&[n, d], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.values.len() {
            self.grad = vec![0.0; self.values.len()];
        }
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.values.len(), 0.0);
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let buf = self.grad_mut();
        assert_eq!(buf.len(), g.len(), "gradient length mismatch");
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = *self.shape.last().unwrap();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = *self.shape.last().unwrap();
        &mut self.values[i * d..(i + 1) * d]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Population mean and standard deviation over all entries.
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.values)
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
        let t = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.grad().len(), 6);
        assert!(t.grad().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_grad_resets() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad(), &[2.0, 4.0, 6.0]);
        t.zero_grad();
        assert_eq!(t.grad(), &[0.0; 3]);
    }
}

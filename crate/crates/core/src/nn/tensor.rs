use crate::error::{Error, Result};

/// Row-major `f64` array with an explicit shape.
///
/// Layers act on the last dimension; all leading dimensions are flattened
/// into rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != values.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// A single row of shape `[1, n]`.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("ragged rows"));
        }
        let values = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), width], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Size of the last dimension.
    pub fn width(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    /// Number of rows once leading dimensions are flattened.
    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.width();
        &self.values[r * w..(r + 1) * w]
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_owned()))
        }
    }

    pub(crate) fn with_width(&self, width: usize, values: Vec<f64>) -> Tensor {
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("non-empty shape") = width;
        Tensor { shape, values }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_counts() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn rows_flatten_leading_dims() {
        let t = Tensor::zeros(vec![2, 3, 4]);
        assert_eq!(t.rows(), 6);
        assert_eq!(t.width(), 4);
    }

    #[test]
    fn finite_check() {
        let t = Tensor::row_vector(vec![1.0, f64::NAN]);
        assert!(t.ensure_finite("x").is_err());
    }
}

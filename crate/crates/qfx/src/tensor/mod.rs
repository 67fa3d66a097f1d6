//! Dense tensor container and the neural-network operator set, in float and
//! fake-quantized form.

mod ops;

pub use ops::{
    add, batchnorm2d, batchnorm_fold, conv2d, conv2d_quant, global_avgpool, linear, maxpool2d,
    quantize_tensor, relu, relu_quant, BnParams, ConvParams, QuantConfig,
};
pub(crate) use ops::im2col_into;

use crate::error::{QfxError, Result};

/// Dense N-dimensional array of f64 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wrap a row-major buffer; the length must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(QfxError::ShapeMismatch {
                op: "Tensor::from_vec".into(),
                detail: format!("data length {} != shape product {expect}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if self.data.len() != expect {
            return Err(QfxError::ShapeMismatch {
                op: "Tensor::reshape".into(),
                detail: format!("element count {} != new shape product {expect}", self.data.len()),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Error if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for &x in &self.data {
            if !x.is_finite() {
                return Err(QfxError::NonFinite {
                    context: context.into(),
                    value: x,
                });
            }
        }
        Ok(())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_count() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert!(r.reshape(&[7]).is_err());
    }

    #[test]
    fn check_finite_catches_nan() {
        let mut t = Tensor::zeros(&[4]);
        assert!(t.check_finite("test").is_ok());
        t.data_mut()[2] = f64::NAN;
        assert!(t.check_finite("test").is_err());
    }
}

//! Dense row-major f32 tensors.
//!
//! Feature maps are 5-D `[batch, channels, slices, height, width]`; the last
//! axis varies fastest. Volumes on disk are 3-D `(x, y, z)` with z fastest,
//! which maps onto the canonical view with x as the slice axis.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    /// Leaves registered on a tape with this flag set receive a gradient.
    pub requires_grad: bool,
    /// Populated by the trainer after a backward pass; `None` until then.
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        assert!(fan_in > 0, "fan_in must be positive");
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            *v = rng.gen_range(-bound..bound);
        }
        t
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

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }
}

/// Row-major strides for `shape` (last axis stride 1).
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Errors unless every value in `data` is finite.
pub fn check_finite(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn kaiming_bound_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::kaiming_uniform(&[4, 2, 1, 3, 3], 2 * 9, &mut rng);
        let bound = (6.0f64 / 18.0).sqrt() as f32;
        assert!(a.data().iter().all(|v| v.abs() < bound));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let b = Tensor::kaiming_uniform(&[4, 2, 1, 3, 3], 18, &mut rng2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn finite_check_catches_nan_and_inf() {
        assert!(check_finite(&[1.0, -2.0], "t").is_ok());
        assert!(matches!(
            check_finite(&[1.0, f32::NAN], "t"),
            Err(Error::NonFinite { op: "t" })
        ));
        assert!(check_finite(&[f32::INFINITY], "t").is_err());
    }
}

//! Dense rank-4 tensors in batch/height/width/channel order.
//!
//! All layer I/O in this crate flows through [`Tensor`]. Data is contiguous
//! `f32`, batch-major, then row, then column, then channel, so per-pixel
//! channel vectors are the innermost contiguous unit.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    /// Zero-filled tensor of the given (batch, height, width, channels) shape.
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::parameter(format!(
                "tensor data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.shape[1] + h) * self.shape[2] + w) * self.shape[3] + c
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> f32 {
        self.data[self.index(n, h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, v: f32) {
        let i = self.index(n, h, w, c);
        self.data[i] = v;
    }

    /// Reinterpret as (batch, 1, 1, features) without copying. The spatial
    /// dims fold into the feature axis, matching the contiguous layout.
    pub fn flattened(&self) -> Tensor {
        let features = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [self.shape[0], 1, 1, features],
            data: self.data.clone(),
        }
    }

    /// One sample's slice of the underlying data.
    pub fn sample(&self, n: usize) -> &[f32] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_innermost() {
        let mut t = Tensor::zeros([2, 3, 4, 5]);
        t.set(1, 2, 3, 4, 7.0);
        assert_eq!(t.index(0, 0, 0, 1), 1);
        assert_eq!(t.index(0, 0, 1, 0), 5);
        assert_eq!(t.index(0, 1, 0, 0), 20);
        assert_eq!(t.index(1, 0, 0, 0), 60);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
        assert_eq!(t.data()[119], 7.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec([1, 2, 2, 1], vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec([1, 2, 2, 1], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn flatten_preserves_order() {
        let t = Tensor::from_vec([1, 2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let f = t.flattened();
        assert_eq!(f.shape(), [1, 1, 1, 8]);
        assert_eq!(f.data(), t.data());
    }
}

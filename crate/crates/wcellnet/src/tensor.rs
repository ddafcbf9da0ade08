//! Dense row-major f32 tensor, the universal value type of the engine.
//!
//! Tensors are plain data: shape plus a flat buffer. All differentiable
//! structure lives in [`crate::graph`]; a `Tensor` itself carries no
//! gradient and is immutable once produced by an operation.

use crate::error::{Error, Result};

/// Maximal rank used anywhere: (batch, frame, channel, height, width).
pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// A tensor of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {}", shape.len(), MAX_RANK);
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// A tensor filled with a constant.
    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Wraps an existing buffer. Fails if the element count does not
    /// match the shape or the rank exceeds [`MAX_RANK`].
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if shape.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank {} exceeds maximum {}",
                shape.len(),
                MAX_RANK
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Single-element tensor holding a scalar value.
    pub fn scalar(value: f32) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Interprets the tensor as (n, c, h, w), right-padding the shape
    /// with leading 1s. Fails for rank > 4.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        if self.rank() > 4 {
            return Err(Error::shape(format!("expected rank <= 4, got {:?}", self.shape)));
        }
        let mut d = [1usize; 4];
        let off = 4 - self.rank();
        for (i, &s) in self.shape.iter().enumerate() {
            d[off + i] = s;
        }
        Ok(d)
    }

    /// Extracts channels `[lo, hi)` of an (n, c, h, w) tensor.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if lo >= hi || hi > c {
            return Err(Error::arg(format!(
                "channel slice [{lo}, {hi}) out of range for {c} channels"
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (hi - lo) * plane);
        for s in 0..n {
            let base = s * c * plane;
            out.extend_from_slice(&self.data[base + lo * plane..base + hi * plane]);
        }
        Tensor::from_vec(&[n, hi - lo, h, w], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
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
    fn rank_limit_enforced() {
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn slice_channels_roundtrip() {
        // 1 sample, 3 channels of 2x2
        let t = Tensor::from_vec(
            &[1, 3, 2, 2],
            (0..12).map(|x| x as f32).collect(),
        )
        .unwrap();
        let a = t.slice_channels(0, 1).unwrap();
        let b = t.slice_channels(1, 3).unwrap();
        assert_eq!(a.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(b.data(), &(4..12).map(|x| x as f32).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn dims4_pads_leading() {
        let t = Tensor::zeros(&[4, 5]);
        assert_eq!(t.dims4().unwrap(), [1, 1, 4, 5]);
    }
}

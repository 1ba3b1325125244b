//! Dense `f32` tensor in row-major order.
//!
//! Image tensors are channel-major `C×H×W` with no batch axis. Per-pixel
//! vector fields (probabilities, displacements, offsets) are pixel-major
//! `H×W×K` so that one pixel's components sit next to each other.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let dims = dims.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f32) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self { dims, data: vec![value; n] }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        Self { dims, data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(value: f32) -> Self {
        Self { dims: Vec::new(), data: vec![value] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!("expected C×H×W, got {:?}", self.dims))),
        }
    }

    /// `(H, W)` of a rank-2 tensor.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(format!("expected H×W, got {:?}", self.dims))),
        }
    }

    /// `(H, W)` of an `H×W×k` field, checking the trailing extent.
    pub fn field_hw(&self, k: usize) -> Result<(usize, usize)> {
        match self.dims[..] {
            [h, w, kk] if kk == k => Ok((h, w)),
            _ => Err(Error::shape(format!("expected H×W×{k}, got {:?}", self.dims))),
        }
    }

    /// Channel plane `c` of a `C×H×W` tensor.
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.dims[1] * self.dims[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn expect_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("dims {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        self.expect_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Concatenate `C×H×W` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?
            .chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!("concat spatial {ph}×{pw} vs {h}×{w}")));
            }
            c_total += c;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { dims: vec![c_total, h, w], data })
    }
}

/// Largest relative error `|a−b| / max(|b|, floor)` between two tensors.
pub fn max_rel_diff(a: &Tensor, b: &Tensor, floor: f32) -> Result<f32> {
    a.expect_same_dims(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f32, |m, (&x, &y)| m.max((x - y).abs() / y.abs().max(floor))))
}

/// Normwise relative error `max|a−b| / max|b|`; zero when both are zero.
pub fn norm_rel_diff(a: &Tensor, b: &Tensor) -> Result<f32> {
    let d = a.max_abs_diff(b)?;
    let scale = b.max_abs();
    Ok(if d == 0.0 { 0.0 } else { d / scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_rel_diff_scales_by_the_reference() {
        let a = Tensor::new([3], vec![1.0, 0.0, -4.0]).unwrap();
        let b = Tensor::new([3], vec![1.0, 0.001, -4.0]).unwrap();
        assert!((norm_rel_diff(&b, &a).unwrap() - 0.001 / 4.0).abs() < 1e-9);
        assert_eq!(norm_rel_diff(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rank_zero_holds_one_element() {
        let t = Tensor::new(Vec::<usize>::new(), vec![3.5]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.rank(), 0);
    }

    #[test]
    fn zero_extent_is_empty() {
        let t = Tensor::zeros([0, 4]);
        assert!(t.is_empty());
    }

    #[test]
    fn concat_stacks_channels() {
        let a = Tensor::full([1, 2, 2], 1.0);
        let b = Tensor::full([2, 2, 2], 2.0);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[3, 2, 2]);
        assert_eq!(c.at3(0, 1, 1), 1.0);
        assert_eq!(c.at3(2, 0, 0), 2.0);
    }
}

//! Dense 4-D `f64` tensors in `(batch, channel, height, width)` layout.

use crate::error::{CodError, Result};

/// Shape of a 4-D tensor: `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(CodError::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(shape));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(bi, ci, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial size `(height, width)`.
    pub fn hw(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((b * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(b, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `h*w` plane for one `(batch, channel)` pair.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CodError::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `[start, start+len)` as a new tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [b, c, h, w] = self.shape;
        if start + len > c {
            return Err(CodError::Shape(format!(
                "channel slice {start}..{} out of {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Self {
            shape: [b, len, h, w],
            data,
        })
    }

    /// Concatenation along the channel axis.
    pub fn cat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| CodError::Shape("concatenation of zero tensors".into()))?;
        let [b, _, h, w] = first.shape;
        for p in parts {
            let [pb, _, ph, pw] = p.shape;
            if (pb, ph, pw) != (b, h, w) {
                return Err(CodError::Shape(format!(
                    "channel concat of {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for p in parts {
                let c = p.shape[1];
                data.extend_from_slice(&p.data[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        Ok(Self {
            shape: [b, total, h, w],
            data,
        })
    }

    /// One batch item as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, b: usize) -> Self {
        let [_, c, h, w] = self.shape;
        let n = c * h * w;
        Self {
            shape: [1, c, h, w],
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    pub fn stack_batch(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| CodError::Shape("stacking zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut b = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(CodError::Shape(format!(
                    "batch stack of {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            b += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [b, c, h, w],
            data,
        })
    }
}

#[inline]
pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn narrow_and_cat_round_trip() {
        let t = Tensor::from_fn([2, 5, 3, 2], |b, c, y, x| (b * 100 + c * 10 + y * 2 + x) as f64);
        let a = t.narrow_channels(0, 2).unwrap();
        let b = t.narrow_channels(2, 3).unwrap();
        assert_eq!(Tensor::cat_channels(&[&a, &b]).unwrap(), t);
        assert_eq!(b.at(1, 0, 2, 1), t.at(1, 2, 2, 1));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }
}

use std::fmt;

use crate::error::{Error, Result};

/// Dense rank-4 array laid out as (batch, channels, height, width), row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4{:?}", self.dims)
    }
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        assert!(
            dims.iter().all(|&d| d >= 1),
            "tensor dims must be positive: {dims:?}"
        );
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("tensor dims must be positive: {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                format!("dims {dims:?} (len {len})"),
                format!("buffer len {}", data.len()),
            ));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let [n, c, h, w] = dims;
        let mut idx = 0;
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[idx] = f(ni, ci, y, x);
                        idx += 1;
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }
    /// Number of spatial positions per channel map.
    #[inline]
    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }
    /// Elements per batch sample.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.plane()
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// One channel plane of one sample.
    pub fn plane_of(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (n * self.dims[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_of_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let start = (n * self.dims[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copy of sample `n` as a batch-1 tensor.
    pub fn sample_tensor(&self, n: usize) -> Tensor4 {
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.sample(n).to_vec(),
        }
    }

    /// Stack batch-1 (or batch-k) tensors along the batch axis.
    pub fn stack(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if p.dims[1..] != [c, h, w] {
                return Err(Error::shape(format!("{:?}", first.dims), format!("{:?}", p.dims)));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Tensor4::from_vec([n, c, h, w], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        self.expect_dims(other)?;
        Ok(Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.expect_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.expect_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_dims(&self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("{:?}", self.dims), format!("{:?}", other.dims)));
        }
        Ok(())
    }

    /// Per-channel vector stored as (1, C, 1, 1).
    pub fn channel_vector(values: Vec<f64>) -> Tensor4 {
        let c = values.len();
        Tensor4 {
            dims: [1, c, 1, 1],
            data: values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor4::from_fn([2, 3, 4, 5], |n, c, y, x| (n * 1000 + c * 100 + y * 10 + x) as f64);
        assert_eq!(t.get(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.offset(1, 0, 0, 0)], 1000.0);
        assert_eq!(t.plane_of(0, 1)[0], 100.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(matches!(
            Tensor4::from_vec([1, 1, 2, 2], vec![0.0; 3]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor4::from_vec([1, 0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn stack_concatenates_batches() {
        let a = Tensor4::filled([1, 2, 2, 2], 1.0);
        let b = Tensor4::filled([2, 2, 2, 2], 2.0);
        let s = Tensor4::stack(&[a, b]).unwrap();
        assert_eq!(s.dims(), [3, 2, 2, 2]);
        assert_eq!(s.sample(2)[0], 2.0);
        let bad = Tensor4::zeros([1, 3, 2, 2]);
        assert!(Tensor4::stack(&[s, bad]).is_err());
    }
}

use std::fmt;

use crate::error::{Error, Result};

/// Real scalar field on an `height × width` pixel grid with unit spacing.
#[derive(Clone, PartialEq)]
pub struct Field2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Field2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Field2D[{}x{}]", self.height, self.width)
    }
}

impl Field2D {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1, "field dims must be positive");
        Field2D {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("field dims must be positive: {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(
                format!("field {height}x{width}"),
                format!("buffer len {}", data.len()),
            ));
        }
        Ok(Field2D { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Field2D { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
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
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field2D {
        Field2D {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field2D, f: impl Fn(f64, f64) -> f64) -> Result<Field2D> {
        self.expect_dims(other)?;
        Ok(Field2D {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_dims(&self, other: &Field2D) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                format!("field {:?}", self.dims()),
                format!("field {:?}", other.dims()),
            ));
        }
        Ok(())
    }

    /// Circular shift: the value at `(y, x)` moves to `(y + dy, x + dx)` modulo the grid.
    pub fn roll(&self, dy: isize, dx: isize) -> Field2D {
        let (h, w) = (self.height as isize, self.width as isize);
        Field2D::from_fn(self.height, self.width, |y, x| {
            let sy = (y as isize - dy).rem_euclid(h) as usize;
            let sx = (x as isize - dx).rem_euclid(w) as usize;
            self.get(sy, sx)
        })
    }

    /// Zero-padded copy on a `height × width` grid with the original at the origin.
    pub fn zero_pad(&self, height: usize, width: usize) -> Field2D {
        let mut out = Field2D::zeros(height, width);
        for y in 0..self.height.min(height) {
            for x in 0..self.width.min(width) {
                out.set(y, x, self.get(y, x));
            }
        }
        out
    }

    /// Top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> Field2D {
        Field2D::from_fn(height, width, |y, x| self.get(y, x))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Binary field with ones where `self > threshold`.
    pub fn threshold(&self, threshold: f64) -> Field2D {
        self.map(|v| if v > threshold { 1.0 } else { 0.0 })
    }
}

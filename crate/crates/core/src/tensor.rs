use std::fmt;

use crate::{Error, Real, Result};

/// Extent of a `(T, B, C, H, W)` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape5 {
    pub t: usize,
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub const fn new(t: usize, b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { t, b, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.t * self.b * self.c * self.h * self.w
    }

    /// Elements in one `(C, H, W)` frame.
    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Elements in one timestep slice `(B, C, H, W)`.
    pub fn step_len(&self) -> usize {
        self.b * self.frame_len()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn feature(&self) -> FeatureShape {
        FeatureShape::new(self.c, self.h, self.w)
    }

    pub fn with_feature(&self, f: FeatureShape) -> Self {
        Self::new(self.t, self.b, f.c, f.h, f.w)
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.t, self.b, self.c, self.h, self.w)
    }
}

/// Per-sample feature map extent `(C, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Formats as the tables do: `512x16x16`.
impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

impl std::str::FromStr for FeatureShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .trim()
            .split(['x', 'X', '×'])
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad shape `{s}`: {e}")))?;
        match dims.as_slice() {
            &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Self::new(c, h, w)),
            _ => Err(Error::Config(format!("bad shape `{s}`: expected CxHxW"))),
        }
    }
}

/// Dense real tensor, `(T, B, C, H, W)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Shape5,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: Shape5) -> Self {
        Self {
            shape,
            data: vec![F::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape5, value: F) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<F>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} elements do not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    /// One `(C, H, W)` frame at timestep `t`, batch index `b`.
    pub fn frame(&self, t: usize, b: usize) -> &[F] {
        let n = self.shape.frame_len();
        let start = (t * self.shape.b + b) * n;
        &self.data[start..start + n]
    }

    pub fn frame_mut(&mut self, t: usize, b: usize) -> &mut [F] {
        let n = self.shape.frame_len();
        let start = (t * self.shape.b + b) * n;
        &mut self.data[start..start + n]
    }

    /// The `(B, C, H, W)` slice at timestep `t`.
    pub fn step(&self, t: usize) -> &[F] {
        let n = self.shape.step_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [F] {
        let n = self.shape.step_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {} to {}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element type, e.g. `f32` weights into an `f64` oracle run.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }
}

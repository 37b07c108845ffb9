//! Dense rank-4 latent container.

use std::fmt;

use crate::error::{Error, Result};

/// Storage precision a tensor was loaded from (or should be written as).
/// Arithmetic is always carried out in `f32` or wider.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Dtype {
    #[default]
    F32,
    F16,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F16 => "<f2",
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" | "<f4" => Ok(Dtype::F32),
            "f16" | "float16" | "<f2" => Ok(Dtype::F16),
            other => Err(Error::invalid(format!(
                "unknown dtype {other:?} (expected f32 or f16)"
            ))),
        }
    }
}

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.plane_len()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// Row-major multi-index of a flat offset.
    pub fn unravel(&self, mut flat: usize) -> [usize; 4] {
        let x = flat % self.width;
        flat /= self.width;
        let y = flat % self.height;
        flat /= self.height;
        let c = flat % self.channels;
        [flat / self.channels, c, y, x]
    }

    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    /// Parses `BxCxHxW`, e.g. `1x4x128x128`.
    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split(['x', 'X', ','])
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("cannot parse shape {s:?}")))?;
        match dims[..] {
            [b, c, h, w] => Ok(Shape::new(b, c, h, w)),
            _ => Err(Error::invalid(format!(
                "shape {s:?} must have four dimensions"
            ))),
        }
    }
}

/// A latent `x ∈ R^{B×C×H×W}`, contiguous in row-major `(B, C, H, W)` order.
///
/// Every value is finite and every dimension is at least one. Transformations
/// never mutate a tensor in place; they return a new one.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f32>,
    source_dtype: Dtype,
}

impl LatentTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        Self::with_dtype(shape, data, Dtype::F32)
    }

    pub fn with_dtype(shape: Shape, data: Vec<f32>, source_dtype: Dtype) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::invalid(format!(
                "every dimension must be >= 1, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape {
                expected: format!("{} values for {shape}", shape.len()),
                got: format!("{} values", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: shape.unravel(i).to_vec(),
                value: data[i],
            });
        }
        Ok(LatentTensor {
            shape,
            data,
            source_dtype,
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.len()])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f32) -> Result<Self> {
        let data = (0..shape.len()).map(|i| f(shape.unravel(i))).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn source_dtype(&self) -> Dtype {
        self.source_dtype
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.offset(b, c, y, x)]
    }

    /// All `C·H·W` values of sample `b`.
    pub fn sample(&self, b: usize) -> &[f32] {
        let n = self.shape.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let n = self.shape.plane_len();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    /// Sample `b` as a standalone batch of one.
    pub fn select_sample(&self, b: usize) -> LatentTensor {
        LatentTensor {
            shape: Shape {
                batch: 1,
                ..self.shape
            },
            data: self.sample(b).to_vec(),
            source_dtype: self.source_dtype,
        }
    }

    /// Builds a tensor of the same shape and dtype from transformed data.
    /// Fails if the data length changed or a value is not finite.
    pub fn with_data(&self, data: Vec<f32>) -> Result<LatentTensor> {
        Self::with_dtype(self.shape, data, self.source_dtype)
    }

    pub(crate) fn with_data_unchecked(&self, data: Vec<f32>) -> LatentTensor {
        debug_assert_eq!(data.len(), self.data.len());
        LatentTensor {
            shape: self.shape,
            data,
            source_dtype: self.source_dtype,
        }
    }
}

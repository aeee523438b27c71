//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::{Debug, Display};

use crate::error::{Result, TensorError};

/// Scalar types the kernels are generic over. `f32` is the training dtype;
/// `f64` exists so gradient checks can run with enough precision to make a
/// 1e-4 relative tolerance meaningful.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
}

/// Shorthand for pulling an `f64` constant into the element type.
#[inline]
pub fn elem<E: Element>(v: f64) -> E {
    E::from_f64(v).expect("constant must be representable")
}

/// Row-major dense tensor. Rank is the length of `shape`; scalars are rank-0
/// with one element.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                context: "Tensor::new",
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: E) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Unpack as `(b, n, c, h, w)`.
    pub fn dims5(&self, context: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, n, c, h, w] => Ok((b, n, c, h, w)),
            _ => Err(TensorError::RankMismatch {
                context,
                expected: 5,
                got: self.rank(),
            }),
        }
    }

    /// Unpack as `(b, c, h, w)`.
    pub fn dims4(&self, context: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(TensorError::RankMismatch {
                context,
                expected: 4,
                got: self.rank(),
            }),
        }
    }

    /// Unpack as `(b, s, c)`.
    pub fn dims3(&self, context: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, s, c] => Ok((b, s, c)),
            _ => Err(TensorError::RankMismatch {
                context,
                expected: 3,
                got: self.rank(),
            }),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise |a - b|; errors if shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::InvalidArg {
                context: "max_abs_diff",
                what: format!("shape {:?} vs {:?}", self.shape, other.shape),
            });
        }
        let mut worst = 0.0f64;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY);
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// Lossy dtype conversion (used to lift f32 weights into f64 for
    /// gradient checking).
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

impl<E: Element> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", E::DTYPE, self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

//! Dense row-major arrays over `f32`/`f64` with tracked allocation.
//!
//! Arrays are immutable once constructed; clones share the underlying
//! buffer. All shape handling is explicit: operations state the shapes they
//! accept and return a [`NumError::ShapeMismatch`] otherwise — nothing is
//! silently truncated or broadcast outside the documented cases.

use std::fmt;
use std::sync::Arc;

use super::{alloc, NumError};

/// Element type tag carried by array data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element trait: everything the kernels need from `f32`/`f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Owned element buffer whose byte count is registered with the allocation
/// tracker for its whole lifetime.
struct TrackedBuf<T> {
    data: Vec<T>,
    bytes: usize,
}

impl<T> TrackedBuf<T> {
    fn new(data: Vec<T>) -> Result<Self, NumError> {
        let bytes = data.capacity() * std::mem::size_of::<T>();
        alloc::register(bytes)?;
        Ok(TrackedBuf { data, bytes })
    }
}

impl<T> Drop for TrackedBuf<T> {
    fn drop(&mut self) {
        alloc::release(self.bytes);
    }
}

/// Dense row-major array. Cheap to clone (shared buffer), immutable after
/// construction.
#[derive(Clone)]
pub struct Array<T: Scalar> {
    shape: Arc<[usize]>,
    buf: Arc<TrackedBuf<T>>,
}

impl<T: Scalar> Array<T> {
    /// Builds an array from a flat row-major vector. Errors if the element
    /// count does not equal the product of the shape extents or any extent
    /// is zero.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, NumError> {
        let count = checked_len(shape)?;
        if count != data.len() {
            return Err(NumError::InvalidParam(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                count,
                data.len()
            )));
        }
        Ok(Array {
            shape: shape.into(),
            buf: Arc::new(TrackedBuf::new(data)?),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, NumError> {
        let count = checked_len(shape)?;
        Ok(Array {
            shape: shape.into(),
            buf: Arc::new(TrackedBuf::new(vec![T::zero(); count])?),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self, NumError> {
        let count = checked_len(shape)?;
        Ok(Array {
            shape: shape.into(),
            buf: Arc::new(TrackedBuf::new(vec![value; count])?),
        })
    }

    /// Single-element array of shape `[1]`.
    pub fn scalar(value: T) -> Result<Self, NumError> {
        Self::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.buf.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[T] {
        &self.buf.data
    }

    /// Number of rows when viewed as 2-D (`shape[0]`).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when viewed as 2-D (product of trailing extents).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// 2-D element access; debug-checked.
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows() && c < self.cols());
        self.buf.data[r * self.cols() + c]
    }

    pub fn is_all_finite(&self) -> bool {
        self.buf.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self, NumError> {
        Self::from_vec(&self.shape, self.buf.data.iter().map(|&v| f(v)).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.buf.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Identity matrix of extent `n`.
    pub fn identity(n: usize) -> Result<Self, NumError> {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::from_vec(&[n, n], data)
    }
}

impl<T: Scalar> fmt::Debug for Array<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array<{}>{:?}", T::DTYPE, self.shape())?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.as_slice())
        } else {
            write!(f, " [{} elements]", self.len())
        }
    }
}

fn checked_len(shape: &[usize]) -> Result<usize, NumError> {
    if shape.is_empty() {
        return Err(NumError::InvalidParam("empty shape".into()));
    }
    let mut count: usize = 1;
    for &extent in shape {
        if extent == 0 {
            return Err(NumError::InvalidParam(format!(
                "zero extent in shape {:?}",
                shape
            )));
        }
        count = count
            .checked_mul(extent)
            .ok_or_else(|| NumError::InvalidParam(format!("shape {:?} overflows", shape)))?;
    }
    Ok(count)
}

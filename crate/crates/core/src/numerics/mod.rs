//! Minimal N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Values are contiguous row-major buffers. Gradient tracking happens on a
//! [`Tape`]: record leaves and operations, call [`Tape::backward`] on a
//! scalar, read gradients back per leaf. Training runs in `f32`; an `f64`
//! shadow mode exists for gradient checking, where finite differences are
//! actually trustworthy.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Tape, VarId};

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Element type of tensors: `f32` for training, `f64` for grad checking.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn neg_infinity() -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxv(self, other: Self) -> Self {
                self.max(other)
            }
            fn minv(self, other: Self) -> Self {
                self.min(other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Contiguous row-major N-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    /// I.i.d. standard normal entries drawn from `stream`.
    pub fn randn(shape: &[usize], stream: &mut Stream) -> Self {
        Self::from_fn(shape, |_| T::from_f64(stream.normal_f64()))
    }

    /// I.i.d. uniform entries in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, stream: &mut Stream) -> Self {
        Self::from_fn(shape, |_| T::from_f64(stream.uniform_in(lo, hi)))
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.to_f64()).sum::<f64>() / self.data.len() as f64
    }
}

const RTN_MAGIC: &[u8; 4] = b"RTN1";

/// Write the raw tensor dump format: magic "RTN1", u32 rank, u32 dims,
/// little-endian f32 payload.
pub fn write_rtn<W: Write>(t: &Tensor<f32>, w: &mut W) -> Result<()> {
    w.write_all(RTN_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_rtn<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RTN_MAGIC {
        return Err(Error::data(format!(
            "bad tensor dump magic {:?}, expected {:?}",
            magic, RTN_MAGIC
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(Error::data(format!("implausible tensor rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Tensor::new(shape, data)
}

pub fn save_rtn(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_rtn(t, &mut f)
}

pub fn load_rtn(path: &Path) -> Result<Tensor<f32>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_rtn(&mut f)
}

//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable-after-construction value (shape + shared
//! row-major buffer) that is cheap to clone and safe to send between
//! threads. Differentiable computation happens on a single-owner
//! [`Tape`]: operations take and return [`Var`] handles, and
//! [`Tape::backward`] replays the recorded graph to populate gradients
//! for every reachable leaf that requires them.

mod io;
pub(crate) mod kernels;
mod tape;

pub use io::{read_mtns, read_mtns_header, write_mtns, MtnsHeader};
pub use tape::{ActKind, Gradients, PadMode, Tape, Var};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Tensor element dtype. Code values are part of the MTNS file format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "fp32"),
            Dtype::F64 => write!(f, "fp64"),
        }
    }
}

/// Floating-point element of a tensor: `f32` or `f64`.
pub trait Element:
    num_traits::Float
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
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one element from the first `Dtype::size_bytes` bytes.
    fn read_le(src: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(src: &[u8]) -> Self {
        f32::from_le_bytes(src[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(src: &[u8]) -> Self {
        f64::from_le_bytes(src[..8].try_into().unwrap())
    }
}

/// N-dimensional dense tensor with a row-major buffer. Images use the
/// `[batch, channels, height, width]` layout.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::Shape(format!("empty tensor rejected: shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements but buffer holds {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![E::zero(); numel])
    }

    pub fn full(shape: Vec<usize>, value: E) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        E::DTYPE
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.to_vec()
    }

    /// Identity of the underlying buffer; equal for clones of one tensor.
    /// The tape uses it to map parameter tensors to their gradient slots.
    pub fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.data) as *const () as usize
    }

    /// Interprets the tensor as `[B,C,H,W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            other => Err(Error::Shape(format!(
                "expected a [B,C,H,W] tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn item(&self) -> Result<E> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a fresh tensor of the same shape.
    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Fresh tensor with the same shape and one element replaced;
    /// used by finite-difference oracles.
    pub fn with_value_at(&self, index: usize, value: E) -> Self {
        let mut data = self.data.to_vec();
        data[index] = value;
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// Deep copy with a fresh buffer (new identity).
    pub fn deep_clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.to_vec()),
        }
    }

    /// Concatenates `[1,C,H,W]` samples along the batch axis.
    pub fn stack_batch(parts: &[Tensor<E>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArg("stack_batch of zero tensors".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(parts.len() * c * h * w);
        let mut batch = 0usize;
        for p in parts {
            let (b, pc, ph, pw) = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "stack_batch: sample shape {:?} differs from {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            batch += b;
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![batch, c, h, w], data)
    }

    /// Channel-axis concatenation of co-shaped `[B,Cj,H,W]` tensors.
    pub fn concat_channels(parts: &[Tensor<E>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArg("concat_channels of zero tensors".into()))?;
        let (b, _, h, w) = first.dims4()?;
        let hw = h * w;
        let mut c_total = 0usize;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: shape {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            c_total += pc;
        }
        let mut data = Vec::with_capacity(b * c_total * hw);
        for bi in 0..b {
            for p in parts {
                let (_, pc, _, _) = p.dims4()?;
                data.extend_from_slice(&p.data()[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        Tensor::new(vec![b, c_total, h, w], data)
    }

    /// Channel slice `[B, start..start+len, H, W]` of a `[B,C,H,W]` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for C={c}",
                start + len
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = bi * c * hw;
            data.extend_from_slice(&self.data[base + start * hw..base + (start + len) * hw]);
        }
        Tensor::new(vec![b, len, h, w], data)
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", E::DTYPE, self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}


/// Raw kernel entry points re-exported for benchmarking only.
#[doc(hidden)]
pub mod kernels_bench {
    pub use super::kernels::{conv2d_bwd, conv2d_fwd, convt2d_bwd, convt2d_fwd};
}

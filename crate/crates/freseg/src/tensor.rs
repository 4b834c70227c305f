//! Dense NCHW tensors and the scalar trait the engine is generic over.
//!
//! Everything the networks touch is a rank-<=4 array in batch x channel x
//! height x width order. Shapes with fewer dims are padded with trailing 1s,
//! so a per-channel vector is `(n, c, 1, 1)` and a scalar is `(1, 1, 1, 1)`.

use crate::error::{Error, Result};
use num_traits::Float;

/// Scalar type the tensor engine operates on. Training runs in `f32`;
/// the finite-difference check path instantiates the same code with `f64`.
pub trait Elem:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C = alpha * A(m,k) * B(k,n) + beta * C, with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Elem for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Elem for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Canonical NCHW shape. Constructed from 1..=4 dims; missing trailing dims
/// are 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(
                "shape",
                format!("expected 1..=4 dims, got {}", dims.len()),
            ));
        }
        let mut d = [1usize; 4];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Shape::new(d[0], d[1], d[2], d[3]))
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Flat index of (n, c, y, x) in row-major order.
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major value tensor. Gradients live on the tape, not here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Elem> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: Shape, data: Vec<E>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {} holds {} elements but data has {}",
                    shape,
                    shape.numel(),
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<E>) -> Result<Self> {
        Self::new(Shape::from_dims(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![E::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    /// The single value of a scalar tensor.
    pub fn item(&self) -> E {
        assert!(self.shape.is_scalar(), "item() on non-scalar {}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elementwise to another scalar type.
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Integer class-label map of shape (n, h, w); pixel value is the class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if n * h * w != data.len() {
            return Err(Error::shape(
                "label_map",
                format!("{n}x{h}x{w} needs {} values, got {}", n * h * w, data.len()),
            ));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Error if any label is outside [0, classes) and not the ignore value.
    pub fn validate(&self, classes: usize, ignore: Option<u8>) -> Result<()> {
        for &v in &self.data {
            if Some(v) == ignore {
                continue;
            }
            if (v as usize) >= classes {
                return Err(Error::LabelOutOfRange {
                    value: v as u32,
                    classes,
                    context: None,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_pads_trailing_dims() {
        let s = Shape::from_dims(&[3, 5]).unwrap();
        assert_eq!(s, Shape::new(3, 5, 1, 1));
        assert_eq!(s.numel(), 15);
    }

    #[test]
    fn tensor_rejects_length_mismatch() {
        let err = Tensor::<f32>::from_dims(&[2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn zero_channel_tensor_is_legal() {
        let t = Tensor::<f32>::from_dims(&[1, 0, 4, 4], vec![]).unwrap();
        assert_eq!(t.shape().numel(), 0);
    }

    #[test]
    fn label_map_validates_range() {
        let lm = LabelMap::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap();
        assert!(lm.validate(3, None).is_ok());
        assert!(lm.validate(2, None).is_err());
        assert!(lm.validate(2, Some(2)).is_ok());
    }
}

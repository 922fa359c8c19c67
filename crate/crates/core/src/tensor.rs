//! Dense tensor storage and the scalar abstraction shared by every op.
//!
//! Activations use the channels-major layout `C×L×H×W` (images are `L = 1`),
//! optionally with a leading batch axis: `N×C×L×H×W`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (verification).
pub trait Real:
    Float
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Payload width in bytes when serialized.
    const BYTES: u8;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// True when no element is NaN or infinite.
    fn all_finite(xs: &[Self]) -> bool;

    /// `C ← α·A·B + β·C` over strided row-major views.
    ///
    /// # Safety
    /// All strided accesses implied by the extents must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

impl Real for f32 {
    const BYTES: u8 = 4;

    fn all_finite(xs: &[Self]) -> bool {
        // exponent field all ones is the only non-finite pattern; max-reduce it
        const EXP: u32 = 0x7f80_0000;
        xs.iter().fold(0, |m, v| m.max(v.to_bits() & EXP)) < EXP
    }

    fn from_f64(v: f64) -> Self {
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

    unsafe fn gemm_raw(
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

impl Real for f64 {
    const BYTES: u8 = 8;

    fn all_finite(xs: &[Self]) -> bool {
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        xs.iter().fold(0, |m, v| m.max(v.to_bits() & EXP)) < EXP
    }

    fn from_f64(v: f64) -> Self {
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

    unsafe fn gemm_raw(
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

/// A strided matrix view: `(offset, row stride, column stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn new(off: usize, rs: usize, cs: usize) -> Self {
        View { off, rs, cs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.off;
        }
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked `C ← α·A·B + β·C` where `A` is `m×k`, `B` is `k×n`, `C` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.last(m, k) < a.len(), "gemm: A view out of bounds");
    assert!(k == 0 || bv.last(k, n) < b.len(), "gemm: B view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: C view out of bounds");
    // SAFETY: every strided access was bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// Dense row-major N-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Seeded draw from `U[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| T::from_f64(rng.random_range(lo..hi))).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        T::all_finite(&self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Slice `index` of the leading axis.
    pub fn index0(&self, index: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Repeats the single frame of a `C×1×H×W` (or batched) tensor `frames` times.
    pub fn inflate_frames(&self, frames: usize) -> Result<Self> {
        let d = Dims5::of("inflate_frames", &self.shape)?;
        if d.l != 1 || frames == 0 {
            return Err(Error::shape("inflate_frames", format!("need L=1 input and frames ≥ 1, got L={} frames={frames}", d.l)));
        }
        let hw = d.h * d.w;
        let mut data = Vec::with_capacity(self.data.len() * frames);
        for plane in self.data.chunks_exact(hw) {
            for _ in 0..frames {
                data.extend_from_slice(plane);
            }
        }
        Tensor::new(Dims5 { l: frames, ..d }.shape(), data)
    }

    /// Frame `index` of every example, as an `L=1` tensor of the same rank.
    pub fn frame(&self, index: usize) -> Result<Self> {
        let d = Dims5::of("frame", &self.shape)?;
        if index >= d.l {
            return Err(Error::shape("frame", format!("frame {index} of {}", d.l)));
        }
        let hw = d.h * d.w;
        let mut data = Vec::with_capacity(d.n * d.c * hw);
        for clip in self.data.chunks_exact(d.l * hw) {
            data.extend_from_slice(&clip[index * hw..(index + 1) * hw]);
        }
        Tensor::new(Dims5 { l: 1, ..d }.shape(), data)
    }
}

/// Extents of a `C×L×H×W` or `N×C×L×H×W` activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims5 {
    pub n: usize,
    pub c: usize,
    pub l: usize,
    pub h: usize,
    pub w: usize,
    pub batched: bool,
}

impl Dims5 {
    pub fn of(op: &'static str, shape: &[usize]) -> Result<Self> {
        match *shape {
            [c, l, h, w] => Ok(Dims5 {
                n: 1,
                c,
                l,
                h,
                w,
                batched: false,
            }),
            [n, c, l, h, w] => Ok(Dims5 {
                n,
                c,
                l,
                h,
                w,
                batched: true,
            }),
            _ => Err(Error::shape(
                op,
                format!("expected C×L×H×W or N×C×L×H×W, got {shape:?}"),
            )),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.c, self.l, self.h, self.w]
        } else {
            vec![self.c, self.l, self.h, self.w]
        }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.l * self.h * self.w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inflate_and_frame_are_inverse() {
        let img = Tensor::<f64>::from_f64(&[2, 2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let clip = img.inflate_frames(3).unwrap();
        assert_eq!(clip.shape(), [2, 2, 3, 1, 2]);
        for f in 0..3 {
            assert_eq!(clip.frame(f).unwrap(), img);
        }
        assert!(clip.frame(3).is_err());
        assert!(clip.inflate_frames(2).is_err());
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f64>::scalar(2.0).numel(), 1);
    }

    #[test]
    fn gemm_matches_naive_with_strides() {
        // A is 2x3 stored transposed, B is 3x2 row-major.
        let a_t = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0f64; 4];
        gemm(
            2,
            3,
            2,
            1.0,
            &a_t,
            View::new(0, 1, 2),
            &b,
            View::new(0, 2, 1),
            0.0,
            &mut c,
            View::new(0, 2, 1),
        );
        assert_eq!(c, [22.0, 28.0, 49.0, 64.0]);
    }

    #[test]
    fn stack_and_index_round_trip() {
        let a = Tensor::<f32>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.index0(1), b);
    }
}

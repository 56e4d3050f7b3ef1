//! Minimal 3D convolutional network toolkit with hand-written backpropagation.
//!
//! Everything is generic over [`Real`] so the same layers run in `f32` for training and
//! in `f64` for finite-difference gradient checks.

mod adam;
mod conv;
mod direct;
mod layers;
mod norm;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use adam::{Adam, AdamConfig};
pub use conv::Conv3d;
pub use layers::{sigmoid, Activation, ConvBnAct, ConvBnActCache, ResBlock, ResBlockCache};
pub use norm::{BatchNorm3d, BatchNormCache};

use crate::volume::{voxel_count, Shape, Volume};

/// Floating point element type of the network engine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `C = alpha * A * B + beta * C` over raw strided storage.
    ///
    /// # Safety
    /// All pointers must address valid matrices of the given dimensions and strides.
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

    /// Row kernel of the direct convolution; see [`direct::conv_rows_generic`].
    fn conv_rows(xp: &[Self], starts: &[usize], k: usize, wb: &[Self], wr: usize, bias: &[Self; direct::CB], out: &mut [Self]) {
        direct::conv_rows_generic(xp, starts, k, wb, wr, bias, out)
    }

    /// Row kernel of the direct weight gradient; see [`direct::corr_rows_generic`].
    #[allow(clippy::too_many_arguments)]
    fn corr_rows(
        gp: &[Self],
        g_starts: &[usize],
        g_stride: usize,
        xp: &[Self],
        x_starts: &[usize],
        wr: usize,
        k: usize,
        acc: &mut [Self],
    ) {
        direct::corr_rows_generic(gp, g_starts, g_stride, xp, x_starts, wr, k, acc)
    }

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn conv_rows(xp: &[f32], starts: &[usize], k: usize, wb: &[f32], wr: usize, bias: &[f32; direct::CB], out: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if direct::avx2::available() {
            // SAFETY: CPU support was checked at runtime.
            return unsafe { direct::avx2::conv_rows(xp, starts, k, wb, wr, bias, out) };
        }
        direct::conv_rows_generic(xp, starts, k, wb, wr, bias, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn corr_rows(
        gp: &[f32],
        g_starts: &[usize],
        g_stride: usize,
        xp: &[f32],
        x_starts: &[usize],
        wr: usize,
        k: usize,
        acc: &mut [f32],
    ) {
        #[cfg(target_arch = "x86_64")]
        if k == 3 && direct::avx2::available() {
            // SAFETY: CPU support was checked at runtime.
            return unsafe { direct::avx2::corr_rows3(gp, g_starts, g_stride, xp, x_starts, wr, acc) };
        }
        direct::corr_rows_generic(gp, g_starts, g_stride, xp, x_starts, wr, k, acc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> Mat<'a, T> {
    pub(crate) fn new(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * rs + (cols - 1) * cs < data.len(), "matrix view exceeds buffer");
        }
        Self { data, rows, cols, rs, cs }
    }

    pub(crate) fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }

    pub(crate) fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `C = alpha * A * B + beta * C`, where `C` is `a.rows × b.cols` with row stride `c_rs`.
pub(crate) fn gemm<T: Real>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T], c_rs: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * c_rs + n <= c.len(), "output view exceeds buffer");
    // SAFETY: every view was bounds-checked against its backing slice above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        )
    }
}

/// Batch of multi-channel 3D feature maps, laid out `[n][c][d][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub dims: Shape,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, dims: Shape) -> Self {
        Self { n, c, dims, data: vec![T::zero(); n * c * voxel_count(dims)] }
    }

    pub fn from_vec(n: usize, c: usize, dims: Shape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * voxel_count(dims), "tensor data length");
        Self { n, c, dims, data }
    }

    /// Single-channel batch from volumes of identical shape.
    pub fn from_volumes<'a>(volumes: impl IntoIterator<Item = &'a Volume>) -> Self {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for v in volumes {
            match dims {
                None => dims = Some(v.shape()),
                Some(d) => assert_eq!(d, v.shape(), "batch volumes must share a shape"),
            }
            data.extend(v.data().iter().map(|&x| T::lit(x as f64)));
            n += 1;
        }
        Self::from_vec(n, 1, dims.expect("empty batch"), data)
    }

    pub fn spatial(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.c * self.spatial();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.c * self.spatial();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn channel(&self, i: usize, ch: usize) -> &[T] {
        let s = self.spatial();
        let start = (i * self.c + ch) * s;
        &self.data[start..start + s]
    }

    /// Single-channel sample `i` as a volume.
    pub fn to_volume(&self, i: usize) -> Volume {
        assert_eq!(self.c, 1, "to_volume needs a single channel");
        Volume::new(self.dims, self.channel(i, 0).iter().map(|v| v.f64() as f32).collect())
            .expect("finite network output")
    }

    /// Channel-wise concatenation `[a | b]`.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!((a.n, a.dims), (b.n, b.dims), "concat operands must agree");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Self { n: a.n, c: a.c + b.c, dims: a.dims, data }
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `c_first` channels, then the rest.
    pub fn split_channels(&self, c_first: usize) -> (Self, Self) {
        let s = self.spatial();
        let mut a = Self::zeros(self.n, c_first, self.dims);
        let mut b = Self::zeros(self.n, self.c - c_first, self.dims);
        for i in 0..self.n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..c_first * s]);
            b.sample_mut(i).copy_from_slice(&src[c_first * s..]);
        }
        (a, b)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Learnable parameter with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    fn gaussian(len: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        Self::new((0..len).map(|_| T::lit(normal.sample(rng))).collect())
    }
}

/// Forward-pass mode: training keeps caches and uses batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named storage of a module: learnable parameters or non-learnable buffers.
pub enum Slot<'a, T> {
    Param(&'a Param<T>),
    Buffer(&'a Vec<T>),
}

pub enum SlotMut<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut Vec<T>),
}

impl<T> Slot<'_, T> {
    pub fn values(&self) -> &[T] {
        match self {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => b,
        }
    }
}

impl<T> SlotMut<'_, T> {
    pub fn values_mut(&mut self) -> &mut Vec<T> {
        match self {
            SlotMut::Param(p) => &mut p.value,
            SlotMut::Buffer(b) => b,
        }
    }
}

/// Enumerates named parameters and buffers in a stable order.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, SlotMut<'a, T>)>);

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut slots = Vec::new();
        self.visit_mut("", &mut slots);
        slots
            .into_iter()
            .filter_map(|(_, s)| match s {
                SlotMut::Param(p) => Some(p),
                SlotMut::Buffer(_) => None,
            })
            .collect()
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn param_count(&self) -> usize {
        let mut slots = Vec::new();
        self.visit("", &mut slots);
        slots
            .iter()
            .filter(|(_, s)| matches!(s, Slot::Param(_)))
            .map(|(_, s)| s.values().len())
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Converts every parameter and buffer of `src` into the matching slot of `dst`.
pub fn copy_module<A: Real, B: Real>(src: &impl Module<A>, dst: &mut impl Module<B>) {
    let mut from = Vec::new();
    src.visit("", &mut from);
    let mut to = Vec::new();
    dst.visit_mut("", &mut to);
    assert_eq!(from.len(), to.len(), "module layouts differ");
    for ((name_a, a), (name_b, mut b)) in from.into_iter().zip(to) {
        assert_eq!(name_a, name_b, "module layouts differ");
        let dst = b.values_mut();
        assert_eq!(dst.len(), a.values().len(), "size of {name_a}");
        for (d, s) in dst.iter_mut().zip(a.values()) {
            *d = B::lit(s.f64());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let mut c = vec![1.0; 8];
        gemm(1.0, Mat::row_major(&a, 2, 3), Mat::row_major(&b, 3, 4), 1.0, &mut c, 4);
        for i in 0..2 {
            for j in 0..4 {
                let naive: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - naive - 1.0).abs() < 1e-12);
            }
        }
        let mut ct = vec![0.0; 9];
        gemm(1.0, Mat::row_major(&a, 2, 3).t(), Mat::row_major(&a, 2, 3), 0.0, &mut ct, 3);
        assert_eq!(ct[0], a[0] * a[0] + a[3] * a[3]);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::<f32>::from_vec(2, 1, [1, 1, 2], vec![1., 2., 3., 4.]);
        let b = Tensor::<f32>::from_vec(2, 2, [1, 1, 2], (0..8).map(|v| v as f32).collect());
        let ab = Tensor::concat_channels(&a, &b);
        assert_eq!(ab.c, 3);
        assert_eq!(ab.sample(1), &[3., 4., 4., 5., 6., 7.]);
        assert_eq!(ab.split_channels(1), (a, b));
    }
}

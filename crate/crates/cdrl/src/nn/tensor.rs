//! Minimal CHW tensor used by the hand-rolled layers.
//!
//! Stored planar like [`ImageGrid`](crate::grid::ImageGrid): element
//! `(c, y, x)` at `data[(c * h + y) * w + x]`. Generic over the float type so
//! the same layer code runs in f32 for training and f64 for finite-difference
//! verification.

use crate::grid::{ImageGrid, ValueSpace};
use ndarray::{ArrayView2, ArrayViewMut2};

pub trait Scalar:
    ndarray::NdFloat + ndarray::LinalgScalar + num_traits::FromPrimitive + Send + Sync
{
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
    fn to_f64_c(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f64_c(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn same_shape(&self, o: &Tensor<T>) -> bool {
        self.c == o.c && self.h == o.h && self.w == o.w
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, y, x)]
    }

    /// (C, H·W) matrix view of the payload.
    pub fn as_mat(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.c, self.h * self.w), &self.data).unwrap()
    }
    pub fn as_mat_mut(&mut self) -> ArrayViewMut2<'_, T> {
        ArrayViewMut2::from_shape((self.c, self.h * self.w), &mut self.data).unwrap()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, o: &Tensor<T>) -> Tensor<T> {
        debug_assert!(self.same_shape(o));
        let data = self
            .data
            .iter()
            .zip(&o.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn add_assign(&mut self, o: &Tensor<T>) {
        debug_assert!(self.same_shape(o));
        for (a, &b) in self.data.iter_mut().zip(&o.data) {
            *a = *a + b;
        }
    }

    /// Stacks `self` then `o` along channels.
    pub fn concat_c(&self, o: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!((self.h, self.w), (o.h, o.w));
        let mut data = Vec::with_capacity(self.data.len() + o.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&o.data);
        Tensor {
            c: self.c + o.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Splits along channels at `c_first`, undoing [`Tensor::concat_c`].
    pub fn split_c(&self, c_first: usize) -> (Tensor<T>, Tensor<T>) {
        debug_assert!(c_first <= self.c);
        let plane = self.h * self.w;
        let a = Tensor {
            c: c_first,
            h: self.h,
            w: self.w,
            data: self.data[..c_first * plane].to_vec(),
        };
        let b = Tensor {
            c: self.c - c_first,
            h: self.h,
            w: self.w,
            data: self.data[c_first * plane..].to_vec(),
        };
        (a, b)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn from_grid(grid: &ImageGrid) -> Tensor<T> {
        Tensor {
            c: grid.channels(),
            h: grid.height(),
            w: grid.width(),
            data: grid.data().iter().map(|&v| T::from_f64_c(v as f64)).collect(),
        }
    }

    pub fn to_grid(&self, space: ValueSpace) -> ImageGrid {
        let data: Vec<f32> = self.data.iter().map(|&v| v.to_f64_c() as f32).collect();
        ImageGrid::new(self.h, self.w, self.c, space, data)
            .expect("tensor payload violates the target value space")
    }
}

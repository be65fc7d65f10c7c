//! Scalar abstraction and small fixed-size algebra used throughout the crate.
//!
//! All numerics are generic over [`Scalar`], which is any IEEE float with the
//! conversions we need (`f32` or `f64`). Concrete aliases for the common
//! instantiations live at the crate root.

use std::fmt;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Floating-point scalar the whole crate is generic over.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + Send
    + Sync
    + 'static
{
    /// Shorthand for converting an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable in this scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Complex number over the crate scalar.
pub type C<T> = Complex<T>;

/// Complex 3-vector.
pub type CVec3<T> = [C<T>; 3];

#[inline]
pub fn czero<T: Scalar>() -> C<T> {
    C::new(T::zero(), T::zero())
}

#[inline]
pub fn cvec_zero<T: Scalar>() -> CVec3<T> {
    [czero(), czero(), czero()]
}

/// Unconjugated dot product of two complex 3-vectors.
#[inline]
pub fn cdot<T: Scalar>(a: &CVec3<T>, b: &CVec3<T>) -> C<T> {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Real 3-vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Scalar> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3([x, y, z])
    }

    pub fn zero() -> Self {
        Vec3([T::zero(); 3])
    }

    pub fn from_f64(x: f64, y: f64, z: f64) -> Self {
        Vec3([T::lit(x), T::lit(y), T::lit(z)])
    }

    #[inline]
    pub fn dot(&self, other: &Self) -> T {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    #[inline]
    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn add(&self, other: &Self) -> Self {
        Vec3([
            self.0[0] + other.0[0],
            self.0[1] + other.0[1],
            self.0[2] + other.0[2],
        ])
    }

    #[inline]
    pub fn sub(&self, other: &Self) -> Self {
        Vec3([
            self.0[0] - other.0[0],
            self.0[1] - other.0[1],
            self.0[2] - other.0[2],
        ])
    }

    #[inline]
    pub fn scale(&self, k: T) -> Self {
        Vec3([self.0[0] * k, self.0[1] * k, self.0[2] * k])
    }

    pub fn max_abs(&self) -> T {
        self.0[0].abs().max(self.0[1].abs()).max(self.0[2].abs())
    }
}

/// Symmetric 3x3 block stored as diagonal plus upper off-diagonal entries.
///
/// Storage order of `off` is `[a01, a02, a12]`. Symmetry holds by
/// construction, so `|A - A^T| = 0` is not a runtime concern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym3<T> {
    pub diag: [T; 3],
    pub off: [T; 3],
}

impl<T: Scalar> Sym3<T> {
    pub fn zero() -> Self {
        Sym3 {
            diag: [T::zero(); 3],
            off: [T::zero(); 3],
        }
    }

    pub fn identity() -> Self {
        Sym3 {
            diag: [T::one(); 3],
            off: [T::zero(); 3],
        }
    }

    /// x^T A x with all off-diagonal pairs counted.
    #[inline]
    pub fn quad(&self, x: &Vec3<T>) -> T {
        let [x0, x1, x2] = x.0;
        let two = T::lit(2.0);
        self.diag[0] * x0 * x0
            + self.diag[1] * x1 * x1
            + self.diag[2] * x2 * x2
            + two * (self.off[0] * x0 * x1 + self.off[1] * x0 * x2 + self.off[2] * x1 * x2)
    }

    /// Gradient of the quadratic form, 2 A x.
    #[inline]
    pub fn grad(&self, x: &Vec3<T>) -> Vec3<T> {
        let [x0, x1, x2] = x.0;
        let two = T::lit(2.0);
        Vec3([
            two * (self.diag[0] * x0 + self.off[0] * x1 + self.off[1] * x2),
            two * (self.off[0] * x0 + self.diag[1] * x1 + self.off[2] * x2),
            two * (self.off[1] * x0 + self.off[2] * x1 + self.diag[2] * x2),
        ])
    }

    #[inline]
    pub fn trace(&self) -> T {
        self.diag[0] + self.diag[1] + self.diag[2]
    }

    pub fn max_abs(&self) -> T {
        let d = self.diag[0]
            .abs()
            .max(self.diag[1].abs())
            .max(self.diag[2].abs());
        let o = self.off[0]
            .abs()
            .max(self.off[1].abs())
            .max(self.off[2].abs());
        d.max(o)
    }
}

/// General (not necessarily symmetric) 3x3 block, row major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Scalar> Mat3<T> {
    pub fn zero() -> Self {
        Mat3([[T::zero(); 3]; 3])
    }

    /// x1^T M x2.
    #[inline]
    pub fn bilinear(&self, x1: &Vec3<T>, x2: &Vec3<T>) -> T {
        let mut acc = T::zero();
        for k in 0..3 {
            for l in 0..3 {
                acc += self.0[k][l] * x1.0[k] * x2.0[l];
            }
        }
        acc
    }

    /// M x.
    #[inline]
    pub fn mul_vec(&self, x: &Vec3<T>) -> Vec3<T> {
        Vec3([
            self.0[0][0] * x.0[0] + self.0[0][1] * x.0[1] + self.0[0][2] * x.0[2],
            self.0[1][0] * x.0[0] + self.0[1][1] * x.0[1] + self.0[1][2] * x.0[2],
            self.0[2][0] * x.0[0] + self.0[2][1] * x.0[1] + self.0[2][2] * x.0[2],
        ])
    }

    /// M^T x.
    #[inline]
    pub fn tr_mul_vec(&self, x: &Vec3<T>) -> Vec3<T> {
        Vec3([
            self.0[0][0] * x.0[0] + self.0[1][0] * x.0[1] + self.0[2][0] * x.0[2],
            self.0[0][1] * x.0[0] + self.0[1][1] * x.0[1] + self.0[2][1] * x.0[2],
            self.0[0][2] * x.0[0] + self.0[1][2] * x.0[1] + self.0[2][2] * x.0[2],
        ])
    }

    pub fn transpose(&self) -> Self {
        let mut out = Mat3::zero();
        for k in 0..3 {
            for l in 0..3 {
                out.0[k][l] = self.0[l][k];
            }
        }
        out
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for row in &self.0 {
            for v in row {
                m = m.max(v.abs());
            }
        }
        m
    }
}

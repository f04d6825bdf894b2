//! Scalar abstraction and small fixed-size vector/matrix types used by the tracer.
//!
//! Everything that is traced is generic over [`Real`], so the same code path runs
//! in plain `f64`, in forward-mode [`DiffScalar`](crate::autodiff::DiffScalar) and
//! in double-double precision ([`Dd`]) for precision cross-checks.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use twofloat::TwoFloat;

/// Arithmetic needed by the tracer and the PSF splatter.
pub trait Real:
    Clone
    + Send
    + Sync
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Lift a constant.
    fn cst(v: f64) -> Self;
    /// Nearest `f64` value.
    fn val(&self) -> f64;
    fn sqrt(self) -> Self;

    fn sq(&self) -> Self {
        self.clone() * self.clone()
    }

    fn zero() -> Self {
        Self::cst(0.0)
    }

    /// True when the value carries no derivative information.
    fn is_constant(&self) -> bool {
        true
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sq(&self) -> Self {
        self * self
    }
}

/// Double-double scalar. Wraps [`TwoFloat`] but divides with one residual
/// correction: `TwoFloat / TwoFloat` in twofloat 0.8 is only accurate to about
/// one f64 ulp because its reciprocal residual is formed without an FMA.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Dd(pub TwoFloat);

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        Dd(self.0 + o.0)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        Dd(self.0 - o.0)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        Dd(self.0 * o.0)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q = self.0 / o.0;
        let r = self.0 - q * o.0;
        Dd(q + r.hi() / o.0.hi())
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd(-self.0)
    }
}

impl Add<f64> for Dd {
    type Output = Dd;
    fn add(self, o: f64) -> Dd {
        Dd(self.0 + o)
    }
}

impl Sub<f64> for Dd {
    type Output = Dd;
    fn sub(self, o: f64) -> Dd {
        Dd(self.0 - o)
    }
}

impl Mul<f64> for Dd {
    type Output = Dd;
    fn mul(self, o: f64) -> Dd {
        Dd(self.0 * o)
    }
}

impl Div<f64> for Dd {
    type Output = Dd;
    fn div(self, o: f64) -> Dd {
        Dd(self.0 / o)
    }
}

impl Real for Dd {
    fn cst(v: f64) -> Self {
        Dd(TwoFloat::from(v))
    }
    fn val(&self) -> f64 {
        f64::from(self.0)
    }
    fn sqrt(self) -> Self {
        Dd(self.0.sqrt())
    }
}

/// 3-vector over any [`Real`].
#[derive(Debug, Clone, PartialEq)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Self::new(T::cst(v[0]), T::cst(v[1]), T::cst(v[2]))
    }

    pub fn dot(&self, o: &Self) -> T {
        self.x.clone() * o.x.clone() + self.y.clone() * o.y.clone() + self.z.clone() * o.z.clone()
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        self.scale_by(&(T::cst(1.0) / n))
    }

    pub fn scale_by(&self, s: &T) -> Self {
        Self::new(
            self.x.clone() * s.clone(),
            self.y.clone() * s.clone(),
            self.z.clone() * s.clone(),
        )
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(
            self.x.clone() + o.x.clone(),
            self.y.clone() + o.y.clone(),
            self.z.clone() + o.z.clone(),
        )
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::new(
            self.x.clone() - o.x.clone(),
            self.y.clone() - o.y.clone(),
            self.z.clone() - o.z.clone(),
        )
    }

    /// `self + o * s`
    pub fn add_scaled(&self, o: &Self, s: &T) -> Self {
        Self::new(
            self.x.clone() + o.x.clone() * s.clone(),
            self.y.clone() + o.y.clone() * s.clone(),
            self.z.clone() + o.z.clone() * s.clone(),
        )
    }

    pub fn val(&self) -> [f64; 3] {
        [self.x.val(), self.y.val(), self.z.val()]
    }
}

/// Row-major 3×3 matrix of constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Rotation about +x by `a` radians.
    pub fn rot_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    /// Rotation about +y by `b` radians.
    pub fn rot_y(b: f64) -> Self {
        let (s, c) = b.sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    /// Rotation about +z by `g` radians.
    pub fn rot_z(g: f64) -> Self {
        let (s, c) = g.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest entry of |RᵀR − I|.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().mul(self);
        let mut e: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                e = e.max((p.0[i][j] - id).abs());
            }
        }
        e
    }

    pub fn apply<T: Real>(&self, v: &Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        let row = |r: &[f64; 3]| v.x.clone() * r[0] + v.y.clone() * r[1] + v.z.clone() * r[2];
        Vec3::new(row(&m[0]), row(&m[1]), row(&m[2]))
    }

    pub fn apply_f64(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotations_are_orthonormal() {
        let r = Mat3::rot_z(0.3).mul(&Mat3::rot_y(-0.2)).mul(&Mat3::rot_x(0.7));
        assert!(r.orthonormality_error() < 1e-15);
        assert!((r.det() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transpose_inverts_rotation() {
        let r = Mat3::rot_x(0.1).mul(&Mat3::rot_z(1.2));
        let v = [0.3, -1.0, 2.0];
        let back = r.transpose().apply_f64(r.apply_f64(v));
        for i in 0..3 {
            assert!((back[i] - v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn double_double_sqrt_is_tighter_than_f64() {
        let two = Dd::cst(2.0);
        let s = Real::sqrt(two);
        let resid = s * s - 2.0;
        assert!(resid.val().abs() < 1e-30);
    }

    #[test]
    fn double_double_division_round_trips() {
        for i in 1..500 {
            let a = Dd::cst(1.0 + i as f64 * 0.731) / Dd::cst(3.0 + i as f64 * 0.01);
            let b = Dd::cst(0.1 + (i as f64 * 1.618).sin().abs());
            let q = a / b;
            let resid = (q * b - a) / a;
            assert!(resid.val().abs() < 1e-30, "{i}: {:e}", resid.val());
        }
    }
}

//! Scalar abstraction used by the geometry and integrator layers.
//!
//! Everything numeric is generic over [`Real`] so that the same code runs in
//! plain `f64` (fast, used for trajectories and plotting) and in
//! double-double precision ([`Dd`]), which the return-map machinery needs:
//! the first return map near a sliding Shilnikov orbit expands by several
//! orders of magnitude per iterate, so `f64` round-off swamps depth-2 and
//! deeper computations.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Double-double scalar (~106-bit mantissa).
pub type Dd = twofloat::TwoFloat;

pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Unit round-off of the representation.
    fn unit_roundoff() -> f64;
}

impl Real for f64 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    fn unit_roundoff() -> f64 {
        f64::EPSILON / 2.0
    }
}

impl Real for Dd {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        Dd::from(x)
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self.hi() + self.lo()
    }
    fn unit_roundoff() -> f64 {
        // 2^-104
        4.930380657631324e-32
    }
}

/// Fixed 17-significant-digit rendering used by every numeric output.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Point or vector in R^3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3<R>(pub [R; 3]);

impl<R: Real> Vec3<R> {
    pub fn new(x: R, y: R, z: R) -> Self {
        Vec3([x, y, z])
    }

    pub fn zero() -> Self {
        Vec3([R::zero(); 3])
    }

    pub fn from_f64(p: [f64; 3]) -> Self {
        Vec3([R::lit(p[0]), R::lit(p[1]), R::lit(p[2])])
    }

    pub fn to_f64(self) -> [f64; 3] {
        [self.0[0].to_f64(), self.0[1].to_f64(), self.0[2].to_f64()]
    }

    pub fn cast<S: Real>(self) -> Vec3<S> {
        Vec3([cast(self.0[0]), cast(self.0[1]), cast(self.0[2])])
    }

    #[inline]
    pub fn dot(&self, o: &Self) -> R {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(&self, o: &Self) -> Self {
        let [a, b, c] = self.0;
        let [d, e, f] = o.0;
        Vec3([b * f - c * e, c * d - a * f, a * e - b * d])
    }

    pub fn norm(&self) -> R {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn scale(&self, k: R) -> Self {
        Vec3([self.0[0] * k, self.0[1] * k, self.0[2] * k])
    }

    /// `self + k * o`
    #[inline]
    pub fn axpy(&self, k: R, o: &Self) -> Self {
        Vec3([self.0[0] + k * o.0[0], self.0[1] + k * o.0[1], self.0[2] + k * o.0[2]])
    }

    pub fn normalized(&self) -> Self {
        self.scale(R::one() / self.norm())
    }

    pub fn dist(&self, o: &Self) -> R {
        (*self - *o).norm()
    }

    pub fn max_abs(&self) -> R {
        self.0[0].abs().max(self.0[1].abs()).max(self.0[2].abs())
    }
}

/// Convert between scalar types, going through `f64` only when the target is
/// not wider than the source.
pub fn cast<A: Real, B: Real>(a: A) -> B {
    // Dd -> Dd must keep the low word; other routes lose nothing relevant.
    let hi = a.to_f64();
    let lo = (a - A::lit(hi)).to_f64();
    B::lit(hi) + B::lit(lo)
}

impl<R: Real> Add for Vec3<R> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<R: Real> Sub for Vec3<R> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<R: Real> AddAssign for Vec3<R> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<R: Real> SubAssign for Vec3<R> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<R: Real> Neg for Vec3<R> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl<R: Real> Mul<R> for Vec3<R> {
    type Output = Self;
    fn mul(self, k: R) -> Self {
        self.scale(k)
    }
}

impl<R> Index<usize> for Vec3<R> {
    type Output = R;
    fn index(&self, i: usize) -> &R {
        &self.0[i]
    }
}

impl<R> IndexMut<usize> for Vec3<R> {
    fn index_mut(&mut self, i: usize) -> &mut R {
        &mut self.0[i]
    }
}

/// Row-major 3x3 matrix (field Jacobians, Hessians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<R>(pub [[R; 3]; 3]);

impl<R: Real> Mat3<R> {
    pub fn zero() -> Self {
        Mat3([[R::zero(); 3]; 3])
    }

    pub fn mul_vec(&self, v: &Vec3<R>) -> Vec3<R> {
        let m = &self.0;
        Vec3([
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ])
    }

    pub fn transpose_mul_vec(&self, v: &Vec3<R>) -> Vec3<R> {
        let m = &self.0;
        Vec3([
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dd_cast_keeps_low_word() {
        let x = Dd::from(1.5) + Dd::from(1e-20);
        let y: Dd = cast(x);
        assert_eq!(y, x);
        let z: f64 = cast(x);
        assert_eq!(z, 1.5);
    }

    #[test]
    fn cross_is_orthogonal() {
        let a = Vec3::<f64>::new(1.0, 2.0, 3.0);
        let b = Vec3::<f64>::new(-2.0, 0.5, 4.0);
        let c = a.cross(&b);
        assert!(c.dot(&a).abs() < 1e-12);
        assert!(c.dot(&b).abs() < 1e-12);
    }
}

//! Piecewise systems `Z = (X, Y)` split by `M = {h = 0}` and the
//! classification of points of `M` into crossing, sliding, escaping and
//! tangency regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{Poly, PolyField};
use crate::real::{Mat3, Real, Vec3};

/// Numerical thresholds shared by the geometry layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// A point is on `M` iff `|h| < h_tol`.
    pub h_tol: f64,
    /// Sign threshold for Lie derivatives.
    pub tol: f64,
    /// `0` must be a regular value: `|grad h| > grad_tol` on `M`.
    pub grad_tol: f64,
    /// Central-difference step for derivative fallbacks.
    pub fd_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { h_tol: 1e-9, tol: 1e-8, grad_tol: 1e-10, fd_step: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Which {
    X,
    Y,
}

/// The two smooth fields and the switching function of a Filippov system.
///
/// Only the fields and `h` are mandatory; derivatives default to central
/// differences with step `fd_step`.
pub trait Dynamics: Send + Sync {
    fn x_field<R: Real>(&self, p: &Vec3<R>) -> Vec3<R>;
    fn y_field<R: Real>(&self, p: &Vec3<R>) -> Vec3<R>;
    fn h<R: Real>(&self, p: &Vec3<R>) -> R;

    fn fd_step(&self) -> f64 {
        Tolerances::default().fd_step
    }

    fn grad_h<R: Real>(&self, p: &Vec3<R>) -> Vec3<R> {
        let e = R::lit(self.fd_step());
        let two_e = e + e;
        let mut g = Vec3::zero();
        for i in 0..3 {
            let mut a = *p;
            let mut b = *p;
            a[i] = a[i] + e;
            b[i] = b[i] - e;
            g[i] = (self.h(&a) - self.h(&b)) / two_e;
        }
        g
    }

    /// Analytic Hessian of `h`, when available.
    fn hess_h<R: Real>(&self, _p: &Vec3<R>) -> Option<Mat3<R>> {
        None
    }

    /// Analytic Jacobian of the chosen field, when available.
    fn jacobian<R: Real>(&self, _which: Which, _p: &Vec3<R>) -> Option<Mat3<R>> {
        None
    }

    fn field<R: Real>(&self, which: Which, p: &Vec3<R>) -> Vec3<R> {
        match which {
            Which::X => self.x_field(p),
            Which::Y => self.y_field(p),
        }
    }
}

/// Piecewise-polynomial system: `X` where `h > 0`, `Y` where `h < 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseSystem {
    pub x: PolyField,
    pub y: PolyField,
    pub h: Poly,
    grad: [Poly; 3],
    hess: [[Poly; 3]; 3],
}

impl PiecewiseSystem {
    pub fn new(x: PolyField, y: PolyField, h: Poly) -> Self {
        let grad = h.gradient();
        let hess = [grad[0].gradient(), grad[1].gradient(), grad[2].gradient()];
        PiecewiseSystem { x, y, h, grad, hess }
    }

    pub fn degree(&self) -> u32 {
        self.x.degree().max(self.y.degree()).max(self.h.degree())
    }

    /// Same system with `by` added to the `X` field.
    pub fn with_x_shift(&self, by: [f64; 3]) -> Self {
        PiecewiseSystem::new(self.x.shifted(by), self.y.clone(), self.h.clone())
    }
}

impl Dynamics for PiecewiseSystem {
    fn x_field<R: Real>(&self, p: &Vec3<R>) -> Vec3<R> {
        self.x.eval(p)
    }

    fn y_field<R: Real>(&self, p: &Vec3<R>) -> Vec3<R> {
        self.y.eval(p)
    }

    fn h<R: Real>(&self, p: &Vec3<R>) -> R {
        self.h.eval(p)
    }

    fn grad_h<R: Real>(&self, p: &Vec3<R>) -> Vec3<R> {
        Vec3([self.grad[0].eval(p), self.grad[1].eval(p), self.grad[2].eval(p)])
    }

    fn hess_h<R: Real>(&self, p: &Vec3<R>) -> Option<Mat3<R>> {
        let mut m = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = self.hess[i][j].eval(p);
            }
        }
        Some(m)
    }

    fn jacobian<R: Real>(&self, which: Which, p: &Vec3<R>) -> Option<Mat3<R>> {
        Some(match which {
            Which::X => self.x.jacobian(p),
            Which::Y => self.y.jacobian(p),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionTag {
    Crossing,
    Sliding,
    Escaping,
    TangencyX,
    TangencyY,
    TangencyBoth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FoldKind {
    VisibleFold,
    InvisibleFold,
    HigherOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionClass {
    pub tag: RegionTag,
    /// Set for tangency tags only.
    pub fold_kind: Option<FoldKind>,
    /// The other field is transverse to `M` at the tangency.
    pub regular_fold: bool,
}

fn check_gradient<S: Dynamics, R: Real>(sys: &S, p: &Vec3<R>, tol: &Tolerances) -> Result<Vec3<R>> {
    let g = sys.grad_h(p);
    let n = g.norm().to_f64();
    if n <= tol.grad_tol && sys.h(p).to_f64().abs() < tol.h_tol {
        return Err(Error::GradientDegenerate { point: p.to_f64(), norm: n });
    }
    Ok(g)
}

/// `(Xh, Yh) = (<grad h, X>, <grad h, Y>)` at `p`.
pub fn lie_derivatives<S: Dynamics, R: Real>(sys: &S, p: &Vec3<R>, tol: &Tolerances) -> Result<(R, R)> {
    let g = check_gradient(sys, p, tol)?;
    Ok((g.dot(&sys.x_field(p)), g.dot(&sys.y_field(p))))
}

/// Unchecked Lie derivative `Wh`; used in inner loops.
#[inline]
pub fn lie<S: Dynamics, R: Real>(sys: &S, which: Which, p: &Vec3<R>) -> R {
    sys.grad_h(p).dot(&sys.field(which, p))
}

/// Second Lie derivative `W^2 h = d/dt (Wh)` along the flow of `W`.
pub fn second_lie<S: Dynamics, R: Real>(sys: &S, p: &Vec3<R>, which: Which, tol: &Tolerances) -> R {
    let w = sys.field(which, p);
    if let (Some(hess), Some(jac)) = (sys.hess_h(p), sys.jacobian(which, p)) {
        let g = sys.grad_h(p);
        // grad(Wh) = H w + J^T grad h
        let grad_wh = hess.mul_vec(&w) + jac.transpose_mul_vec(&g);
        return grad_wh.dot(&w);
    }
    let e = R::lit(tol.fd_step);
    let a = p.axpy(e, &w);
    let b = p.axpy(-e, &w);
    (lie(sys, which, &a) - lie(sys, which, &b)) / (e + e)
}

fn fold_kind<R: Real>(w2h: R, which: Which, tol: f64) -> FoldKind {
    let v = w2h.to_f64();
    // X curves away from M (into h > 0) when X^2 h > 0; Y when Y^2 h < 0.
    let visible_sign = match which {
        Which::X => v,
        Which::Y => -v,
    };
    if visible_sign > tol {
        FoldKind::VisibleFold
    } else if visible_sign < -tol {
        FoldKind::InvisibleFold
    } else {
        FoldKind::HigherOrder
    }
}

/// Classify a point of `M` by the signs of `Xh` and `Yh`.
pub fn classify<S: Dynamics, R: Real>(sys: &S, p: &Vec3<R>, tol: &Tolerances) -> Result<RegionClass> {
    let hv = sys.h(p).to_f64();
    if hv.abs() >= tol.h_tol {
        return Err(Error::NotOnManifold { point: p.to_f64(), h: hv });
    }
    let (xh, yh) = lie_derivatives(sys, p, tol)?;
    Ok(classify_from_lie(sys, p, xh.to_f64(), yh.to_f64(), tol))
}

pub(crate) fn classify_from_lie<S: Dynamics, R: Real>(
    sys: &S,
    p: &Vec3<R>,
    xh: f64,
    yh: f64,
    tol: &Tolerances,
) -> RegionClass {
    let t = tol.tol;
    let x_tan = xh.abs() <= t;
    let y_tan = yh.abs() <= t;
    let plain = |tag| RegionClass { tag, fold_kind: None, regular_fold: false };
    match (x_tan, y_tan) {
        (true, true) => {
            RegionClass { tag: RegionTag::TangencyBoth, fold_kind: Some(FoldKind::HigherOrder), regular_fold: false }
        }
        (true, false) => RegionClass {
            tag: RegionTag::TangencyX,
            fold_kind: Some(fold_kind(second_lie(sys, p, Which::X, tol), Which::X, t)),
            regular_fold: true,
        },
        (false, true) => RegionClass {
            tag: RegionTag::TangencyY,
            fold_kind: Some(fold_kind(second_lie(sys, p, Which::Y, tol), Which::Y, t)),
            regular_fold: true,
        },
        (false, false) => {
            if xh * yh > 0.0 {
                plain(RegionTag::Crossing)
            } else if xh < 0.0 {
                plain(RegionTag::Sliding)
            } else {
                plain(RegionTag::Escaping)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ShilnikovParams};

    fn model() -> PiecewiseSystem {
        build_model(ShilnikovParams::new(1.0, 1.0).unwrap())
    }

    /// Same system without analytic derivatives, exercising the fallbacks.
    struct Opaque(PiecewiseSystem);

    impl Dynamics for Opaque {
        fn x_field<R: Real>(&self, p: &Vec3<R>) -> Vec3<R> {
            self.0.x_field(p)
        }
        fn y_field<R: Real>(&self, p: &Vec3<R>) -> Vec3<R> {
            self.0.y_field(p)
        }
        fn h<R: Real>(&self, p: &Vec3<R>) -> R {
            self.0.h(p)
        }
    }

    fn p(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    #[test]
    fn lie_derivatives_at_origin_and_fold() {
        let sys = model();
        let tol = Tolerances::default();
        let (xh, yh) = lie_derivatives(&sys, &p(0.0, 0.0, 0.0), &tol).unwrap();
        assert_eq!((xh, yh), (-0.375, 0.375));
        let (xh, yh) = lie_derivatives(&sys, &p(1.5, 0.375, 0.0), &tol).unwrap();
        assert_eq!((xh, yh), (0.0, 0.375));
    }

    #[test]
    fn identical_fields_have_equal_lie_derivatives() {
        let sys = model();
        let same = PiecewiseSystem::new(sys.x.clone(), sys.x.clone(), sys.h.clone());
        let (xh, yh) = lie_derivatives(&same, &p(0.3, -0.7, 0.0), &Tolerances::default()).unwrap();
        assert_eq!(xh, yh);
    }

    #[test]
    fn classify_model_points() {
        let sys = model();
        let tol = Tolerances::default();
        assert_eq!(classify(&sys, &p(0.0, 1.0, 0.0), &tol).unwrap().tag, RegionTag::Crossing);
        assert_eq!(classify(&sys, &p(0.0, 0.0, 0.0), &tol).unwrap().tag, RegionTag::Sliding);
        let q0 = classify(&sys, &p(1.5, 0.375, 0.0), &tol).unwrap();
        assert_eq!(q0.tag, RegionTag::TangencyX);
        assert_eq!(q0.fold_kind, Some(FoldKind::VisibleFold));
        assert!(q0.regular_fold);
        let inv = classify(&sys, &p(0.5, 0.375, 0.0), &tol).unwrap();
        assert_eq!(inv.fold_kind, Some(FoldKind::InvisibleFold));
    }

    #[test]
    fn off_manifold_is_rejected() {
        let err = classify(&model(), &p(0.0, 0.0, 0.1), &Tolerances::default()).unwrap_err();
        assert_eq!(err.kind(), "not-on-manifold");
    }

    #[test]
    fn degenerate_gradient_is_reported() {
        let sys = model();
        // h = z^2 has a critical point on M.
        let h = Poly::new(vec![crate::poly::Monomial { coeff: 1.0, powers: [0, 0, 2] }]);
        let bad = PiecewiseSystem::new(sys.x.clone(), sys.y.clone(), h);
        let err = lie_derivatives(&bad, &p(0.0, 0.0, 0.0), &Tolerances::default()).unwrap_err();
        assert_eq!(err.kind(), "gradient-degenerate");
    }

    #[test]
    fn second_lie_values() {
        let sys = model();
        let tol = Tolerances::default();
        for x in [0.0, 0.7, 1.5, 2.5] {
            let v = second_lie(&sys, &p(x, 0.375, 0.0), Which::X, &tol);
            assert!((v - (x - 1.0)).abs() < 1e-14);
        }
        let v = second_lie(&sys, &p(0.2, 0.375, 0.0), Which::Y, &tol);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn finite_difference_fallback_matches_analytic() {
        let sys = model();
        let opaque = Opaque(sys.clone());
        let tol = Tolerances::default();
        let q = p(1.2, 0.1, 0.0);
        for which in [Which::X, Which::Y] {
            let a = second_lie(&sys, &q, which, &tol);
            let b = second_lie(&opaque, &q, which, &tol);
            assert!((a - b).abs() < 1e-7, "{which:?}: {a} vs {b}");
        }
        let g = opaque.grad_h(&q);
        assert!((g - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-9);
    }

    #[test]
    fn constant_fields_with_linear_h_have_zero_second_lie() {
        let c = |v: [f64; 3]| PolyField::new([Poly::constant(v[0]), Poly::constant(v[1]), Poly::constant(v[2])]);
        let h = Poly::new(vec![
            crate::poly::Monomial { coeff: 1.0, powers: [1, 0, 0] },
            crate::poly::Monomial { coeff: 2.0, powers: [0, 0, 1] },
        ]);
        let sys = PiecewiseSystem::new(c([1.0, 2.0, -1.0]), c([0.5, 0.0, 3.0]), h);
        let tol = Tolerances::default();
        assert_eq!(second_lie(&sys, &p(0.0, 0.0, 0.0), Which::X, &tol), 0.0);
        assert_eq!(second_lie(&sys, &p(0.0, 0.0, 0.0), Which::Y, &tol), 0.0);
    }
}

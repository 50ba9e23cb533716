//! The sliding vector field on `M^s ∪ M^e`, its zeros (pseudo-equilibria)
//! and the transversality of the sliding flow at regular folds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{lie, lie_derivatives, Dynamics, RegionTag, Tolerances, Which};
use crate::real::{Mat3, Real, Vec3};

/// `|Yh - Xh|` below this makes the convex combination ill-defined.
pub const DENOM_TOL: f64 = 1e-12;

/// `Z~ = (Yh X - Xh Y) / (Yh - Xh)` without checks.
#[inline]
pub fn sliding_vector<S: Dynamics, R: Real>(sys: &S, p: &Vec3<R>) -> Vec3<R> {
    let g = sys.grad_h(p);
    let x = sys.x_field(p);
    let y = sys.y_field(p);
    let xh = g.dot(&x);
    let yh = g.dot(&y);
    let d = yh - xh;
    (x.scale(yh) - y.scale(xh)).scale(R::one() / d)
}

/// Sliding vector field at a point of `M^s ∪ M^e` (or the limiting value at a
/// regular fold bounding those regions).
pub fn sliding_field<S: Dynamics, R: Real>(sys: &S, p: &Vec3<R>, tol: &Tolerances) -> Result<Vec3<R>> {
    let (xh, yh) = lie_derivatives(sys, p, tol)?;
    let d = yh - xh;
    if d.abs().to_f64() <= DENOM_TOL {
        return Err(Error::DenominatorDegenerate { point: p.to_f64(), denom: d.to_f64() });
    }
    Ok((sys.x_field(p).scale(yh) - sys.y_field(p).scale(xh)).scale(R::one() / d))
}

/// Gradient of the Lie derivative `Wh`.
pub fn grad_lie<S: Dynamics>(sys: &S, which: Which, p: &Vec3<f64>, fd: f64) -> Vec3<f64> {
    if let (Some(hess), Some(jac)) = (sys.hess_h(p), sys.jacobian(which, p)) {
        let w = sys.field(which, p);
        return hess.mul_vec(&w) + jac.transpose_mul_vec(&sys.grad_h(p));
    }
    let mut g = Vec3::zero();
    for i in 0..3 {
        let mut a = *p;
        let mut b = *p;
        a[i] += fd;
        b[i] -= fd;
        g[i] = (lie(sys, which, &a) - lie(sys, which, &b)) / (2.0 * fd);
    }
    g
}

/// Ambient Jacobian of `Z~` from the field Jacobians; `None` when the system
/// does not provide them.
pub fn sliding_jacobian_analytic<S: Dynamics>(sys: &S, p: &Vec3<f64>) -> Option<Mat3<f64>> {
    let jx = sys.jacobian(Which::X, p)?;
    let jy = sys.jacobian(Which::Y, p)?;
    sys.hess_h(p)?;
    let x = sys.x_field(p);
    let y = sys.y_field(p);
    let g = sys.grad_h(p);
    let (xh, yh) = (g.dot(&x), g.dot(&y));
    let gxh = grad_lie(sys, Which::X, p, 0.0);
    let gyh = grad_lie(sys, Which::Y, p, 0.0);
    let d = yh - xh;
    let num = x.scale(yh) - y.scale(xh);
    let gd = gyh - gxh;
    let mut m = Mat3::zero();
    for i in 0..3 {
        for j in 0..3 {
            let dnum = yh * jx.0[i][j] + x[i] * gyh[j] - xh * jy.0[i][j] - y[i] * gxh[j];
            m.0[i][j] = (dnum * d - num[i] * gd[j]) / (d * d);
        }
    }
    Some(m)
}

/// Local chart of `M`: `(u, v) -> origin + u e1 + v e2`, corrected onto `M`
/// by Newton steps along `grad h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentChart {
    pub origin: [f64; 3],
    pub e1: [f64; 3],
    pub e2: [f64; 3],
}

impl TangentChart {
    pub fn at<S: Dynamics>(sys: &S, origin: [f64; 3]) -> Self {
        let o = Vec3::from_f64(origin);
        let n = sys.grad_h(&o).normalized();
        let axes = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)];
        let a = axes.iter().min_by(|a, b| a.dot(&n).abs().total_cmp(&b.dot(&n).abs())).copied().unwrap();
        let e1 = (a - n.scale(a.dot(&n))).normalized();
        let e2 = n.cross(&e1);
        TangentChart { origin, e1: e1.0, e2: e2.0 }
    }

    pub fn embed<S: Dynamics>(&self, sys: &S, u: f64, v: f64) -> Vec3<f64> {
        let mut p = Vec3(self.origin).axpy(u, &Vec3(self.e1)).axpy(v, &Vec3(self.e2));
        for _ in 0..8 {
            let hv = sys.h(&p);
            if hv.abs() < 1e-15 {
                break;
            }
            let g = sys.grad_h(&p);
            p = p.axpy(-hv / g.dot(&g), &g);
        }
        p
    }

    pub fn project(&self, p: &Vec3<f64>) -> (f64, f64) {
        let d = *p - Vec3(self.origin);
        (d.dot(&Vec3(self.e1)), d.dot(&Vec3(self.e2)))
    }

    fn planar_field<S: Dynamics>(&self, sys: &S, u: f64, v: f64) -> Option<[f64; 2]> {
        let p = self.embed(sys, u, v);
        let (xh, yh) = (lie(sys, Which::X, &p), lie(sys, Which::Y, &p));
        if (yh - xh).abs() <= DENOM_TOL {
            return None;
        }
        let z = sliding_vector(sys, &p);
        Some([z.dot(&Vec3(self.e1)), z.dot(&Vec3(self.e2))])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EquilibriumKind {
    SaddleFocusUnstable,
    SaddleFocusStable,
    Node,
    Saddle,
    NonHyperbolic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoEquilibrium {
    pub location: [f64; 3],
    pub eigenvalues: [Complex; 2],
    pub kind: EquilibriumKind,
    /// Planar Jacobian in chart coordinates.
    pub jacobian: [[f64; 2]; 2],
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSearch {
    pub grid_n: usize,
    pub dedup_tol: f64,
    pub eq_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Eigenvalue real parts within this band count as non-hyperbolic.
    pub hyperbolic_tol: f64,
}

impl Default for EquilibriumSearch {
    fn default() -> Self {
        EquilibriumSearch {
            grid_n: 21,
            dedup_tol: 1e-6,
            eq_tol: 1e-10,
            max_iter: 100,
            max_halvings: 40,
            hyperbolic_tol: 1e-9,
        }
    }
}

/// Planar Jacobian of the chart-projected sliding field by central differences.
pub fn planar_jacobian_fd<S: Dynamics>(
    sys: &S,
    chart: &TangentChart,
    u: f64,
    v: f64,
    step: f64,
) -> Option<[[f64; 2]; 2]> {
    let fu1 = chart.planar_field(sys, u + step, v)?;
    let fu0 = chart.planar_field(sys, u - step, v)?;
    let fv1 = chart.planar_field(sys, u, v + step)?;
    let fv0 = chart.planar_field(sys, u, v - step)?;
    let h2 = 2.0 * step;
    Some([[(fu1[0] - fu0[0]) / h2, (fv1[0] - fv0[0]) / h2], [(fu1[1] - fu0[1]) / h2, (fv1[1] - fv0[1]) / h2]])
}

/// Planar Jacobian from the analytic ambient Jacobian, restricted to the
/// tangent plane of `M` at the embedded point.
pub fn planar_jacobian_analytic<S: Dynamics>(sys: &S, chart: &TangentChart, u: f64, v: f64) -> Option<[[f64; 2]; 2]> {
    let p = chart.embed(sys, u, v);
    let dz = sliding_jacobian_analytic(sys, &p)?;
    let g = sys.grad_h(&p);
    let gg = g.dot(&g);
    let tangent = |e: [f64; 3]| {
        let e = Vec3(e);
        e.axpy(-e.dot(&g) / gg, &g)
    };
    let (e1, e2) = (Vec3(chart.e1), Vec3(chart.e2));
    let (t1, t2) = (tangent(chart.e1), tangent(chart.e2));
    let c1 = dz.mul_vec(&t1);
    let c2 = dz.mul_vec(&t2);
    Some([[e1.dot(&c1), e1.dot(&c2)], [e2.dot(&c1), e2.dot(&c2)]])
}

pub fn eigenvalues_2x2(j: [[f64; 2]; 2]) -> [Complex; 2] {
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let half = tr / 2.0;
    let disc = half * half - det;
    if disc < 0.0 {
        let im = (-disc).sqrt();
        [Complex { re: half, im }, Complex { re: half, im: -im }]
    } else {
        let r = disc.sqrt();
        [Complex { re: half + r, im: 0.0 }, Complex { re: half - r, im: 0.0 }]
    }
}

pub fn classify_equilibrium(j: [[f64; 2]; 2], hyperbolic_tol: f64) -> EquilibriumKind {
    let ev = eigenvalues_2x2(j);
    if ev.iter().any(|e| e.re.abs() <= hyperbolic_tol) {
        return EquilibriumKind::NonHyperbolic;
    }
    if ev[0].im != 0.0 {
        if ev[0].re > 0.0 {
            EquilibriumKind::SaddleFocusUnstable
        } else {
            EquilibriumKind::SaddleFocusStable
        }
    } else if ev[0].re.signum() == ev[1].re.signum() {
        EquilibriumKind::Node
    } else {
        EquilibriumKind::Saddle
    }
}

fn newton_root<S: Dynamics>(
    sys: &S,
    chart: &TangentChart,
    start: [f64; 2],
    opts: &EquilibriumSearch,
    fd_step: f64,
) -> Option<([f64; 2], f64)> {
    let norm = |f: [f64; 2]| f[0].hypot(f[1]);
    let (mut u, mut v) = (start[0], start[1]);
    let mut f = chart.planar_field(sys, u, v)?;
    let mut res = norm(f);
    for _ in 0..opts.max_iter {
        if res < opts.eq_tol * 1e-6 {
            return Some(([u, v], res));
        }
        let j = planar_jacobian_analytic(sys, chart, u, v).or_else(|| planar_jacobian_fd(sys, chart, u, v, fd_step))?;
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 {
            return None;
        }
        let du = (j[1][1] * f[0] - j[0][1] * f[1]) / det;
        let dv = (-j[1][0] * f[0] + j[0][0] * f[1]) / det;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let (nu, nv) = (u - lambda * du, v - lambda * dv);
            if let Some(nf) = chart.planar_field(sys, nu, nv) {
                let nr = norm(nf);
                if nr < res {
                    u = nu;
                    v = nv;
                    f = nf;
                    res = nr;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (res < opts.eq_tol).then_some(([u, v], res))
}

/// Multi-start damped Newton search for zeros of the sliding field inside
/// `|(u, v)|_inf <= search_radius` of the chart.
pub fn find_pseudo_equilibria<S: Dynamics>(
    sys: &S,
    chart: &TangentChart,
    search_radius: f64,
    opts: &EquilibriumSearch,
    tol: &Tolerances,
) -> Vec<PseudoEquilibrium> {
    let n = opts.grid_n.max(1);
    let mut roots: Vec<[f64; 2]> = Vec::new();
    let mut found = Vec::new();
    for i in 0..n {
        for k in 0..n {
            let t =
                |q: usize| if n == 1 { 0.0 } else { -search_radius + 2.0 * search_radius * q as f64 / (n - 1) as f64 };
            let Some((uv, res)) = newton_root(sys, chart, [t(i), t(k)], opts, tol.fd_step) else {
                continue;
            };
            if uv[0].abs() > search_radius * (1.0 + 1e-9) || uv[1].abs() > search_radius * (1.0 + 1e-9) {
                continue;
            }
            if roots.iter().any(|r| (r[0] - uv[0]).hypot(r[1] - uv[1]) < opts.dedup_tol) {
                continue;
            }
            let p = chart.embed(sys, uv[0], uv[1]);
            let Ok(cls) = crate::geometry::classify(sys, &p, tol) else { continue };
            if !matches!(cls.tag, RegionTag::Sliding | RegionTag::Escaping) {
                continue;
            }
            roots.push(uv);
            let jac = planar_jacobian_analytic(sys, chart, uv[0], uv[1])
                .or_else(|| planar_jacobian_fd(sys, chart, uv[0], uv[1], tol.fd_step));
            let (eigenvalues, kind, jacobian) = match jac {
                Some(j) => (eigenvalues_2x2(j), classify_equilibrium(j, opts.hyperbolic_tol), j),
                None => ([Complex { re: 0.0, im: 0.0 }; 2], EquilibriumKind::NonHyperbolic, [[0.0; 2]; 2]),
            };
            found.push(PseudoEquilibrium { location: p.0, eigenvalues, kind, jacobian, residual: res });
        }
    }
    found.sort_by(|a, b| a.location.partial_cmp(&b.location).unwrap());
    found
}

/// Component of the limiting sliding field at a regular fold along the
/// in-`M` normal of the fold line pointing out of the sliding region.
/// Non-zero certifies transversality of the sliding flow to the fold.
pub fn fold_transversality<S: Dynamics>(sys: &S, p: &Vec3<f64>, tol: &Tolerances) -> Result<f64> {
    let cls = crate::geometry::classify(sys, p, tol)?;
    let which = match cls.tag {
        RegionTag::TangencyX if cls.regular_fold => Which::X,
        RegionTag::TangencyY if cls.regular_fold => Which::Y,
        _ => return Err(Error::NonRegularFold { point: p.0 }),
    };
    let z = sliding_field(sys, p, tol)?;
    let g = sys.grad_h(p);
    let mut n = grad_lie(sys, which, p, tol.fd_step);
    n = n.axpy(-n.dot(&g) / g.dot(&g), &g);
    if which == Which::Y {
        n = -n;
    }
    let nn = n.norm();
    if nn == 0.0 {
        return Err(Error::NonRegularFold { point: p.0 });
    }
    Ok(z.dot(&n) / nn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{classify, PiecewiseSystem};
    use crate::models::{build_model, ShilnikovParams};
    use crate::poly::{Poly, PolyField};

    fn model(a: f64, b: f64) -> PiecewiseSystem {
        build_model(ShilnikovParams::new(a, b).unwrap())
    }

    fn closed_form_jacobian(a: f64, b: f64) -> [[f64; 2]; 2] {
        [[0.0, -4.0 * a * a / (3.0 * b * b)], [0.5, a / (6.0 * b)]]
    }

    #[test]
    fn sliding_field_values() {
        let sys = model(1.0, 1.0);
        let tol = Tolerances::default();
        let z = sliding_field(&sys, &Vec3::<f64>::zero(), &tol).unwrap();
        assert_eq!(z.0, [0.0, 0.0, 0.0]);
        let z = sliding_field(&sys, &Vec3::new(1.5, 0.375, 0.0), &tol).unwrap();
        assert_eq!(z.0, [-1.0, 0.5, 0.0]);
        let same = PiecewiseSystem::new(sys.x.clone(), sys.x.clone(), sys.h.clone());
        let err = sliding_field(&same, &Vec3::new(0.3, 0.0, 0.0), &tol).unwrap_err();
        assert_eq!(err.kind(), "denominator-degenerate");
    }

    #[test]
    fn identical_fields_slide_with_that_field() {
        // X and Y agree tangentially at the origin.
        let c = |v: [f64; 3]| PolyField::new([Poly::constant(v[0]), Poly::constant(v[1]), Poly::constant(v[2])]);
        let x = c([1.0, 2.0, -1.0]);
        let y = c([1.0, 2.0, 1.0]);
        let sys = PiecewiseSystem::new(x, y, Poly::linear(2, 1.0));
        let z = sliding_field(&sys, &Vec3::<f64>::zero(), &Tolerances::default()).unwrap();
        assert_eq!(z.0, [1.0, 2.0, 0.0]);
    }

    #[test]
    fn origin_is_unstable_pseudo_saddle_focus() {
        let sys = model(1.0, 1.0);
        let chart = TangentChart::at(&sys, [0.0, 0.0, 0.0]);
        assert_eq!(chart.e1, [1.0, 0.0, 0.0]);
        assert_eq!(chart.e2, [0.0, 1.0, 0.0]);
        let eq = find_pseudo_equilibria(&sys, &chart, 0.3, &EquilibriumSearch::default(), &Tolerances::default());
        assert_eq!(eq.len(), 1);
        let e = &eq[0];
        assert!(e.location.iter().all(|v| v.abs() < 1e-10));
        assert_eq!(e.kind, EquilibriumKind::SaddleFocusUnstable);
        assert!((e.eigenvalues[0].re - 1.0 / 12.0).abs() < 1e-9);
        assert!((e.eigenvalues[0].im.abs() - 95f64.sqrt() / 12.0).abs() < 1e-9);
    }

    #[test]
    fn no_roots_far_from_origin() {
        let sys = model(1.0, 1.0);
        let chart = TangentChart::at(&sys, [-1.0, -1.0, 0.0]);
        let eq = find_pseudo_equilibria(&sys, &chart, 0.3, &EquilibriumSearch::default(), &Tolerances::default());
        assert!(eq.is_empty());
    }

    #[test]
    fn saddle_focus_persists_for_other_parameters() {
        let sys = model(2.0, 1.0);
        let chart = TangentChart::at(&sys, [0.0, 0.0, 0.0]);
        let eq = find_pseudo_equilibria(&sys, &chart, 0.05, &EquilibriumSearch::default(), &Tolerances::default());
        assert_eq!(eq.len(), 1);
        assert_eq!(eq[0].kind, EquilibriumKind::SaddleFocusUnstable);
    }

    #[test]
    fn jacobians_match_closed_form() {
        for a in [0.5, 1.0, 2.0] {
            for b in [0.5, 1.0, 2.0] {
                let sys = model(a, b);
                let chart = TangentChart::at(&sys, [0.0, 0.0, 0.0]);
                let cf = closed_form_jacobian(a, b);
                let fd = planar_jacobian_fd(&sys, &chart, 0.0, 0.0, 1e-6).unwrap();
                let an = planar_jacobian_analytic(&sys, &chart, 0.0, 0.0).unwrap();
                for i in 0..2 {
                    for j in 0..2 {
                        assert!((fd[i][j] - cf[i][j]).abs() < 1e-6, "fd {a} {b}");
                        assert!((an[i][j] - cf[i][j]).abs() < 1e-12, "analytic {a} {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn transversality_at_model_folds() {
        let tol = Tolerances::default();
        let v = fold_transversality(&model(1.0, 1.0), &Vec3::new(1.5, 0.375, 0.0), &tol).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let v = fold_transversality(&model(2.0, 3.0), &Vec3::new(4.5, 27.0 / 16.0, 0.0), &tol).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        let err = fold_transversality(&model(1.0, 1.0), &Vec3::new(0.0, 0.0, 0.0), &tol).unwrap_err();
        assert_eq!(err.kind(), "non-regular-fold");
    }

    #[test]
    fn tangential_toy_field_is_not_transverse() {
        // X = (1, 0, y), Y = (1, 0, 1), h = z: fold of X along y = 0 and the
        // limiting sliding field (1, 0, 0) runs along the fold line.
        let x = PolyField::new([Poly::constant(1.0), Poly::constant(0.0), Poly::linear(1, 1.0)]);
        let y = PolyField::new([Poly::constant(1.0), Poly::constant(0.0), Poly::constant(1.0)]);
        let sys = PiecewiseSystem::new(x, y, Poly::linear(2, 1.0));
        let v = fold_transversality(&sys, &Vec3::new(0.3, 0.0, 0.0), &Tolerances::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn sliding_field_is_tangent_and_convex() {
        let sys = model(1.0, 1.0);
        let tol = Tolerances::default();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut n = 0;
        while n < 1000 {
            let p = Vec3::new(-3.0 + 6.0 * next(), -3.0 + 3.3 * next(), 0.0);
            if classify(&sys, &p, &tol).unwrap().tag != RegionTag::Sliding {
                continue;
            }
            n += 1;
            let z = sliding_field(&sys, &p, &tol).unwrap();
            let g = sys.grad_h(&p);
            assert!(g.dot(&z).abs() <= 1e-10 * z.norm().max(1e-300));
            let (xh, yh) = lie_derivatives(&sys, &p, &tol).unwrap();
            let s = yh / (yh - xh);
            assert!(s > 0.0 && s < 1.0);
            let x = sys.x_field(&p);
            let conv = x.axpy(-xh / (yh - xh), &(sys.y_field(&p) - x));
            assert!((conv - z).norm() < 1e-12 * (1.0 + z.norm()));
        }
    }
}

//! Certificates for a sliding Shilnikov connection through a fold point.

use serde::{Deserialize, Serialize};

use super::{build_section, return_derivative, FilippovReturnMap, Piece, ReturnMap, ReturnOptions};
use crate::error::{Error, Result};
use crate::geometry::{lie, second_lie, Dynamics, Which};
use crate::integrator::{flow_filippov, flow_slide_backward_observed, Control, Event, EventKind, Mode, Observer, Step};
use crate::models::ShilnikovParams;
use crate::real::{Dd, Real, Vec3};
use crate::sliding::{
    find_pseudo_equilibria, fold_transversality, EquilibriumKind, EquilibriumSearch, PseudoEquilibrium, TangentChart,
};

/// Radius at which expansion of the return map has been checked for the
/// model family.
pub fn recorded_radius(params: ShilnikovParams) -> f64 {
    0.05 * params.beta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    pub radius: f64,
    pub landing_tol: f64,
    /// Distances from `p0` at which the backward orbit of `q0` is sampled and
    /// flowed forward again.
    pub eps: Vec<f64>,
    pub approach_tol: f64,
    pub t_back_max: f64,
    pub returns: ReturnOptions,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            radius: 0.05,
            landing_tol: 1e-8,
            eps: vec![1e-3, 1e-4],
            approach_tol: 1e-4,
            t_back_max: 1e4,
            returns: ReturnOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

impl Certificate {
    fn new(name: &str, passed: bool, value: f64, detail: impl Into<String>) -> Self {
        Certificate { name: name.into(), passed, value, detail: detail.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShilnikovReport {
    pub q0: Option<[f64; 3]>,
    pub x2h: Option<f64>,
    pub landing: Option<[f64; 3]>,
    pub t0: Option<f64>,
    pub pseudo_equilibrium: Option<PseudoEquilibrium>,
    pub transversality: Option<f64>,
    pub closest_approach: Option<f64>,
    pub certificates: Vec<Certificate>,
    pub passed: bool,
}

struct Approach {
    p0: [f64; 3],
    eps: Vec<f64>,
    hits: Vec<Option<Vec3<f64>>>,
    target: f64,
    best: f64,
}

impl Approach {
    fn dist(&self, p: &Vec3<f64>) -> f64 {
        p.dist(&Vec3(self.p0))
    }
}

impl Observer<f64> for Approach {
    fn on_step(&mut self, _mode: Mode, step: &Step<f64>, _t_stop: f64) -> Control {
        let d = self.dist(&step.y1);
        self.best = self.best.min(d);
        for (i, e) in self.eps.iter().enumerate() {
            if self.hits[i].is_none() && d <= *e {
                self.hits[i] = Some(step.y1);
            }
        }
        if self.best < self.target && self.hits.iter().all(Option::is_some) {
            Control::Stop
        } else {
            Control::Continue
        }
    }
}

struct FirstExit(Option<Vec3<f64>>);

impl Observer<f64> for FirstExit {
    fn on_event(&mut self, ev: &Event<f64>) -> Control {
        if ev.kind == EventKind::ExitSlideAtFold {
            self.0 = Some(ev.location);
            return Control::Stop;
        }
        Control::Continue
    }
}

pub fn verify_shilnikov<S: Dynamics>(sys: &S, q0_guess: [f64; 3], opts: &VerifyOptions) -> Result<ShilnikovReport> {
    let ro = &opts.returns;
    let tol = &ro.tol;
    let mut rep = ShilnikovReport {
        q0: None,
        x2h: None,
        landing: None,
        t0: None,
        pseudo_equilibrium: None,
        transversality: None,
        closest_approach: None,
        certificates: Vec::new(),
        passed: false,
    };
    let sec = match build_section(sys, q0_guess, opts.radius, 3, ro) {
        Ok(sec) => sec,
        Err(e @ (Error::FoldRootFailure { .. } | Error::NonRegularFold { .. } | Error::VisibilityViolation { .. })) => {
            let value = match e {
                Error::VisibilityViolation { value, .. } => value,
                _ => f64::NAN,
            };
            rep.certificates.push(Certificate::new("fold", false, value, e.to_string()));
            return Ok(rep);
        }
        Err(e) => return Err(e),
    };
    let q0 = Vec3::from_f64(sec.center_f64());
    rep.q0 = Some(q0.0);
    let xh = lie(sys, Which::X, &sec.center).to_f64();
    rep.certificates.push(Certificate::new("fold-root", xh.abs() <= 1e-12, xh, "Xh(q0)"));
    let x2h = second_lie(sys, &q0, Which::X, tol);
    rep.x2h = Some(x2h);
    rep.certificates.push(Certificate::new("visible-fold", x2h > tol.tol, x2h, "X^2 h(q0) > 0"));

    match fold_transversality(sys, &q0, tol) {
        Ok(v) => {
            rep.transversality = Some(v);
            rep.certificates.push(Certificate::new(
                "transversality",
                v > tol.tol,
                v,
                "sliding field crosses the fold line outward",
            ));
        }
        Err(e) => rep.certificates.push(Certificate::new("transversality", false, f64::NAN, e.to_string())),
    }

    // Forward connection: the X-flight from q0 must land on a hyperbolic
    // pseudo saddle-focus.
    let landing = Vec3::from_f64(sec.landing_f64());
    rep.landing = Some(landing.0);
    rep.t0 = Some(sec.t0);
    rep.certificates.push(Certificate::new("flight-time", sec.t0 > 0.0, sec.t0, "X-flight time q0 -> landing"));
    let chart = TangentChart::at(sys, landing.0);
    let search = 0.1 * (q0.dist(&landing) + opts.radius);
    let eqs = find_pseudo_equilibria(sys, &chart, search, &EquilibriumSearch::default(), tol);
    let nearest = eqs.into_iter().min_by(|a, b| {
        let da = Vec3(a.location).dist(&landing);
        let db = Vec3(b.location).dist(&landing);
        da.total_cmp(&db)
    });
    match nearest {
        Some(pe) => {
            let d = Vec3(pe.location).dist(&landing);
            rep.certificates.push(Certificate::new(
                "landing-is-pseudo-equilibrium",
                d <= opts.landing_tol,
                d,
                format!("nearest pseudo-equilibrium at {:?}", pe.location),
            ));
            rep.certificates.push(Certificate::new(
                "saddle-focus",
                pe.kind == EquilibriumKind::SaddleFocusUnstable,
                pe.eigenvalues[0].re,
                format!("{:?}", pe.kind),
            ));
            rep.pseudo_equilibrium = Some(pe);
        }
        None => {
            rep.certificates.push(Certificate::new(
                "landing-is-pseudo-equilibrium",
                false,
                f64::INFINITY,
                "no pseudo-equilibrium near the landing point",
            ));
        }
    }

    // Backward connection, checked against the pseudo-equilibrium actually
    // found (or the landing point when there is none).
    let p0 = rep.pseudo_equilibrium.map(|pe| pe.location).unwrap_or(landing.0);
    let mut eps = opts.eps.clone();
    eps.sort_by(|a, b| b.total_cmp(a));
    let mut obs = Approach { p0, hits: vec![None; eps.len()], eps, target: opts.approach_tol, best: f64::INFINITY };
    let mut io = ro.integrator;
    io.record_samples = false;
    let back = flow_slide_backward_observed(sys, &q0, opts.t_back_max, &io, &mut obs);
    rep.closest_approach = Some(obs.best);
    let approached = back.is_ok() && obs.best < opts.approach_tol;
    rep.certificates.push(Certificate::new(
        "backward-approach",
        approached,
        obs.best,
        format!("closest distance of the backward sliding orbit of q0 to p0 (< {:e})", opts.approach_tol),
    ));
    for (e, hit) in obs.eps.iter().zip(&obs.hits) {
        let name = format!("expelled-to-section@{e:e}");
        let Some(p) = hit else {
            rep.certificates.push(Certificate::new(&name, false, f64::NAN, "backward orbit never came that close"));
            continue;
        };
        let mut fe = FirstExit(None);
        let run = flow_filippov(sys, p, 10.0 * opts.t_back_max, &io, tol, &mut fe);
        match (run, fe.0) {
            (Ok(_), Some(x)) => {
                let s = sec.coord(&x);
                rep.certificates.push(Certificate::new(
                    &name,
                    s.abs() <= opts.radius,
                    s,
                    format!("first fold exit of the sliding flow from distance {:e}", obs.dist(p)),
                ));
            }
            (Ok(_), None) => rep.certificates.push(Certificate::new(&name, false, f64::NAN, "no fold exit")),
            (Err(err), _) => rep.certificates.push(Certificate::new(&name, false, f64::NAN, err.to_string())),
        }
    }

    rep.passed = rep.certificates.iter().all(|c| c.passed);
    Ok(rep)
}

/// Halve `r` from `r_init` until `|pi'| > 1` at `n` branch-interior points
/// spread over the pieces found at `resolution`; `None` if `max_halvings` is
/// not enough.
pub fn calibrate_radius<S: Dynamics + Clone>(
    sys: &S,
    q0_guess: [f64; 3],
    r_init: f64,
    n: usize,
    resolution: usize,
    max_halvings: usize,
    opts: &ReturnOptions,
) -> Result<Option<f64>> {
    let mut r = r_init;
    for _ in 0..=max_halvings {
        let map = FilippovReturnMap::build(sys.clone(), q0_guess, r, 401, *opts)?;
        let pieces = map.pieces(resolution)?;
        if min_interior_slope(&map, &pieces, n).is_none_or(|m| m > 1.0) {
            return Ok(Some(r));
        }
        r /= 2.0;
    }
    Ok(None)
}

/// Smallest `|pi'|` over [`interior_slopes`].
pub fn min_interior_slope<M: ReturnMap + ?Sized>(map: &M, pieces: &[Piece], n: usize) -> Option<f64> {
    interior_slopes(map, pieces, n).into_iter().map(|(_, d)| d.abs()).min_by(f64::total_cmp)
}

/// `(s, pi'(s))` at about `n` points spread evenly over the interiors of
/// `pieces`, keeping those whose derivative stencil stays on one branch.
pub fn interior_slopes<M: ReturnMap + ?Sized>(map: &M, pieces: &[Piece], n: usize) -> Vec<(f64, f64)> {
    if pieces.is_empty() {
        return Vec::new();
    }
    let per = n.div_ceil(pieces.len()).max(1);
    let pts: Vec<(Dd, f64)> = pieces
        .iter()
        .flat_map(|p| {
            let w = p.width();
            (1..=per)
                .map(move |i| (p.lo + w * Dd::from(i as f64 / (per + 1) as f64), 1e-3 * w.to_f64() / (per + 1) as f64))
        })
        .collect();
    slopes_at(map, &pts)
}

/// [`interior_slopes`] on a uniform `n`-point grid of `(-r, r)` (end points
/// excluded). Branches are thin, so such a grid may contain no interior point.
pub fn grid_interior_slopes<M: ReturnMap + ?Sized>(map: &M, n: usize) -> Vec<(f64, f64)> {
    let r = map.radius();
    let pts: Vec<(Dd, f64)> = (1..=n).map(|i| (Dd::from(-r + 2.0 * r * i as f64 / (n + 1) as f64), 1e-7 * r)).collect();
    slopes_at(map, &pts)
}

fn slopes_at<M: ReturnMap + ?Sized>(map: &M, pts: &[(Dd, f64)]) -> Vec<(f64, f64)> {
    use rayon::prelude::*;
    pts.par_iter()
        .filter_map(|&(s, delta)| {
            return_derivative(map, s, delta.min(1e-7 * map.radius())).ok().map(|d| (s.to_f64(), d))
        })
        .collect()
}

//! Fold-line section near a sliding Shilnikov orbit, its first return map,
//! the η-count coding of returns, and the finite-depth symbolic machinery
//! built on top (cylinders, periodic points, word counts).
//!
//! All return-map arithmetic is carried out in double-double precision: the
//! map is strongly expanding on thin branches, so depth-2 quantities already
//! need more than 53 bits.

mod polyline;
mod structure;
mod verify;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{classify, lie, second_lie, Dynamics, FoldKind, RegionTag, Tolerances, Which};
use crate::integrator::{
    flow_filippov, flow_smooth, Control, Event, EventKind, IntegratorOptions, Mode, Observer, Step,
};
use crate::real::{Dd, Real, Vec3};
use crate::sliding::{grad_lie, TangentChart};

pub use polyline::Polyline;
pub use structure::{
    build_structure, count_words, cylinder_of_path, cylinders, entropy_estimate, entropy_of, enumerate_words,
    find_path, find_paths, find_periodic, locate_cylinder, path_word, scan_pieces, EntropyEstimate, PeriodicPoint,
    PeriodicRow, Piece, PieceRow, Structure, DEFAULT_PERIODIC_SCAN,
};
pub use verify::{
    calibrate_radius, grid_interior_slopes, interior_slopes, min_interior_slope, recorded_radius, verify_shilnikov,
    Certificate, ShilnikovReport, VerifyOptions,
};

/// Half-interval index of a section coordinate; `s = 0` goes to half 1.
pub fn half_of<R: Real>(s: R) -> u8 {
    if s < R::zero() {
        0
    } else {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReturnOptions {
    pub integrator: IntegratorOptions,
    pub tol: Tolerances,
    /// Time budget per return; `0` means `400 t0`.
    pub t_max: f64,
    pub max_excursions: u32,
    /// Crossings closer than this fraction of `|start - p0|` to the start of
    /// a slide are not counted (the landing point itself lies on `J`).
    pub landing_exclusion: f64,
    /// Dense-output points per step used for crossing tests.
    pub crossing_subdiv: usize,
    /// When positive, the domain box is this multiple of the section's
    /// length scale `|q0|_inf + |q0 - p0| + r`.
    pub domain_scale: f64,
}

impl Default for ReturnOptions {
    fn default() -> Self {
        ReturnOptions {
            integrator: IntegratorOptions { record_samples: false, ..IntegratorOptions::default() },
            tol: Tolerances::default(),
            t_max: 0.0,
            max_excursions: 8,
            landing_exclusion: 1e-3,
            crossing_subdiv: 4,
            domain_scale: 20.0,
        }
    }
}

/// Section on the fold line through `q0`, with the curve `J` of first
/// landing points of its X-flights.
#[derive(Clone, Debug)]
pub struct Section {
    pub center: Vec3<Dd>,
    /// Unit tangent of the fold line (orientation `grad(Xh) x grad h`).
    pub frame: [f64; 3],
    pub radius: f64,
    /// Landing point of the X-flight from `q0`.
    pub landing: Vec3<Dd>,
    pub t0: f64,
    pub chart: TangentChart,
    /// `J` sampled at `n_samples` coordinates, in chart coordinates.
    pub j: Polyline,
    pub j0: Polyline,
    pub j1: Polyline,
    normal: [f64; 3],
    transverse: [f64; 3],
    chord_inv: [[f64; 2]; 2],
}

fn minimal_norm_step<S: Dynamics>(sys: &S, p: &Vec3<f64>, fd: f64) -> Option<(Vec3<f64>, f64)> {
    let g1 = sys.grad_h(p);
    let g2 = grad_lie(sys, Which::X, p, fd);
    let f = [sys.h(p), lie(sys, Which::X, p)];
    let (a, b, c) = (g1.dot(&g1), g1.dot(&g2), g2.dot(&g2));
    let det = a * c - b * b;
    if det.abs() < 1e-300 {
        return None;
    }
    let l1 = (c * f[0] - b * f[1]) / det;
    let l2 = (-b * f[0] + a * f[1]) / det;
    Some((g1.scale(l1) + g2.scale(l2), f[0].abs().max(f[1].abs())))
}

impl Section {
    pub fn center_f64(&self) -> [f64; 3] {
        self.center.to_f64()
    }

    pub fn landing_f64(&self) -> [f64; 3] {
        self.landing.to_f64()
    }

    /// Section coordinate of a point near the fold line.
    pub fn coord<R: Real>(&self, p: &Vec3<R>) -> R {
        let c: Vec3<R> = self.center.cast();
        (*p - c).dot(&Vec3::from_f64(self.frame))
    }

    /// Point of the fold line with coordinate `s`.
    pub fn embed<S: Dynamics, R: Real>(&self, sys: &S, s: R) -> Vec3<R> {
        let c: Vec3<R> = self.center.cast();
        let n = Vec3::<R>::from_f64(self.normal);
        let tv = Vec3::<R>::from_f64(self.transverse);
        let mut p = c.axpy(s, &Vec3::from_f64(self.frame));
        let m = self.chord_inv;
        let mut best = f64::INFINITY;
        for _ in 0..60 {
            let f0 = sys.h(&p);
            let f1 = lie(sys, Which::X, &p);
            let size = f0.abs().max(f1.abs()).to_f64();
            if size == 0.0 || size >= best {
                break;
            }
            best = size;
            let da = R::lit(m[0][0]) * f0 + R::lit(m[0][1]) * f1;
            let db = R::lit(m[1][0]) * f0 + R::lit(m[1][1]) * f1;
            p = p.axpy(-da, &n).axpy(-db, &tv);
        }
        p
    }

    fn chart_uv<R: Real>(&self, p: &Vec3<R>) -> [f64; 2] {
        let (u, v) = self.chart.project(&Vec3::from_f64(p.to_f64()));
        [u, v]
    }
}

/// Refine `q0`, check it is a visible regular fold, and sample `J`.
///
/// The fold root nearest `q0_guess` is moved along the fold line until its
/// X-flight lands on the nearest pseudo-equilibrium (or as close to it as
/// the fold line allows).
pub fn build_section<S: Dynamics>(
    sys: &S,
    q0_guess: [f64; 3],
    r: f64,
    n_samples: usize,
    opts: &ReturnOptions,
) -> Result<Section> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::DegenerateSection(format!("radius must be positive, got {r}")));
    }
    if n_samples < 3 {
        return Err(Error::DegenerateSection(format!("need at least 3 samples, got {n_samples}")));
    }
    // Odd counts keep q0 itself as the vertex splitting J0 from J1.
    let n_samples = n_samples | 1;
    let tol = &opts.tol;

    let mut sec = section_at(sys, q0_guess, r, opts)?;
    if let Some(s) = connection_offset(sys, &sec, opts)? {
        let moved: Vec3<Dd> = sec.embed(sys, s);
        sec = section_at(sys, moved.to_f64(), r, opts)?;
    }
    let q0 = sec.center;
    let q0f = Vec3::from_f64(q0.to_f64());
    let cls = classify(sys, &q0f, tol)?;
    let x2h = second_lie(sys, &q0f, Which::X, tol);
    if cls.tag != RegionTag::TangencyX || cls.fold_kind != Some(FoldKind::VisibleFold) {
        return Err(Error::VisibilityViolation { point: q0f.0, value: x2h });
    }

    let (seg, ev) = flow_smooth(sys, Which::X, &q0, 1e3 * (1.0 + q0f.norm()), &opts.integrator, tol)?;
    if ev.kind != EventKind::HitManifold {
        return Err(Error::DegenerateSection(format!("X-flight from q0 ended with {:?}", ev.kind)));
    }
    sec.landing = seg.end;
    sec.t0 = seg.t_end.to_f64();
    sec.chart = TangentChart::at(sys, sec.landing.to_f64());
    sec.j = sample_j(sys, &sec, n_samples, opts)?;
    let mid = sec.j.len() / 2;
    sec.j0 = sec.j.slice(0, mid);
    sec.j1 = sec.j.slice(mid, sec.j.len() - 1);
    Ok(sec)
}

/// Fold root near `guess` with its frame; no landing data yet.
fn section_at<S: Dynamics>(sys: &S, guess: [f64; 3], r: f64, opts: &ReturnOptions) -> Result<Section> {
    let fd = opts.tol.fd_step;
    // Minimal-norm Newton on (h, Xh) = 0 (f64), then polished in
    // double-double along the same directions.
    let mut p = Vec3::from_f64(guess);
    let mut converged = false;
    for _ in 0..60 {
        let Some((d, size)) = minimal_norm_step(sys, &p, fd) else { break };
        if size < 1e-15 {
            converged = true;
            break;
        }
        p = p - d;
    }
    let fail = || Error::FoldRootFailure { point: guess };
    if !converged {
        let (.., size) = minimal_norm_step(sys, &p, fd).ok_or_else(fail)?;
        if size > 1e-12 {
            return Err(fail());
        }
    }

    let gh = sys.grad_h(&p);
    let gx = grad_lie(sys, Which::X, &p, fd);
    let frame = gx.cross(&gh);
    if frame.norm() < 1e-12 {
        return Err(Error::NonRegularFold { point: p.0 });
    }
    let frame = frame.normalized();
    let normal = gh.normalized();
    let transverse = frame.cross(&normal);
    let j = [[gh.dot(&normal), gh.dot(&transverse)], [gx.dot(&normal), gx.dot(&transverse)]];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    if det.abs() < 1e-300 {
        return Err(Error::NonRegularFold { point: p.0 });
    }
    let chord_inv = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];

    let mut sec = Section {
        center: p.cast(),
        frame: frame.0,
        radius: r,
        landing: Vec3::zero(),
        t0: 0.0,
        chart: TangentChart { origin: p.0, e1: frame.0, e2: transverse.0 },
        j: Polyline::new(vec![], vec![]),
        j0: Polyline::new(vec![], vec![]),
        j1: Polyline::new(vec![], vec![]),
        normal: normal.0,
        transverse: transverse.0,
        chord_inv,
    };
    sec.center = sec.embed(sys, Dd::from(0.0));
    if lie(sys, Which::X, &sec.center).abs().to_f64() > 1e-12 {
        return Err(fail());
    }
    Ok(sec)
}

fn landing_of<S: Dynamics, R: Real>(sys: &S, sec: &Section, s: R, opts: &ReturnOptions) -> Result<Vec3<R>> {
    let p: Vec3<R> = sec.embed(sys, s);
    let cap = 1e3 * (1.0 + p.norm().to_f64());
    let (_, ev) = flow_smooth(sys, Which::X, &p, cap, &opts.integrator, &opts.tol)?;
    if ev.kind != EventKind::HitManifold {
        return Err(Error::DegenerateSection(format!("X-flight from s = {} ended with {:?}", s.to_f64(), ev.kind)));
    }
    Ok(ev.location)
}

/// Fold coordinate whose landing point is closest to the pseudo-equilibrium
/// nearest the current landing point (Gauss-Newton); `None` when there is no
/// pseudo-equilibrium nearby.
fn connection_offset<S: Dynamics>(sys: &S, sec: &Section, opts: &ReturnOptions) -> Result<Option<Dd>> {
    let l0: Vec3<f64> = landing_of(sys, sec, 0.0, opts)?;
    let c = Vec3::from_f64(sec.center_f64());
    let scale = c.dist(&l0);
    let chart = TangentChart::at(sys, l0.0);
    let eqs = crate::sliding::find_pseudo_equilibria(
        sys,
        &chart,
        0.5 * scale + sec.radius,
        &crate::sliding::EquilibriumSearch::default(),
        &opts.tol,
    );
    let Some(pe) = eqs.into_iter().min_by(|a, b| Vec3(a.location).dist(&l0).total_cmp(&Vec3(b.location).dist(&l0)))
    else {
        return Ok(None);
    };
    let p0: Vec3<Dd> = Vec3::from_f64(pe.location);
    let d = 1e-6 * (1.0 + c.max_abs());
    let cap = Dd::from(0.5 * scale + sec.radius);
    let mut s = Dd::from(0.0);
    for _ in 0..30 {
        let sf = s.to_f64();
        let lp: Vec3<f64> = landing_of(sys, sec, sf + d, opts)?;
        let lm: Vec3<f64> = landing_of(sys, sec, sf - d, opts)?;
        let dl = (lp - lm).scale(0.5 / d);
        let l: Vec3<Dd> = landing_of(sys, sec, s, opts)?;
        let g = dl.dot(&dl);
        if g < 1e-300 {
            break;
        }
        let mut step = (l - p0).dot(&dl.cast()) / Dd::from(g);
        if step.abs() > cap {
            step = if step > Dd::from(0.0) { cap } else { -cap };
        }
        s = s - step;
        if step.abs().to_f64() <= 1e-30 * (1.0 + s.abs().to_f64()) {
            break;
        }
    }
    Ok(Some(s))
}

/// `J` at `n` uniformly spaced section coordinates (`n` rounded up to odd).
pub fn sample_j<S: Dynamics>(sys: &S, sec: &Section, n: usize, opts: &ReturnOptions) -> Result<Polyline> {
    use rayon::prelude::*;
    let n = n | 1;
    let r = sec.radius;
    let t_cap = 50.0 * sec.t0.max(1e-3) + 10.0;
    let pts: Vec<Result<([f64; 2], f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = if n == 1 { 0.0 } else { -r + 2.0 * r * i as f64 / (n - 1) as f64 };
            let s = if i * 2 + 1 == n { 0.0 } else { s };
            let p: Vec3<f64> = sec.embed(sys, s);
            let (_, ev) = flow_smooth(sys, Which::X, &p, t_cap, &opts.integrator, &opts.tol)?;
            if ev.kind != EventKind::HitManifold {
                return Err(Error::DegenerateSection(format!("X-flight from s = {s} ended with {:?}", ev.kind)));
            }
            Ok((sec.chart_uv(&ev.location), s))
        })
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for p in pts {
        let (uv, s) = p?;
        points.push(uv);
        params.push(s);
    }
    Ok(Polyline::new(points, params))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BranchKey {
    pub half_in: u8,
    pub half_out: u8,
    pub eta0: u32,
    pub eta1: u32,
    pub excursions: u32,
}

impl BranchKey {
    pub fn eta(&self, half: u8) -> u32 {
        if half == 0 {
            self.eta0
        } else {
            self.eta1
        }
    }

    /// Symbol pair seen by the coding: `(half_in, half_out, η_{half_out})`.
    pub fn label(&self) -> (u8, u8, u32) {
        (self.half_in, self.half_out, self.eta(self.half_out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnRecord {
    pub s_in: Dd,
    pub s_out: Dd,
    pub t_return: f64,
    pub eta0: u32,
    pub eta1: u32,
    pub half_in: u8,
    pub half_out: u8,
    pub excursions: u32,
}

impl ReturnRecord {
    pub fn key(&self) -> BranchKey {
        BranchKey {
            half_in: self.half_in,
            half_out: self.half_out,
            eta0: self.eta0,
            eta1: self.eta1,
            excursions: self.excursions,
        }
    }

    pub fn eta(&self, half: u8) -> u32 {
        self.key().eta(half)
    }
}

/// Serializable view of a [`ReturnRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnRow {
    pub s_in: f64,
    pub s_out: f64,
    pub eta0: u32,
    pub eta1: u32,
    pub half_in: u8,
    pub half_out: u8,
    pub t_return: f64,
    pub excursions: u32,
}

impl From<&ReturnRecord> for ReturnRow {
    fn from(r: &ReturnRecord) -> Self {
        ReturnRow {
            s_in: r.s_in.to_f64(),
            s_out: r.s_out.to_f64(),
            eta0: r.eta0,
            eta1: r.eta1,
            half_in: r.half_in,
            half_out: r.half_out,
            t_return: r.t_return,
            excursions: r.excursions,
        }
    }
}

/// A first return map on `[-r, r]`.
///
/// Besides [`ReturnMap::first_return`], implementors supply a continuous
/// extension of the return value across the ends of each branch
/// ([`ReturnMap::branch_value`]) and may override how branches are found.
pub trait ReturnMap: Sync {
    fn radius(&self) -> f64;

    fn first_return(&self, s: Dd) -> Result<ReturnRecord>;

    /// Value at `s` of the branch with key `key`, defined on the closure of
    /// the branch and slightly beyond its ends.
    fn branch_value(&self, _key: &BranchKey, s: Dd) -> Result<Dd> {
        Ok(self.first_return(s)?.s_out)
    }

    /// Cheap approximation of [`ReturnMap::branch_value`], used to find
    /// roots before polishing them at full precision.
    fn branch_value_f64(&self, key: &BranchKey, s: f64) -> Result<f64> {
        Ok(self.branch_value(key, Dd::from(s))?.to_f64())
    }

    /// Branch pieces visible at the given resolution.
    fn pieces(&self, resolution: usize) -> Result<Vec<Piece>> {
        scan_pieces(self, resolution)
    }
}

/// Return map of a Filippov system on a fold-line section.
#[derive(Clone, Debug)]
pub struct FilippovReturnMap<S> {
    pub sys: S,
    pub section: Section,
    pub opts: ReturnOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TraceGoal {
    FirstExit,
    Return,
}

struct Tracer<'a, R> {
    sec: &'a Section,
    goal: TraceGoal,
    r: f64,
    max_excursions: u32,
    exclusion: f64,
    subdiv: usize,
    half_in: u8,
    eta: [u32; 2],
    excursions: u32,
    mode: Option<Mode>,
    slides: u32,
    start_uv: [f64; 2],
    excl_radius: f64,
    last_uv: Option<[f64; 2]>,
    exit: Option<(R, R)>,
    gave_up: bool,
}

impl<R> Tracer<'_, R> {
    fn count_segment(&mut self, a: [f64; 2], b: [f64; 2]) {
        for (half, pl) in [(0usize, &self.sec.j0), (1usize, &self.sec.j1)] {
            for (t, _) in pl.crossings(a, b) {
                let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                if (x[0] - self.start_uv[0]).hypot(x[1] - self.start_uv[1]) <= self.excl_radius {
                    continue;
                }
                self.eta[half] += 1;
            }
        }
    }
}

impl<R: Real> Observer<R> for Tracer<'_, R> {
    fn on_step(&mut self, mode: Mode, step: &Step<R>, t_stop: R) -> Control {
        if mode == Mode::SmoothX && self.mode != Some(Mode::SmoothX) {
            self.excursions += 1;
        }
        self.mode = Some(mode);
        if mode != Mode::Slide {
            return Control::Continue;
        }
        let th_end = (t_stop - step.t0) / step.h;
        let n = self.subdiv.max(1);
        let mut prev = self.last_uv.unwrap_or_else(|| self.sec.chart_uv(&step.y0));
        for k in 1..=n {
            let th = th_end * R::lit(k as f64 / n as f64);
            let uv = self.sec.chart_uv(&step.at_theta(th));
            self.count_segment(prev, uv);
            prev = uv;
        }
        self.last_uv = Some(prev);
        Control::Continue
    }

    fn on_event(&mut self, ev: &Event<R>) -> Control {
        match ev.kind {
            EventKind::BeginSlide => {
                self.slides += 1;
                self.start_uv = self.sec.chart_uv(&ev.location);
                self.last_uv = Some(self.start_uv);
                let d = ev.location.to_f64();
                let p0 = self.sec.landing.to_f64();
                let dist = (0..3).map(|i| (d[i] - p0[i]).powi(2)).sum::<f64>().sqrt();
                self.excl_radius = self.exclusion * dist;
                if self.slides == 1 && self.excursions == 1 {
                    // The first landing point lies on J of the starting half.
                    self.eta[self.half_in as usize] += 1;
                }
                Control::Continue
            }
            EventKind::ExitSlideAtFold => {
                let s = self.sec.coord(&ev.location);
                if self.goal == TraceGoal::FirstExit || s.abs().to_f64() <= self.r {
                    self.exit = Some((s, ev.time));
                    return Control::Stop;
                }
                if self.excursions >= self.max_excursions {
                    self.gave_up = true;
                    return Control::Stop;
                }
                self.last_uv = None;
                Control::Continue
            }
            _ => Control::Continue,
        }
    }
}

impl<S: Dynamics> FilippovReturnMap<S> {
    pub fn new(sys: S, section: Section, opts: ReturnOptions) -> Self {
        FilippovReturnMap { sys, section, opts }
    }

    /// Build the section and the map in one go.
    pub fn build(sys: S, q0_guess: [f64; 3], r: f64, n_samples: usize, mut opts: ReturnOptions) -> Result<Self> {
        let section = build_section(&sys, q0_guess, r, n_samples, &opts)?;
        if opts.domain_scale > 0.0 {
            let c: Vec3<f64> = Vec3::from_f64(section.center_f64());
            let l: Vec3<f64> = Vec3::from_f64(section.landing_f64());
            opts.integrator.domain_radius = opts.domain_scale * (c.max_abs() + c.dist(&l) + r);
        }
        Ok(FilippovReturnMap { sys, section, opts })
    }

    fn t_budget(&self) -> f64 {
        if self.opts.t_max > 0.0 {
            self.opts.t_max
        } else {
            400.0 * self.section.t0
        }
    }

    fn trace<R: Real>(&self, s: R, goal: TraceGoal) -> Result<ReturnRecord> {
        let r = self.section.radius;
        let mut tr = Tracer {
            sec: &self.section,
            goal,
            r,
            max_excursions: self.opts.max_excursions.max(1),
            exclusion: self.opts.landing_exclusion,
            subdiv: self.opts.crossing_subdiv,
            half_in: half_of(s),
            eta: [0, 0],
            excursions: 0,
            mode: None,
            slides: 0,
            start_uv: [0.0; 2],
            excl_radius: 0.0,
            last_uv: None,
            exit: None,
            gave_up: false,
        };
        let p = self.section.embed(&self.sys, s);
        let t_max = self.t_budget();
        let traj = flow_filippov(&self.sys, &p, t_max, &self.opts.integrator, &self.opts.tol, &mut tr)?;
        if let Some((s_out, t)) = tr.exit {
            return Ok(ReturnRecord {
                s_in: crate::real::cast(s),
                s_out: crate::real::cast(s_out),
                t_return: t.to_f64(),
                eta0: tr.eta[0],
                eta1: tr.eta[1],
                half_in: half_of(s),
                half_out: half_of(s_out),
                excursions: tr.excursions,
            });
        }
        let last = traj.last_event().map(|e| (e.kind, e.time.to_f64()));
        match last {
            Some((EventKind::ReachPseudoEquilibrium, t)) => Err(Error::ReachPseudoEquilibrium { t }),
            Some((EventKind::SingularTangency, t)) => Err(Error::SingularTangency { t }),
            _ => Err(Error::Escaped { t_max }),
        }
    }

    /// Section coordinate of the first fold exit of the orbit of `s`,
    /// wherever it lies on the fold line.
    pub fn first_exit(&self, s: Dd) -> Result<ReturnRecord> {
        self.trace(s, TraceGoal::FirstExit)
    }

    /// [`Self::first_exit`] in plain double precision.
    pub fn first_exit_f64(&self, s: f64) -> Result<ReturnRecord> {
        self.trace(s, TraceGoal::FirstExit)
    }
}

impl<S: Dynamics> ReturnMap for FilippovReturnMap<S> {
    fn radius(&self) -> f64 {
        self.section.radius
    }

    fn first_return(&self, s: Dd) -> Result<ReturnRecord> {
        if s.abs().to_f64() > self.section.radius * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!("section coordinate {} outside [-r, r]", s.to_f64())));
        }
        self.trace(s, TraceGoal::Return)
    }

    fn branch_value(&self, _key: &BranchKey, s: Dd) -> Result<Dd> {
        Ok(self.first_exit(s)?.s_out)
    }

    fn branch_value_f64(&self, _key: &BranchKey, s: f64) -> Result<f64> {
        Ok(self.first_exit_f64(s)?.s_out.to_f64())
    }

    fn pieces(&self, resolution: usize) -> Result<Vec<Piece>> {
        structure::seeded_pieces(self, resolution)
    }
}

/// Central difference of `pi` with one Richardson step; all stencil points
/// must share the branch key of `xi`.
pub fn return_derivative<M: ReturnMap + ?Sized>(map: &M, xi: Dd, delta: f64) -> Result<f64> {
    let base = map.first_return(xi)?;
    let d = Dd::from(delta);
    let f = |s: Dd| -> Result<Dd> {
        let rec = map.first_return(s)?;
        if rec.key() != base.key() {
            return Err(Error::BranchMismatch { s: xi.to_f64() });
        }
        Ok(rec.s_out)
    };
    let two = Dd::from(2.0);
    let d1 = (f(xi + d)? - f(xi - d)?) / (two * d);
    let h = d / two;
    let d2 = (f(xi + h)? - f(xi - h)?) / (two * h);
    Ok(((Dd::from(4.0) * d2 - d1) / Dd::from(3.0)).to_f64())
}

/// Finite itinerary: `halves` has `m + 1` entries (the starting half and the
/// half after each return) and `counts[i]` is the η-count of the `(i+1)`-th
/// return against `J` of `halves[i + 1]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItineraryWord {
    pub halves: Vec<u8>,
    pub counts: Vec<u32>,
}

impl ItineraryWord {
    pub fn depth(&self) -> usize {
        self.counts.len()
    }

    /// Drop the first return.
    pub fn shift(&self) -> ItineraryWord {
        ItineraryWord {
            halves: self.halves.get(1..).map(|h| h.to_vec()).unwrap_or_default(),
            counts: self.counts.get(1..).map(|c| c.to_vec()).unwrap_or_default(),
        }
    }

    pub fn truncate(&self, m: usize) -> ItineraryWord {
        let m = m.min(self.depth());
        ItineraryWord { halves: self.halves[..=m].to_vec(), counts: self.counts[..m].to_vec() }
    }
}

pub fn code_itinerary<M: ReturnMap + ?Sized>(map: &M, xi: Dd, m: usize) -> Result<ItineraryWord> {
    let mut halves = vec![half_of(xi)];
    let mut counts = Vec::with_capacity(m);
    let mut s = xi;
    for _ in 0..m {
        let rec = map.first_return(s)?;
        halves.push(rec.half_out);
        counts.push(rec.eta(rec.half_out));
        s = rec.s_out;
    }
    Ok(ItineraryWord { halves, counts })
}

/// `pi^m` by iteration, with the records along the way.
pub fn iterate<M: ReturnMap + ?Sized>(map: &M, xi: Dd, m: usize) -> Result<(Dd, Vec<ReturnRecord>)> {
    let mut s = xi;
    let mut recs = Vec::with_capacity(m);
    for _ in 0..m {
        let rec = map.first_return(s)?;
        s = rec.s_out;
        recs.push(rec);
    }
    Ok((s, recs))
}

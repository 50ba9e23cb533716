//! Piecewise-smooth trajectory executor for Filippov systems.
//!
//! Smooth pieces and sliding pieces are integrated with the Dormand–Prince
//! 5(4) pair. Switching events are bracketed on the dense output of each
//! accepted step and then solved to full working precision, so the resulting
//! flow maps are continuous functions of the initial point except where the
//! step controller flips between accepting and rejecting a step.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{classify, second_lie, Dynamics, FoldKind, RegionTag, Tolerances, Which};
use crate::real::{fmt17, Real, Vec3};
use crate::sliding::sliding_vector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    SmoothX,
    SmoothY,
    Slide,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SmoothX => "SmoothX",
            Mode::SmoothY => "SmoothY",
            Mode::Slide => "Slide",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    HitManifold,
    BeginSlide,
    ExitSlideAtFold,
    CrossThrough,
    ReachPseudoEquilibrium,
    SingularTangency,
    LeaveDomain,
    MaxTime,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            EventKind::ReachPseudoEquilibrium
                | EventKind::SingularTangency
                | EventKind::LeaveDomain
                | EventKind::MaxTime
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event<R> {
    pub time: R,
    pub location: Vec3<R>,
    pub kind: EventKind,
    /// `|h(location)|`.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment<R> {
    pub mode: Mode,
    pub t_start: R,
    pub t_end: R,
    pub start: Vec3<R>,
    pub end: Vec3<R>,
    /// Time-stamped points, including both endpoints, when recording is on.
    pub samples: Vec<(R, Vec3<R>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<R> {
    pub segments: Vec<Segment<R>>,
    pub events: Vec<Event<R>>,
}

impl<R: Real> Trajectory<R> {
    pub fn last_event(&self) -> Option<&Event<R>> {
        self.events.last()
    }

    pub fn end_point(&self) -> Option<Vec3<R>> {
        self.segments.last().map(|s| s.end)
    }

    pub fn to_f64(&self) -> Trajectory<f64> {
        let v = |p: &Vec3<R>| Vec3::from_f64(p.to_f64());
        Trajectory {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    mode: s.mode,
                    t_start: s.t_start.to_f64(),
                    t_end: s.t_end.to_f64(),
                    start: v(&s.start),
                    end: v(&s.end),
                    samples: s.samples.iter().map(|(t, p)| ((*t).to_f64(), v(p))).collect(),
                })
                .collect(),
            events: self
                .events
                .iter()
                .map(|e| Event { time: e.time.to_f64(), location: v(&e.location), kind: e.kind, residual: e.residual })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; `0` picks one from the field magnitude.
    pub h_init: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
    /// Half-width of the max-norm box outside which a run stops with `LeaveDomain`.
    pub domain_radius: f64,
    pub stall_tol: f64,
    pub event_max_iter: usize,
    pub chatter_events: usize,
    pub chatter_span: f64,
    pub record_samples: bool,
    /// Extra dense-output points recorded inside every accepted step.
    pub dense_per_step: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: 0.0,
            h_max: f64::INFINITY,
            h_min: 1e-14,
            max_steps: 2_000_000,
            domain_radius: 1e3,
            stall_tol: 1e-9,
            event_max_iter: 200,
            chatter_events: 50,
            chatter_span: 1e-9,
            record_samples: true,
            dense_per_step: 0,
        }
    }
}

/// Control returned by observers after each accepted step or event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// One accepted step with its continuous extension.
#[derive(Clone, Copy, Debug)]
pub struct Step<R> {
    pub t0: R,
    pub h: R,
    pub y0: Vec3<R>,
    pub y1: Vec3<R>,
    r: [Vec3<R>; 5],
}

impl<R: Real> Step<R> {
    pub fn t1(&self) -> R {
        self.t0 + self.h
    }

    /// Dense output at `t0 + theta h`, `theta` in `[0, 1]`.
    pub fn at_theta(&self, th: R) -> Vec3<R> {
        let th1 = R::one() - th;
        let a = self.r[3].axpy(th1, &self.r[4]);
        let a = self.r[2].axpy(th, &a);
        let a = self.r[1].axpy(th1, &a);
        self.r[0].axpy(th, &a)
    }
}

/// Hook into a running integration. `t_stop` is where the step is cut by an
/// event (or `step.t1()`).
pub trait Observer<R: Real> {
    fn on_step(&mut self, _mode: Mode, _step: &Step<R>, _t_stop: R) -> Control {
        Control::Continue
    }
    fn on_event(&mut self, _event: &Event<R>) -> Control {
        Control::Continue
    }
}

impl<R: Real> Observer<R> for () {}

struct Tableau<R> {
    a: [[R; 6]; 6],
    e: [R; 7],
    d: [R; 7],
}

fn q<R: Real>(n: f64, d: f64) -> R {
    R::lit(n) / R::lit(d)
}

impl<R: Real> Tableau<R> {
    fn new() -> Self {
        let z = R::zero();
        Tableau {
            a: [
                [q(1., 5.), z, z, z, z, z],
                [q(3., 40.), q(9., 40.), z, z, z, z],
                [q(44., 45.), q(-56., 15.), q(32., 9.), z, z, z],
                [q(19372., 6561.), q(-25360., 2187.), q(64448., 6561.), q(-212., 729.), z, z],
                [q(9017., 3168.), q(-355., 33.), q(46732., 5247.), q(49., 176.), q(-5103., 18656.), z],
                [q(35., 384.), z, q(500., 1113.), q(125., 192.), q(-2187., 6784.), q(11., 84.)],
            ],
            e: [q(71., 57600.), z, q(-71., 16695.), q(71., 1920.), q(-17253., 339200.), q(22., 525.), q(-1., 40.)],
            d: [
                q(-12715105075., 11282082432.),
                z,
                q(87487479700., 32700410799.),
                q(-10690763975., 1880347072.),
                q(701980252875., 199316789632.),
                q(-1453857185., 822651844.),
                q(69997945., 29380423.),
            ],
        }
    }
}

/// The right-hand side of one mode, in a given time direction.
struct ModeField<'a, S> {
    sys: &'a S,
    mode: Mode,
    backward: bool,
}

impl<S: Dynamics> ModeField<'_, S> {
    fn eval<R: Real>(&self, p: &Vec3<R>) -> Vec3<R> {
        let v = match self.mode {
            Mode::SmoothX => self.sys.x_field(p),
            Mode::SmoothY => self.sys.y_field(p),
            Mode::Slide => sliding_vector(self.sys, p),
        };
        if self.backward {
            -v
        } else {
            v
        }
    }

    /// Guard functions; the segment ends when one of them becomes non-negative.
    fn guards<R: Real>(&self, p: &Vec3<R>) -> [R; 2] {
        match self.mode {
            Mode::SmoothX => [-self.sys.h(p), -R::one()],
            Mode::SmoothY => [self.sys.h(p), -R::one()],
            Mode::Slide => {
                let g = self.sys.grad_h(p);
                [g.dot(&self.sys.x_field(p)), -g.dot(&self.sys.y_field(p))]
            }
        }
    }
}

/// `x^(-1/5)` by Newton steps from the f64 value, so the result is smooth in
/// `x` at the working precision.
fn inv_fifth_root<R: Real>(x: R) -> R {
    let mut y = R::lit(x.to_f64().powf(-0.2));
    for _ in 0..2 {
        let y5 = y * y * y * y * y;
        y = y * (R::lit(6.0) - x * y5) / R::lit(5.0);
    }
    y
}

fn project_to_manifold<S: Dynamics, R: Real>(sys: &S, p: Vec3<R>) -> Vec3<R> {
    let mut p = p;
    for _ in 0..3 {
        let hv = sys.h(&p);
        if hv == R::zero() {
            break;
        }
        let g = sys.grad_h(&p);
        p = p.axpy(-hv / g.dot(&g), &g);
        if sys.h(&p).abs().to_f64() < 1e-14 {
            break;
        }
    }
    p
}

/// Why a single segment ended.
struct SegmentEnd<R> {
    t: R,
    y: Vec3<R>,
    kind: EventKind,
    h_next: R,
    stopped: bool,
}

/// Root of `g(at_theta(.))` on `[a, b]` with `g(a) < 0 <= g(b)`, solved by
/// the Illinois variant of regula falsi with a bisection safeguard.
fn solve_on_step<R: Real, G: Fn(&Vec3<R>) -> R>(step: &Step<R>, g: G, mut a: R, mut b: R, max_iter: usize) -> R {
    let mut ga = g(&step.at_theta(a));
    let mut gb = g(&step.at_theta(b));
    let two = R::lit(2.0);
    let eps = R::lit(4.0 * R::unit_roundoff());
    let mut side = 0i8;
    for it in 0..max_iter {
        if b - a <= eps * (R::one() + b.abs()) {
            break;
        }
        let mut m = (a * gb - b * ga) / (gb - ga);
        let w = b - a;
        if it % 4 == 3 || !(m > a && m < b) || (m - a) < w * R::lit(1e-3) || (b - m) < w * R::lit(1e-3) {
            m = (a + b) / two;
        }
        let gm = g(&step.at_theta(m));
        if gm >= R::zero() {
            b = m;
            gb = gm;
            if side == 1 {
                ga = ga / two;
            }
            side = 1;
        } else {
            a = m;
            ga = gm;
            if side == -1 {
                gb = gb / two;
            }
            side = -1;
        }
        if gm == R::zero() {
            break;
        }
    }
    b
}

#[allow(clippy::too_many_arguments)]
fn run_segment<S: Dynamics, R: Real, O: Observer<R>>(
    sys: &S,
    mode: Mode,
    backward: bool,
    t0: R,
    y0: Vec3<R>,
    t_max: R,
    h_guess: Option<R>,
    opts: &IntegratorOptions,
    record: &mut Vec<(R, Vec3<R>)>,
    observer: &mut O,
) -> Result<SegmentEnd<R>> {
    let field = ModeField { sys, mode, backward };
    let tab = Tableau::<R>::new();
    let rtol = R::lit(opts.rtol);
    let atol = R::lit(opts.atol);
    let stall = R::lit(opts.stall_tol);
    let domain = R::lit(opts.domain_radius);
    let mut t = t0;
    let mut y = y0;
    if opts.record_samples {
        record.push((t, y));
    }
    let end = |t: R, y: Vec3<R>, kind, h_next: R, stopped| Ok(SegmentEnd { t, y, kind, h_next, stopped });

    let mut k1 = field.eval(&y);
    if mode == Mode::Slide && k1.norm() < stall {
        return end(t, y, EventKind::ReachPseudoEquilibrium, h_guess.unwrap_or(R::zero()), false);
    }
    if t >= t_max {
        return end(t, y, EventKind::MaxTime, h_guess.unwrap_or(R::zero()), false);
    }
    let mut h = match h_guess {
        Some(h) if h > R::zero() => h,
        _ if opts.h_init > 0.0 => R::lit(opts.h_init),
        _ => {
            let sc = |v: &Vec3<R>| {
                let mut s = R::zero();
                for i in 0..3 {
                    let w = atol + rtol * y[i].abs();
                    s = s + (v[i] / w) * (v[i] / w);
                }
                (s / R::lit(3.0)).sqrt()
            };
            let (d0, d1) = (sc(&y), sc(&k1));
            if d0.to_f64() < 1e-5 || d1.to_f64() < 1e-5 {
                R::lit(1e-6)
            } else {
                R::lit(0.01) * d0 / d1
            }
        }
    };
    let h_max = R::lit(opts.h_max);
    let mut last_rejected = false;
    let mut g0 = field.guards(&y);

    for _ in 0..opts.max_steps {
        if h > h_max {
            h = h_max;
        }
        let remaining = t_max - t;
        let clipped = h >= remaining;
        let hs = if clipped { remaining } else { h };
        if hs.to_f64() < opts.h_min * (1.0 + t.abs().to_f64()) && !clipped {
            return Err(Error::StepUnderflow { t: t.to_f64() });
        }

        // Stages.
        let a = &tab.a;
        let k2 = field.eval(&y.axpy(hs * a[0][0], &k1));
        let k3 = field.eval(&y.axpy(hs * a[1][0], &k1).axpy(hs * a[1][1], &k2));
        let k4 = field.eval(&y.axpy(hs * a[2][0], &k1).axpy(hs * a[2][1], &k2).axpy(hs * a[2][2], &k3));
        let k5 = field
            .eval(&y.axpy(hs * a[3][0], &k1).axpy(hs * a[3][1], &k2).axpy(hs * a[3][2], &k3).axpy(hs * a[3][3], &k4));
        let k6 = field.eval(
            &y.axpy(hs * a[4][0], &k1)
                .axpy(hs * a[4][1], &k2)
                .axpy(hs * a[4][2], &k3)
                .axpy(hs * a[4][3], &k4)
                .axpy(hs * a[4][4], &k5),
        );
        let y1 = y
            .axpy(hs * a[5][0], &k1)
            .axpy(hs * a[5][2], &k3)
            .axpy(hs * a[5][3], &k4)
            .axpy(hs * a[5][4], &k5)
            .axpy(hs * a[5][5], &k6);
        let k7 = field.eval(&y1);
        let e = &tab.e;
        let err_v = k1.scale(e[0]).axpy(e[2], &k3).axpy(e[3], &k4).axpy(e[4], &k5).axpy(e[5], &k6).axpy(e[6], &k7);
        let mut err = R::zero();
        for i in 0..3 {
            let sk = atol + rtol * y[i].abs().max(y1[i].abs());
            let r = hs * err_v[i] / sk;
            err = err + r * r;
        }
        let err = (err / R::lit(3.0)).sqrt();
        if !err.is_finite() {
            h = hs * R::lit(0.1);
            last_rejected = true;
            continue;
        }
        let fac = if err == R::zero() {
            R::lit(5.0)
        } else {
            (R::lit(0.9) * inv_fifth_root(err)).max(R::lit(0.2)).min(R::lit(5.0))
        };
        if err > R::one() {
            h = hs * fac.min(R::one());
            last_rejected = true;
            continue;
        }
        let h_next_raw = if last_rejected { hs * fac.min(R::one()) } else { hs * fac };
        last_rejected = false;

        let y1p = if mode == Mode::Slide { project_to_manifold(sys, y1) } else { y1 };
        let d = &tab.d;
        let r2 = y1p - y;
        let r3 = k1.scale(hs) - r2;
        let r4 = r2 - k7.scale(hs) - r3;
        let r5 = k1.scale(d[0]).axpy(d[2], &k3).axpy(d[3], &k4).axpy(d[4], &k5).axpy(d[5], &k6).axpy(d[6], &k7);
        let step = Step { t0: t, h: hs, y0: y, y1: y1p, r: [y, r2, r3, r4, r5.scale(hs)] };

        // Event detection on the dense output.
        let g1 = field.guards(&y1p);
        let mut hit: Option<R> = None;
        for gi in 0..2 {
            if g1[gi] < R::zero() {
                continue;
            }
            let gfun = |p: &Vec3<R>| field.guards(p)[gi];
            let mut lo = R::zero();
            if g0[gi] >= R::zero() {
                // Segment started on the guard surface: find an interior
                // point on the admissible side first.
                let mut found = None;
                for k in 1..16 {
                    let th = R::lit(k as f64 / 16.0);
                    if gfun(&step.at_theta(th)) < R::zero() {
                        found = Some(th);
                        break;
                    }
                }
                match found {
                    Some(th) => lo = th,
                    None => {
                        hit = Some(R::zero());
                        continue;
                    }
                }
                // Last admissible sample before the end of the step.
                for k in (1..16).rev() {
                    let th = R::lit(k as f64 / 16.0);
                    if th <= lo {
                        break;
                    }
                    if gfun(&step.at_theta(th)) < R::zero() {
                        lo = th;
                        break;
                    }
                }
            }
            let th = solve_on_step(&step, gfun, lo, R::one(), opts.event_max_iter);
            hit = Some(match hit {
                Some(o) if o < th => o,
                _ => th,
            });
        }

        if let Some(th) = hit {
            let t_ev = t + th * hs;
            let mut y_ev = if th == R::zero() { y } else { step.at_theta(th) };
            if mode == Mode::Slide {
                y_ev = project_to_manifold(sys, y_ev);
            }
            let stopped = observer.on_step(mode, &step, t_ev) == Control::Stop;
            if opts.record_samples {
                record_dense(record, &step, th, opts.dense_per_step);
                record.push((t_ev, y_ev));
            }
            let kind = if mode == Mode::Slide { EventKind::ExitSlideAtFold } else { EventKind::HitManifold };
            return end(t_ev, y_ev, kind, h_next_raw, stopped);
        }

        let stopped = observer.on_step(mode, &step, step.t1()) == Control::Stop;
        if opts.record_samples {
            record_dense(record, &step, R::one(), opts.dense_per_step);
            record.push((step.t1(), y1p));
        }
        t = if clipped { t_max } else { step.t1() };
        y = y1p;
        g0 = g1;
        k1 = if y1p == y1 { k7 } else { field.eval(&y) };
        h = h_next_raw;
        if stopped {
            return end(t, y, EventKind::MaxTime, h, true);
        }
        if y.max_abs() > domain {
            return end(t, y, EventKind::LeaveDomain, h, false);
        }
        if mode == Mode::Slide && k1.norm() < stall {
            return end(t, y, EventKind::ReachPseudoEquilibrium, h, false);
        }
        if clipped {
            return end(t, y, EventKind::MaxTime, h, false);
        }
    }
    Err(Error::StepUnderflow { t: t.to_f64() })
}

fn record_dense<R: Real>(record: &mut Vec<(R, Vec3<R>)>, step: &Step<R>, th_end: R, n: usize) {
    for k in 1..=n {
        let th = th_end * R::lit(k as f64 / (n + 1) as f64);
        record.push((step.t0 + th * step.h, step.at_theta(th)));
    }
}

fn smooth_mode(which: Which) -> Mode {
    match which {
        Which::X => Mode::SmoothX,
        Which::Y => Mode::SmoothY,
    }
}

/// Side of `M` a field starting on `M` moves into: `+1`, `-1`, or `0` when
/// undecided to second order.
fn departure_side<S: Dynamics, R: Real>(sys: &S, which: Which, p: &Vec3<R>, tol: &Tolerances) -> i8 {
    let wh = crate::geometry::lie(sys, which, p).to_f64();
    if wh > tol.tol {
        return 1;
    }
    if wh < -tol.tol {
        return -1;
    }
    let w2 = second_lie(sys, p, which, tol).to_f64();
    if w2 > tol.tol {
        1
    } else if w2 < -tol.tol {
        -1
    } else {
        0
    }
}

fn single<S: Dynamics, R: Real, O: Observer<R>>(
    sys: &S,
    mode: Mode,
    backward: bool,
    p0: &Vec3<R>,
    t_max: f64,
    opts: &IntegratorOptions,
    observer: &mut O,
) -> Result<(Segment<R>, Event<R>)> {
    let mut samples = Vec::new();
    let e = run_segment(sys, mode, backward, R::zero(), *p0, R::lit(t_max), None, opts, &mut samples, observer)?;
    let seg = Segment { mode, t_start: R::zero(), t_end: e.t, start: *p0, end: e.y, samples };
    let ev = Event { time: e.t, location: e.y, kind: e.kind, residual: sys.h(&e.y).abs().to_f64() };
    Ok((seg, ev))
}

/// Flow one smooth field until it reaches `M`, `t_max`, or the domain edge.
pub fn flow_smooth<S: Dynamics, R: Real>(
    sys: &S,
    which: Which,
    p0: &Vec3<R>,
    t_max: f64,
    opts: &IntegratorOptions,
    tol: &Tolerances,
) -> Result<(Segment<R>, Event<R>)> {
    let want = match which {
        Which::X => 1,
        Which::Y => -1,
    };
    if sys.h(p0).abs().to_f64() < tol.h_tol && departure_side(sys, which, p0, tol) != want && t_max > 0.0 {
        let seg = Segment {
            mode: smooth_mode(which),
            t_start: R::zero(),
            t_end: R::zero(),
            start: *p0,
            end: *p0,
            samples: vec![(R::zero(), *p0)],
        };
        let ev =
            Event { time: R::zero(), location: *p0, kind: EventKind::HitManifold, residual: sys.h(p0).abs().to_f64() };
        return Ok((seg, ev));
    }
    single(sys, smooth_mode(which), false, p0, t_max, opts, &mut ())
}

/// Backward-time smooth flow: integrates `-W`; reported times are elapsed
/// backward time.
pub fn flow_smooth_backward<S: Dynamics, R: Real>(
    sys: &S,
    which: Which,
    p0: &Vec3<R>,
    t_max: f64,
    opts: &IntegratorOptions,
) -> Result<(Segment<R>, Event<R>)> {
    single(sys, smooth_mode(which), true, p0, t_max, opts, &mut ())
}

/// Sliding flow from a point of `M^s` until a fold, a pseudo-equilibrium or `t_max`.
pub fn flow_slide<S: Dynamics, R: Real>(
    sys: &S,
    p0: &Vec3<R>,
    t_max: f64,
    opts: &IntegratorOptions,
    tol: &Tolerances,
) -> Result<(Segment<R>, Event<R>)> {
    let c = classify(sys, p0, tol)?;
    if c.tag != RegionTag::Sliding {
        return Err(Error::InvalidArgument(format!("sliding flow needs a start point in M^s, got {:?}", c.tag)));
    }
    single(sys, Mode::Slide, false, p0, t_max, opts, &mut ())
}

/// Backward sliding flow inside `M^s`; stops when the orbit leaves `M^s`
/// through a fold (reported as `ExitSlideAtFold`).
pub fn flow_slide_backward<S: Dynamics, R: Real>(
    sys: &S,
    p0: &Vec3<R>,
    t_max: f64,
    opts: &IntegratorOptions,
) -> Result<(Segment<R>, Event<R>)> {
    single(sys, Mode::Slide, true, p0, t_max, opts, &mut ())
}

/// [`flow_slide_backward`] with an observer that can stop the run.
pub fn flow_slide_backward_observed<S: Dynamics, R: Real, O: Observer<R>>(
    sys: &S,
    p0: &Vec3<R>,
    t_max: f64,
    opts: &IntegratorOptions,
    observer: &mut O,
) -> Result<(Segment<R>, Event<R>)> {
    single(sys, Mode::Slide, true, p0, t_max, opts, observer)
}

/// Forward Filippov trajectory from any point of the domain.
pub fn flow_filippov<S: Dynamics, R: Real, O: Observer<R>>(
    sys: &S,
    p0: &Vec3<R>,
    t_max: f64,
    opts: &IntegratorOptions,
    tol: &Tolerances,
    observer: &mut O,
) -> Result<Trajectory<R>> {
    let mut traj = Trajectory { segments: Vec::new(), events: Vec::new() };
    let t_max_r = R::lit(t_max);
    let mut t = R::zero();
    let mut p = *p0;
    let mut h_carry: Option<R> = None;
    let mut recent: VecDeque<f64> = VecDeque::new();

    let residual = |p: &Vec3<R>| sys.h(p).abs().to_f64();
    macro_rules! emit {
        ($kind:expr, $t:expr, $p:expr) => {{
            let ev = Event { time: $t, location: $p, kind: $kind, residual: residual(&$p) };
            traj.events.push(ev);
            recent.push_back(ev.time.to_f64());
            if recent.len() > opts.chatter_events {
                recent.pop_front();
            }
            if recent.len() == opts.chatter_events && opts.chatter_events > 0 {
                let span = recent.back().unwrap() - recent.front().unwrap();
                if span < opts.chatter_span {
                    return Err(Error::Chattering { events: opts.chatter_events, span });
                }
            }
            observer.on_event(&ev) == Control::Stop
        }};
    }

    loop {
        if t >= t_max_r {
            let _ = emit!(EventKind::MaxTime, t, p);
            break;
        }
        if p.max_abs().to_f64() > opts.domain_radius {
            let _ = emit!(EventKind::LeaveDomain, t, p);
            break;
        }
        let hv = sys.h(&p).to_f64();
        let mode = if hv >= tol.h_tol {
            Mode::SmoothX
        } else if hv <= -tol.h_tol {
            Mode::SmoothY
        } else {
            let c = classify(sys, &p, tol)?;
            let (xh, yh) = crate::geometry::lie_derivatives(sys, &p, tol)?;
            let (xh, yh) = (xh.to_f64(), yh.to_f64());
            match c.tag {
                RegionTag::Crossing => {
                    if emit!(EventKind::CrossThrough, t, p) {
                        break;
                    }
                    if xh > 0.0 {
                        Mode::SmoothX
                    } else {
                        Mode::SmoothY
                    }
                }
                RegionTag::Sliding => {
                    if emit!(EventKind::BeginSlide, t, p) {
                        break;
                    }
                    Mode::Slide
                }
                RegionTag::Escaping => return Err(Error::NonUniqueForward { point: p.to_f64() }),
                RegionTag::TangencyX if c.fold_kind == Some(FoldKind::VisibleFold) && yh > tol.tol => Mode::SmoothX,
                RegionTag::TangencyY if c.fold_kind == Some(FoldKind::VisibleFold) && xh < -tol.tol => Mode::SmoothY,
                _ => {
                    let _ = emit!(EventKind::SingularTangency, t, p);
                    break;
                }
            }
        };

        let mut samples = Vec::new();
        let e = run_segment(sys, mode, false, t, p, t_max_r, h_carry, opts, &mut samples, observer)?;
        traj.segments.push(Segment { mode, t_start: t, t_end: e.t, start: p, end: e.y, samples });
        t = e.t;
        p = e.y;
        h_carry = Some(e.h_next);
        if e.stopped {
            break;
        }
        let stop = emit!(e.kind, t, p);
        if stop || e.kind.is_terminal() {
            break;
        }
    }
    Ok(traj)
}

/// CSV export with columns `t,x,y,z,mode`.
pub fn write_csv<W: Write>(traj: &Trajectory<f64>, mut w: W) -> std::io::Result<()> {
    w.write_all(b"t,x,y,z,mode\n")?;
    for seg in &traj.segments {
        let pts: Vec<(f64, Vec3<f64>)> = if seg.samples.is_empty() {
            vec![(seg.t_start, seg.start), (seg.t_end, seg.end)]
        } else {
            seg.samples.clone()
        };
        for (t, p) in pts {
            writeln!(w, "{},{},{},{},{}", fmt17(t), fmt17(p[0]), fmt17(p[1]), fmt17(p[2]), seg.mode.name())?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub kind: EventKind,
    pub time: f64,
    pub location: [f64; 3],
    pub residual: f64,
}

pub fn event_log(traj: &Trajectory<f64>) -> Vec<EventRecord> {
    traj.events
        .iter()
        .map(|e| EventRecord { kind: e.kind, time: e.time, location: e.location.0, residual: e.residual })
        .collect()
}

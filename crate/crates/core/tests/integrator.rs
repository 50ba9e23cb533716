use fsh_core::geometry::{Dynamics, Tolerances, Which};
use fsh_core::integrator::{
    event_log, flow_filippov, flow_slide, flow_smooth, flow_smooth_backward, write_csv, EventKind, IntegratorOptions,
    Mode, Trajectory,
};
use fsh_core::models::{build_model, oracle_known_points, oracle_x_flow};
use fsh_core::{PiecewiseSystem, ShilnikovParams, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(a: f64, b: f64) -> (ShilnikovParams, PiecewiseSystem) {
    let p = ShilnikovParams::new(a, b).unwrap();
    (p, build_model(p))
}

fn manifold_event(k: EventKind) -> bool {
    matches!(k, EventKind::HitManifold | EventKind::BeginSlide | EventKind::ExitSlideAtFold | EventKind::CrossThrough)
}

fn check_invariants(sys: &PiecewiseSystem, traj: &Trajectory<f64>, tol: &Tolerances) {
    for w in traj.segments.windows(2) {
        assert!(w[0].end.dist(&w[1].start) < 1e-8, "segments do not chain");
    }
    for seg in &traj.segments {
        for (_, p) in &seg.samples {
            let h = sys.h(p);
            match seg.mode {
                Mode::SmoothX => assert!(h > -tol.h_tol, "SmoothX sample below M: h = {h:e}"),
                Mode::SmoothY => assert!(h < tol.h_tol, "SmoothY sample above M: h = {h:e}"),
                Mode::Slide => assert!(h.abs() < tol.h_tol, "slide sample off M: h = {h:e}"),
            }
        }
    }
    for ev in &traj.events {
        if manifold_event(ev.kind) {
            assert!(ev.residual < 1e-12, "{:?} residual {:e}", ev.kind, ev.residual);
        }
    }
}

#[test]
fn x_flight_from_q0_lands_on_origin() {
    let (prm, sys) = model(1.0, 1.0);
    let q0 = Vec3::<f64>::from_f64(oracle_known_points(prm).q0);
    let (seg, ev) =
        flow_smooth(&sys, Which::X, &q0, 10.0, &IntegratorOptions::default(), &Tolerances::default()).unwrap();
    assert_eq!(ev.kind, EventKind::HitManifold);
    assert!((ev.time - 1.5).abs() < 1e-10, "t = {}", ev.time);
    assert!(ev.location.norm() < 1e-9, "{:?}", ev.location);
    assert_eq!(seg.mode, Mode::SmoothX);
}

#[test]
fn y_flight_from_below() {
    let (_, sys) = model(1.0, 1.0);
    let p = Vec3::<f64>::new(0.0, 0.0, -1.0);
    let (_, ev) = flow_smooth(&sys, Which::Y, &p, 10.0, &IntegratorOptions::default(), &Tolerances::default()).unwrap();
    let t = 8.0 / 3.0;
    assert_eq!(ev.kind, EventKind::HitManifold);
    assert!((ev.time - t).abs() < 1e-9);
    // y' = 3y + 1, y(0) = 0
    let y = ((3.0 * t).exp() - 1.0) / 3.0;
    assert!((ev.location[0] - t).abs() < 1e-9);
    assert!((ev.location[1] - y).abs() < 1e-8 * y);
    assert!(ev.residual < 1e-12);
}

#[test]
fn zero_time_budget() {
    let (_, sys) = model(1.0, 1.0);
    let opts = IntegratorOptions::default();
    let tol = Tolerances::default();
    let p = Vec3::<f64>::new(0.2, 0.1, 0.5);
    let (seg, ev) = flow_smooth(&sys, Which::X, &p, 0.0, &opts, &tol).unwrap();
    assert_eq!(ev.kind, EventKind::MaxTime);
    assert_eq!(ev.location, p);
    assert_eq!(seg.t_end, 0.0);
    let s = Vec3::<f64>::new(0.01, 0.0, 0.0);
    assert_eq!(flow_slide(&sys, &s, 0.0, &opts, &tol).unwrap().1.kind, EventKind::MaxTime);
    let tr = flow_filippov(&sys, &s, 0.0, &opts, &tol, &mut ()).unwrap();
    assert_eq!(tr.last_event().unwrap().kind, EventKind::MaxTime);
}

#[test]
fn oracle_equivalence_over_parameter_grid() {
    let opts = IntegratorOptions { dense_per_step: 4, ..IntegratorOptions::default() };
    let tol = Tolerances::default();
    for a in [0.5, 1.0, 2.0] {
        for b in [0.5, 1.0, 2.0] {
            let (prm, sys) = model(a, b);
            let k = oracle_known_points(prm);
            let (seg, ev) =
                flow_smooth(&sys, Which::X, &Vec3::<f64>::from_f64(k.q0), 10.0 * k.t0, &opts, &tol).unwrap();
            assert_eq!(ev.kind, EventKind::HitManifold);
            assert!((ev.time - k.t0).abs() < 1e-8);
            let mut sup: f64 = 0.0;
            for (t, p) in &seg.samples {
                let q = oracle_x_flow(prm, k.q0, *t);
                sup = sup.max(p.dist(&Vec3::<f64>::from_f64(q)));
            }
            assert!(sup < 1e-8, "({a},{b}) sup error {sup:e}");
            assert!(ev.residual < 1e-12);
        }
    }
}

#[test]
fn smooth_flow_is_time_reversible() {
    let (_, sys) = model(1.0, 1.0);
    let opts = IntegratorOptions::default();
    let tol = Tolerances::default();
    let p = Vec3::<f64>::new(0.3, 2.0, 0.4);
    for dt in [0.1, 0.5, 1.0] {
        let (_, fwd) = flow_smooth(&sys, Which::X, &p, dt, &opts, &tol).unwrap();
        assert_eq!(fwd.kind, EventKind::MaxTime);
        let (_, back) = flow_smooth_backward(&sys, Which::X, &fwd.location, dt, &opts).unwrap();
        assert!(back.location.dist(&p) < 1e-8, "dt {dt}: {:e}", back.location.dist(&p));
    }
}

#[test]
fn slide_spirals_out_from_the_focus() {
    let (_, sys) = model(1.0, 1.0);
    let opts = IntegratorOptions { dense_per_step: 8, ..IntegratorOptions::default() };
    let tol = Tolerances::default();
    let (seg, ev) = flow_slide(&sys, &Vec3::<f64>::new(0.01, 0.0, 0.0), 1e3, &opts, &tol).unwrap();
    let mut xs = Vec::new();
    for w in seg.samples.windows(2) {
        let (a, b) = (w[0].1, w[1].1);
        if a[1] < 0.0 && b[1] >= 0.0 && a[0] > 0.0 {
            xs.push(a[0] + (b[0] - a[0]) * (-a[1]) / (b[1] - a[1]));
        }
    }
    assert!(xs.len() >= 3, "{} ray crossings", xs.len());
    assert!(xs.windows(2).all(|w| w[1] > w[0]), "{xs:?}");
    // This start lies between windings of the unstable spiral through q0 and
    // leaves along y -> -inf; scipy's LSODA/RK45 at rtol 1e-12 passes
    // y = -100 at t = 41.662 with x = 2.4467.
    assert_eq!(ev.kind, EventKind::LeaveDomain);
    let y100 = seg.samples.windows(2).find(|w| w[1].1[1] < -100.0).unwrap();
    let (a, b) = (y100[0], y100[1]);
    let th = (-100.0 - a.1[1]) / (b.1[1] - a.1[1]);
    assert!((a.0 + th * (b.0 - a.0) - 41.6625).abs() < 2e-3);
}

#[test]
fn slide_from_pseudo_equilibrium_stalls() {
    let (_, sys) = model(1.0, 1.0);
    let (seg, ev) =
        flow_slide(&sys, &Vec3::<f64>::zero(), 10.0, &IntegratorOptions::default(), &Tolerances::default()).unwrap();
    assert_eq!(ev.kind, EventKind::ReachPseudoEquilibrium);
    assert_eq!(ev.time, 0.0);
    assert_eq!(seg.end, Vec3::<f64>::zero());
}

#[test]
fn slide_needs_a_sliding_start() {
    let (_, sys) = model(1.0, 1.0);
    let err =
        flow_slide(&sys, &Vec3::<f64>::new(0.0, 1.0, 0.0), 1.0, &IntegratorOptions::default(), &Tolerances::default());
    assert!(err.is_err());
}

#[test]
fn homoclinic_orbit_from_q0() {
    let (prm, sys) = model(1.0, 1.0);
    let tol = Tolerances::default();
    let q0 = Vec3::<f64>::from_f64(oracle_known_points(prm).q0);
    let tr = flow_filippov(&sys, &q0, 20.0, &IntegratorOptions::default(), &tol, &mut ()).unwrap();
    let modes: Vec<Mode> = tr.segments.iter().map(|s| s.mode).collect();
    assert_eq!(modes, [Mode::SmoothX, Mode::Slide]);
    assert!((tr.segments[0].t_end - 1.5).abs() < 1e-10);
    assert_eq!(tr.events[0].kind, EventKind::HitManifold);
    assert!(tr.events[0].location.norm() < 1e-9);
    assert_eq!(tr.events[1].kind, EventKind::BeginSlide);
    assert_eq!(tr.last_event().unwrap().kind, EventKind::ReachPseudoEquilibrium);
    check_invariants(&sys, &tr, &tol);
}

#[test]
fn fold_exits_continue_along_x() {
    let (prm, sys) = model(1.0, 1.0);
    let tol = Tolerances::default();
    let q0 = oracle_known_points(prm).q0;
    let mut longest = 0;
    for s in [-0.03, -0.01, 0.004, 0.02, 0.045] {
        let p = Vec3::<f64>::new(q0[0] + s, q0[1], 0.0);
        let tr = flow_filippov(&sys, &p, 200.0, &IntegratorOptions::default(), &tol, &mut ()).unwrap();
        let modes: Vec<Mode> = tr.segments.iter().map(|s| s.mode).collect();
        for (i, m) in modes.iter().enumerate() {
            assert_eq!(*m, if i % 2 == 0 { Mode::SmoothX } else { Mode::Slide }, "{modes:?}");
        }
        for e in tr.events.iter().filter(|e| e.kind == EventKind::ExitSlideAtFold) {
            assert!((e.location[1] - prm.c()).abs() < 1e-9 && e.location[0] > 1.0);
        }
        longest = longest.max(modes.len());
        check_invariants(&sys, &tr, &tol);
    }
    assert!(longest >= 2);
}

#[test]
fn short_budget_gives_one_smooth_segment() {
    let (_, sys) = model(1.0, 1.0);
    let tol = Tolerances::default();
    let tr = flow_filippov(&sys, &Vec3::<f64>::new(0.0, 0.0, 1.0), 0.1, &IntegratorOptions::default(), &tol, &mut ())
        .unwrap();
    assert_eq!(tr.segments.len(), 1);
    assert_eq!(tr.segments[0].mode, Mode::SmoothX);
    assert_eq!(tr.events.len(), 1);
    assert_eq!(tr.events[0].kind, EventKind::MaxTime);
}

#[test]
fn random_starts_keep_mode_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = IntegratorOptions { dense_per_step: 2, ..IntegratorOptions::default() };
    let tol = Tolerances::default();
    let mut manifold_events = 0;
    for _ in 0..200 {
        let a = rng.gen_range(0.5..2.0);
        let b = rng.gen_range(0.5..2.0);
        let (_, sys) = model(a, b);
        let p = Vec3::<f64>::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let tr = flow_filippov(&sys, &p, 20.0, &opts, &tol, &mut ()).unwrap();
        assert!(tr.last_event().unwrap().kind.is_terminal());
        manifold_events += tr.events.iter().filter(|e| manifold_event(e.kind)).count();
        check_invariants(&sys, &tr, &tol);
    }
    assert!(manifold_events > 200);
}

#[test]
fn csv_and_event_log() {
    let (prm, sys) = model(1.0, 1.0);
    let q0 = Vec3::<f64>::from_f64(oracle_known_points(prm).q0);
    let tr = flow_filippov(&sys, &q0, 20.0, &IntegratorOptions::default(), &Tolerances::default(), &mut ()).unwrap();
    let mut buf = Vec::new();
    write_csv(&tr, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x,y,z,mode"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() > 2);
    assert!(rows.iter().all(|r| r.split(',').count() == 5));
    assert!(rows.last().unwrap().ends_with(",Slide"));
    assert!(!text.contains('\r'));
    let log = event_log(&tr);
    assert_eq!(log.last().unwrap().kind, EventKind::ReachPseudoEquilibrium);
    let json = serde_json::to_string(&log).unwrap();
    assert!(json.contains("\"BeginSlide\""));
}

use std::sync::OnceLock;

use fsh_core::geometry::{lie, Dynamics, Tolerances, Which};
use fsh_core::integrator::{flow_filippov, EventKind, IntegratorOptions, Mode};
use fsh_core::shilnikov::{
    build_section, build_structure, code_itinerary, count_words, cylinders, entropy_of, find_periodic, locate_cylinder,
    path_word, return_derivative, verify_shilnikov, FilippovReturnMap, PeriodicPoint, ReturnMap, ReturnOptions,
    Structure, VerifyOptions,
};
use fsh_core::{build_model, Dd, Error, PiecewiseSystem, Real, ShilnikovParams, Vec3};

const R: f64 = 0.05;
// neighbouring cylinders solve their shared end point separately
const ENDPOINT_NOISE: f64 = 1e-28;

struct Fixture {
    map: FilippovReturnMap<PiecewiseSystem>,
    st: Structure,
    fixed: Vec<PeriodicPoint>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let sys = build_model(ShilnikovParams::new(1.0, 1.0).unwrap());
        let map = FilippovReturnMap::build(sys, [1.4, 0.4, 0.0], R, 401, ReturnOptions::default()).unwrap();
        let st = build_structure(&map, 101).unwrap();
        let fixed = find_periodic(&map, &st, 1).unwrap();
        Fixture { map, st, fixed }
    })
}

fn model(a: f64, b: f64) -> PiecewiseSystem {
    build_model(ShilnikovParams::new(a, b).unwrap())
}

#[test]
fn section_centres() {
    let opts = ReturnOptions::default();
    let sec = build_section(&model(1.0, 1.0), [1.4, 0.4, 0.0], R, 401, &opts).unwrap();
    let c = sec.center_f64();
    assert!((c[0] - 1.5).abs() < 1e-10 && (c[1] - 0.375).abs() < 1e-12 && c[2].abs() < 1e-14, "{c:?}");
    assert!((sec.t0 - 1.5).abs() < 1e-9);
    for ((a, b), q0) in [((2.0, 1.0), [1.5, 0.1875]), ((0.5, 0.5), [0.75, 0.1875])] {
        let guess = [0.9 * q0[0], 1.1 * q0[1], 0.0];
        let c = build_section(&model(a, b), guess, R, 101, &opts).unwrap().center_f64();
        assert!((c[0] - q0[0]).abs() < 1e-10 && (c[1] - q0[1]).abs() < 1e-12, "{c:?}");
    }
    let err = build_section(&model(1.0, 1.0), [1.4, 0.4, 0.0], 0.0, 401, &opts).unwrap_err();
    assert_eq!(err.kind(), "degenerate-section");
}

#[test]
fn section_points_lie_on_the_fold_line() {
    let f = fixture();
    let tol = Tolerances::default();
    let sys = &f.map.sys;
    for i in 0..=20 {
        let s = -R + 2.0 * R * i as f64 / 20.0;
        let p = f.map.section.embed(sys, s);
        assert!(sys.h(&p).abs() < tol.h_tol);
        assert!(lie(sys, Which::X, &p).abs() < 1e-8);
        assert!((f.map.section.coord(&p) - s).abs() < 1e-12);
    }
}

#[test]
fn q0_itself_lies_on_the_homoclinic_orbit() {
    let f = fixture();
    match f.map.first_return(Dd::from(0.0)) {
        Err(Error::ReachPseudoEquilibrium { t }) => assert!((t - 1.5).abs() < 1e-8),
        other => panic!("{other:?}"),
    }
}

#[test]
fn fixed_points_of_the_return_map() {
    let f = fixture();
    assert!(f.fixed.len() >= 3);
    for p in &f.fixed {
        let rec = f.map.first_return(p.s).unwrap();
        assert!((rec.s_out - p.s).abs().to_f64() < 1e-10 * R);
        assert!(rec.t_return > 1.5);
        assert_eq!(rec.half_out, rec.half_in);
        let n = rec.eta(rec.half_out);
        // the point is repelling with |multiplier| ~ 1e4, so only a couple of
        // iterates stay on its piece
        let w = code_itinerary(&f.map, p.s, 2).unwrap();
        assert!(w.halves.iter().all(|&h| h == rec.half_out));
        assert!(w.counts.iter().all(|&c| c == n));
        assert!(p.multiplier.abs() > 1.0);
        let piece = &f.st.pieces[p.path[0]];
        let d = return_derivative(&f.map, p.s, 1e-3 * piece.width().to_f64()).unwrap();
        assert!((d - p.multiplier).abs() < 1e-4 * p.multiplier.abs(), "{d} vs {}", p.multiplier);
    }
}

#[test]
fn fixed_point_orbit_keeps_alternating() {
    let f = fixture();
    let sys = &f.map.sys;
    let p = f.map.section.embed(sys, f.fixed[0].s.to_f64());
    let opts = IntegratorOptions { record_samples: false, ..IntegratorOptions::default() };
    let tr = flow_filippov(sys, &p, 30.0, &opts, &Tolerances::default(), &mut ()).unwrap();
    let modes: Vec<Mode> = tr.segments.iter().map(|s| s.mode).collect();
    assert!(modes.len() >= 4, "{modes:?}");
    for (i, m) in modes.iter().enumerate() {
        assert_eq!(*m, if i % 2 == 0 { Mode::SmoothX } else { Mode::Slide });
    }
    let exits: Vec<[f64; 3]> =
        tr.events.iter().filter(|e| e.kind == EventKind::ExitSlideAtFold).map(|e| e.location.0).collect();
    let q = f.map.section.center_f64();
    let first = exits[0];
    assert!(Vec3::<f64>::from_f64(first).dist(&Vec3::<f64>::from_f64(q)) < R);
}

#[test]
fn periodic_words_are_periodic() {
    let f = fixture();
    let two = find_periodic(&f.map, &f.st, 2).unwrap();
    assert!(two.len() > f.fixed.len());
    for p in &f.fixed {
        assert!(two.iter().any(|q| (q.s - p.s).abs().to_f64() < 1e-12 * R));
    }
    for p in two.iter().chain(&f.fixed) {
        let m = p.period;
        assert_eq!(p.word.halves[0], p.word.halves[m]);
        assert_eq!(code_itinerary(&f.map, p.s, m).unwrap(), p.word);
        assert!(p.residual < 1e-10 * R);
    }
}

#[test]
fn default_word_counts() {
    let f = fixture();
    assert!(f.st.markov);
    let (n1, _) = count_words(&f.st, 1);
    assert!(n1 >= 4);
    let est = entropy_of(&f.st, 4);
    assert!(est.entropy > 0.0 && est.k >= 3);
    assert!((est.shift_entropy - (2.0 * est.k as f64).ln()).abs() < 1e-12);
}

fn check_nested_and_disjoint(
    f: &Fixture,
    parents: &[(Vec<usize>, (Dd, Dd))],
    children: &[(Vec<usize>, (Dd, Dd))],
    locate_every: usize,
) {
    for w in children.windows(2) {
        assert!(
            (w[0].1 .1 - w[1].1 .0).to_f64() <= ENDPOINT_NOISE,
            "cylinders of {:?} and {:?} overlap",
            w[0].0,
            w[1].0
        );
    }
    for (i, (path, (lo, hi))) in children.iter().enumerate() {
        assert!(lo < hi);
        let parent = parents.iter().find(|(p, _)| p[..] == path[..path.len() - 1]).expect("parent realized");
        let slack = Dd::from(ENDPOINT_NOISE);
        assert!(parent.1 .0 - slack <= *lo && *hi <= parent.1 .1 + slack, "{path:?} not inside its parent");
        if i % locate_every != 0 {
            continue;
        }
        let word = path_word(&f.st, path);
        let located = locate_cylinder(&f.map, &f.st, &word).unwrap();
        assert!(located.contains(&(*lo, *hi)));
    }
}

#[test]
fn depth_two_cylinders_nest_in_pieces() {
    let f = fixture();
    let ones = cylinders(&f.map, &f.st, 1).unwrap();
    let twos = cylinders(&f.map, &f.st, 2).unwrap();
    assert_eq!(twos.len() as u128, f.st.edges.iter().map(|e| e.len() as u128).sum::<u128>());
    check_nested_and_disjoint(f, &ones, &twos, 1);
}

#[test]
#[ignore = "all depth-3 words: about 9 minutes on one core"]
fn depth_three_cylinders_nest_and_are_disjoint() {
    let f = fixture();
    let twos = cylinders(&f.map, &f.st, 2).unwrap();
    let threes = cylinders(&f.map, &f.st, 3).unwrap();
    check_nested_and_disjoint(f, &twos, &threes, 25);
}

/// Midpoint of the depth-`m` cylinder of the path that starts at `piece` and
/// keeps taking the `k`-th available edge.
fn sample_point(f: &Fixture, piece: usize, k: usize, m: usize) -> Dd {
    let mut path = vec![piece];
    while path.len() < m {
        let e = &f.st.edges[*path.last().unwrap()];
        path.push(e[k % e.len()]);
    }
    let (lo, hi) = fsh_core::shilnikov::cylinder_of_path(&f.map, &f.st, &path).unwrap().unwrap();
    lo + (hi - lo) / Dd::from(2.0)
}

#[test]
fn cylinders_shrink_along_nested_families() {
    let f = fixture();
    for (piece, k) in [(0, 0), (7, 3), (15, 5)] {
        let xi = sample_point(f, piece, k, 4);
        let mut last = f64::INFINITY;
        for m in 1..=4 {
            let w = code_itinerary(&f.map, xi, m).unwrap();
            let ivs = locate_cylinder(&f.map, &f.st, &w).unwrap();
            let iv = ivs.iter().find(|(lo, hi)| *lo <= xi && xi <= *hi).expect("cylinder contains the point");
            let width = (iv.1 - iv.0).to_f64();
            if m > 1 {
                assert!(width / last < 1e-3, "ratio {}", width / last);
            }
            last = width;
        }
    }
}

#[test]
fn shift_compatibility_on_sampled_points() {
    let f = fixture();
    for piece in 0..f.st.pieces.len() {
        let xi = sample_point(f, piece, piece, 4);
        let w = code_itinerary(&f.map, xi, 3).unwrap();
        let next = f.map.first_return(xi).unwrap().s_out;
        assert_eq!(code_itinerary(&f.map, next, 2).unwrap(), w.shift());
    }
}

#[test]
fn verify_model_connections() {
    for (a, b) in [(1.0, 1.0), (2.0, 3.0)] {
        let prm = ShilnikovParams::new(a, b).unwrap();
        let opts = VerifyOptions { radius: 0.05 * b, ..VerifyOptions::default() };
        let rep = verify_shilnikov(&build_model(prm), [1.4 * b, 1.1 * prm.c(), 0.0], &opts).unwrap();
        assert!(rep.passed, "{:#?}", rep.certificates);
        assert!((rep.t0.unwrap() - prm.t0()).abs() < 1e-8);
        assert!(rep.landing.unwrap().iter().all(|v| v.abs() < 1e-8));
    }
}

#[test]
fn shifted_x_breaks_the_connection() {
    let sys = model(1.0, 1.0).with_x_shift([0.0, 0.0, 0.1]);
    let opts = VerifyOptions::default();
    let rep = verify_shilnikov(&sys, [1.4, 0.4, 0.0], &opts).unwrap();
    assert!(!rep.passed);
    let jj = rep.certificates.iter().find(|c| c.name == "landing-is-pseudo-equilibrium").unwrap();
    assert!(!jj.passed);
}

//! Branch pieces of the return map, the transition graph between them,
//! cylinders by pullback, periodic points and word counts.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{half_of, sample_j, BranchKey, FilippovReturnMap, ItineraryWord, Polyline, ReturnMap};
use crate::error::{Error, Result};
use crate::geometry::Dynamics;
use crate::integrator::{flow_slide_backward_observed, Control, Mode, Observer, Step};
use crate::real::{Dd, Real};

/// Default section resolution for periodic-point searches.
pub const DEFAULT_PERIODIC_SCAN: usize = 101;

const MAX_SOLVE_ITER: usize = 200;

/// A maximal interval on which the return map is continuous, monotone and
/// has a constant branch key.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Piece {
    pub lo: Dd,
    pub hi: Dd,
    pub key: BranchKey,
    /// Image `pi([lo, hi])`, sorted.
    pub image_lo: Dd,
    pub image_hi: Dd,
    pub increasing: bool,
}

impl Piece {
    pub fn width(&self) -> Dd {
        self.hi - self.lo
    }

    pub fn label(&self) -> (u8, u8, u32) {
        self.key.label()
    }

    fn value_at_lo(&self) -> Dd {
        if self.increasing {
            self.image_lo
        } else {
            self.image_hi
        }
    }

    fn value_at_hi(&self) -> Dd {
        if self.increasing {
            self.image_hi
        } else {
            self.image_lo
        }
    }
}

/// Serializable summary of a piece.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PieceRow {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
    pub half_in: u8,
    pub half_out: u8,
    pub eta0: u32,
    pub eta1: u32,
    pub excursions: u32,
    pub increasing: bool,
}

impl From<&Piece> for PieceRow {
    fn from(p: &Piece) -> Self {
        PieceRow {
            lo: p.lo.to_f64(),
            hi: p.hi.to_f64(),
            width: p.width().to_f64(),
            half_in: p.key.half_in,
            half_out: p.key.half_out,
            eta0: p.key.eta0,
            eta1: p.key.eta1,
            excursions: p.key.excursions,
            increasing: p.increasing,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Structure {
    pub radius: f64,
    pub resolution: usize,
    pub pieces: Vec<Piece>,
    /// `edges[a]` lists the pieces met by the image of piece `a`.
    pub edges: Vec<Vec<usize>>,
    /// Every edge is a full cover (the image contains the target piece).
    pub markov: bool,
    /// Distinct pieces carry distinct coding labels.
    pub labels_unique: bool,
}

fn overlap(a: (Dd, Dd), b: (Dd, Dd)) -> Option<(Dd, Dd)> {
    let lo = if a.0 > b.0 { a.0 } else { b.0 };
    let hi = if a.1 < b.1 { a.1 } else { b.1 };
    (lo < hi).then_some((lo, hi))
}

pub fn build_structure<M: ReturnMap + ?Sized>(map: &M, resolution: usize) -> Result<Structure> {
    let mut pieces = map.pieces(resolution)?;
    pieces.sort_by(|a, b| a.lo.partial_cmp(&b.lo).unwrap());
    let r = map.radius();
    let slack = Dd::from(1e-9 * r);
    let mut markov = true;
    let edges: Vec<Vec<usize>> = pieces
        .iter()
        .map(|a| {
            pieces
                .iter()
                .enumerate()
                .filter(|(_, b)| b.key.half_in == a.key.half_out)
                .filter_map(|(j, b)| {
                    overlap((a.image_lo, a.image_hi), (b.lo, b.hi))?;
                    if !(a.image_lo <= b.lo + slack && a.image_hi >= b.hi - slack) {
                        markov = false;
                    }
                    Some(j)
                })
                .collect()
        })
        .collect();
    let labels: HashSet<_> = pieces.iter().map(|p| p.label()).collect();
    let labels_unique = labels.len() == pieces.len();
    Ok(Structure { radius: r, resolution, pieces, edges, markov, labels_unique })
}

/// Illinois iteration on a bracket `f(a) f(b) <= 0`; stops once `|f| <= ftol`
/// or the bracket is down to working precision.
fn illinois<R: Real, F: Fn(R) -> Result<R>>(f: F, mut a: R, mut fa: R, mut b: R, mut fb: R, ftol: f64) -> Result<R> {
    let zero = R::zero();
    if fa == zero {
        return Ok(a);
    }
    if fb == zero {
        return Ok(b);
    }
    if (fa > zero) == (fb > zero) {
        return Err(Error::InvalidArgument("root solve needs a sign change".into()));
    }
    let two = R::lit(2.0);
    let eps = 16.0 * R::unit_roundoff();
    let mut side = 0i8;
    for _ in 0..MAX_SOLVE_ITER {
        let w = (b - a).abs();
        if w.to_f64() <= eps * a.abs().max(b.abs()).to_f64().max(1e-300) {
            break;
        }
        let mut m = (a * fb - b * fa) / (fb - fa);
        if !((m - a) * (m - b) < zero) {
            m = (a + b) / two;
        }
        let fm = f(m)?;
        if fm.abs().to_f64() <= ftol || fm == zero {
            return Ok(m);
        }
        if (fm > zero) == (fb > zero) {
            b = m;
            fb = fm;
            if side == 1 {
                fa = fa / two;
            }
            side = 1;
        } else {
            a = m;
            fa = fm;
            if side == -1 {
                fb = fb / two;
            }
            side = -1;
        }
    }
    Ok(if fa.abs() < fb.abs() { a } else { b })
}

/// Full-precision root of `f` near an approximate root `x`, searched on
/// brackets around `x` that grow until they reach `[lo, hi]`.
fn polish<F: Fn(Dd) -> Result<Dd>>(f: &F, x: Dd, lo: Dd, hi: Dd, ftol: f64) -> Result<Option<Dd>> {
    let span = (hi - lo).to_f64();
    let mut k = 64.0 * f64::EPSILON * x.abs().to_f64().max(span * 1e-9).max(1e-300);
    loop {
        let a = if x - Dd::from(k) > lo { x - Dd::from(k) } else { lo };
        let b = if x + Dd::from(k) < hi { x + Dd::from(k) } else { hi };
        let (fa, fb) = (f(a), f(b));
        if let (Ok(fa), Ok(fb)) = (fa, fb) {
            if (fa > Dd::from(0.0)) != (fb > Dd::from(0.0)) || fa == Dd::from(0.0) || fb == Dd::from(0.0) {
                return illinois(f, a, fa, b, fb, ftol).map(Some);
            }
        }
        if a == lo && b == hi {
            return Ok(None);
        }
        k *= 64.0;
    }
}

/// Secant iteration in full precision from an approximate root `x` with
/// approximate slope `k`; `None` if `|f| <= ftol` is not reached quickly.
fn newton_polish<F: Fn(Dd) -> Result<Dd>>(f: &F, x: Dd, k: f64, ftol: f64) -> Result<Option<Dd>> {
    if !(k.is_finite() && k != 0.0) {
        return Ok(None);
    }
    let (mut x0, mut f0) = (x, f(x)?);
    if f0.abs().to_f64() <= ftol {
        return Ok(Some(x0));
    }
    let mut x1 = x0 - f0 / Dd::from(k);
    for _ in 0..8 {
        let f1 = f(x1)?;
        if f1.abs().to_f64() <= ftol {
            return Ok(Some(x1));
        }
        if f1 == f0 {
            return Ok(None);
        }
        let x2 = x1 - f1 * (x1 - x0) / (f1 - f0);
        (x0, f0, x1) = (x1, f1, x2);
    }
    Ok(None)
}

/// Root and slope of `fast` on `[a, b]` in double precision.
fn fast_root<G: Fn(f64) -> Result<f64>>(fast: &G, a: f64, b: f64) -> Option<(f64, f64)> {
    let (ga, gb) = (fast(a).ok()?, fast(b).ok()?);
    if (ga > 0.0) == (gb > 0.0) && ga != 0.0 && gb != 0.0 {
        return None;
    }
    let x = illinois(fast, a, ga, b, gb, 0.0).ok()?;
    let h = 1e-4 * (b - a).abs();
    let (lo, hi) = ((x - h).max(a.min(b)), (x + h).min(a.max(b)));
    if !(hi > lo) {
        return None;
    }
    let k = (fast(hi).ok()? - fast(lo).ok()?) / (hi - lo);
    Some((x, k))
}

/// Root of `f` on `[a, b]`: located with the cheap `fast`, then polished.
/// `ends` are `f(a), f(b)` when already known.
fn solve_mixed<F, G>(fast: G, f: F, a: Dd, b: Dd, ends: Option<(Dd, Dd)>, ftol: f64) -> Result<Dd>
where
    F: Fn(Dd) -> Result<Dd>,
    G: Fn(f64) -> Result<f64>,
{
    if let Some((x, k)) = fast_root(&fast, a.to_f64(), b.to_f64()) {
        let xd = Dd::from(x).max(a).min(b);
        if let Some(root) = newton_polish(&f, xd, k, ftol)? {
            if root >= a && root <= b {
                return Ok(root);
            }
        }
        if let Some(root) = polish(&f, xd, a, b, ftol)? {
            return Ok(root);
        }
    }
    let (fa, fb) = match ends {
        Some(e) => e,
        None => (f(a)?, f(b)?),
    };
    illinois(f, a, fa, b, fb, ftol)
}

/// Solve `pi(xi) = target` on a piece.
fn solve_on_piece<M: ReturnMap + ?Sized>(map: &M, piece: &Piece, target: Dd, ftol: f64) -> Result<Dd> {
    if target == piece.value_at_lo() {
        return Ok(piece.lo);
    }
    if target == piece.value_at_hi() {
        return Ok(piece.hi);
    }
    let tf = target.to_f64();
    let fast = |s: f64| Ok(map.branch_value_f64(&piece.key, s)? - tf);
    let f = |s: Dd| Ok(map.branch_value(&piece.key, s)? - target);
    solve_mixed(fast, f, piece.lo, piece.hi, Some((piece.value_at_lo() - target, piece.value_at_hi() - target)), ftol)
}

/// Preimage in `piece` of `[u, v]` (clipped to the piece image).
fn pullback<M: ReturnMap + ?Sized>(map: &M, piece: &Piece, u: Dd, v: Dd) -> Result<Option<(Dd, Dd)>> {
    let Some((u, v)) = overlap((piece.image_lo, piece.image_hi), (u, v)) else {
        return Ok(None);
    };
    let ftol = 1e-13 * (v - u).to_f64();
    let a = solve_on_piece(map, piece, u, ftol)?;
    let b = solve_on_piece(map, piece, v, ftol)?;
    Ok(Some(if a < b { (a, b) } else { (b, a) }))
}

/// Cylinder `P_m` of a path of pieces: points whose `i`-th iterate lies in
/// piece `path[i]`.
pub fn cylinder_of_path<M: ReturnMap + ?Sized>(map: &M, st: &Structure, path: &[usize]) -> Result<Option<(Dd, Dd)>> {
    let Some(&last) = path.last() else {
        return Err(Error::InvalidArgument("empty path".into()));
    };
    let mut iv = (st.pieces[last].lo, st.pieces[last].hi);
    for &i in path[..path.len() - 1].iter().rev() {
        match pullback(map, &st.pieces[i], iv.0, iv.1)? {
            Some(next) => iv = next,
            None => return Ok(None),
        }
    }
    Ok(Some(iv))
}

/// Cylinders of all paths of `m` pieces, sorted by left end. Each level is
/// pulled back from the one below it, so a path costs one pullback.
pub fn cylinders<M: ReturnMap + ?Sized>(map: &M, st: &Structure, m: usize) -> Result<Vec<(Vec<usize>, (Dd, Dd))>> {
    if m == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    let mut level: Vec<(Vec<usize>, (Dd, Dd))> =
        st.pieces.iter().enumerate().map(|(i, p)| (vec![i], (p.lo, p.hi))).collect();
    for _ in 1..m {
        let work: Vec<(usize, usize)> = (0..level.len())
            .flat_map(|k| {
                let head = level[k].0[0];
                (0..st.pieces.len()).filter(move |&a| st.edges[a].contains(&head)).map(move |a| (a, k))
            })
            .collect();
        let next: Vec<Option<(Vec<usize>, (Dd, Dd))>> = work
            .par_iter()
            .map(|&(a, k)| {
                let (path, iv) = &level[k];
                Ok(pullback(map, &st.pieces[a], iv.0, iv.1)?.map(|c| {
                    let mut p = Vec::with_capacity(path.len() + 1);
                    p.push(a);
                    p.extend_from_slice(path);
                    (p, c)
                }))
            })
            .collect::<Result<_>>()?;
        level = next.into_iter().flatten().collect();
    }
    level.sort_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap());
    Ok(level)
}

pub fn path_word(st: &Structure, path: &[usize]) -> ItineraryWord {
    let mut halves = Vec::with_capacity(path.len() + 1);
    let mut counts = Vec::with_capacity(path.len());
    if let Some(&first) = path.first() {
        halves.push(st.pieces[first].key.half_in);
    }
    for &i in path {
        let k = st.pieces[i].key;
        halves.push(k.half_out);
        counts.push(k.eta(k.half_out));
    }
    ItineraryWord { halves, counts }
}

/// All paths of pieces realizing `word`. There is more than one only when
/// distinct pieces share a coding label.
pub fn find_paths(st: &Structure, word: &ItineraryWord) -> Vec<Vec<usize>> {
    let m = word.depth();
    if m == 0 || word.halves.len() != m + 1 {
        return Vec::new();
    }
    let cands: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            let want = (word.halves[i], word.halves[i + 1], word.counts[i]);
            (0..st.pieces.len()).filter(|&j| st.pieces[j].label() == want).collect()
        })
        .collect();
    fn dfs(st: &Structure, cands: &[Vec<usize>], path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let i = path.len();
        if i == cands.len() {
            out.push(path.clone());
            return;
        }
        for &c in &cands[i] {
            if let Some(&prev) = path.last() {
                if !st.edges[prev].contains(&c) {
                    continue;
                }
            }
            path.push(c);
            dfs(st, cands, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    dfs(st, &cands, &mut Vec::with_capacity(m), &mut out);
    out
}

pub fn find_path(st: &Structure, word: &ItineraryWord) -> Option<Vec<usize>> {
    find_paths(st, word).into_iter().next()
}

/// Cylinder of a word: the section points with that itinerary, as sorted
/// disjoint intervals (one per realizing path). Empty when the word is not
/// realized at this resolution.
pub fn locate_cylinder<M: ReturnMap + ?Sized>(map: &M, st: &Structure, word: &ItineraryWord) -> Result<Vec<(Dd, Dd)>> {
    let mut out = Vec::new();
    for path in find_paths(st, word) {
        if let Some(iv) = cylinder_of_path(map, st, &path)? {
            out.push(iv);
        }
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(out)
}

/// Number of realized words of depth `m`, saturating; the flag reports saturation.
pub fn count_words(st: &Structure, m: usize) -> (u128, bool) {
    if m == 0 {
        return (2, false);
    }
    if !st.labels_unique {
        let words: HashSet<ItineraryWord> =
            enumerate_words(st, m, 2_000_000).iter().map(|p| path_word(st, p)).collect();
        return (words.len() as u128, false);
    }
    let n = st.pieces.len();
    let mut dp = vec![1u128; n];
    let mut saturated = false;
    for _ in 1..m {
        let mut next = vec![0u128; n];
        for a in 0..n {
            for &b in &st.edges[a] {
                let (v, o) = next[b].overflowing_add(dp[a]);
                next[b] = if o { u128::MAX } else { v };
                saturated |= o;
            }
        }
        dp = next;
    }
    let mut total = 0u128;
    for v in dp {
        let (t, o) = total.overflowing_add(v);
        total = if o { u128::MAX } else { t };
        saturated |= o;
    }
    (total, saturated)
}

/// All paths of `m` pieces, stopping after `cap` paths.
pub fn enumerate_words(st: &Structure, m: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(m);
    fn go(st: &Structure, m: usize, cap: usize, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if out.len() >= cap {
            return;
        }
        if path.len() == m {
            out.push(path.clone());
            return;
        }
        let next: Vec<usize> = match path.last() {
            None => (0..st.pieces.len()).collect(),
            Some(&p) => st.edges[p].clone(),
        };
        for c in next {
            path.push(c);
            go(st, m, cap, path, out);
            path.pop();
        }
    }
    if m > 0 {
        go(st, m, cap, &mut path, &mut out);
    }
    out
}

fn closed_paths(st: &Structure, m: usize, cap: usize) -> Vec<Vec<usize>> {
    enumerate_words(st, m, usize::MAX)
        .into_iter()
        .filter(|p| st.edges[*p.last().unwrap()].contains(&p[0]))
        .take(cap)
        .collect()
}

/// `pi^m` along a fixed path, using the continuous branch values.
fn along_path<M: ReturnMap + ?Sized>(map: &M, st: &Structure, s: Dd, path: &[usize]) -> Result<Dd> {
    let mut x = s;
    for &i in path {
        x = map.branch_value(&st.pieces[i].key, x)?;
    }
    Ok(x)
}

fn along_path_f64<M: ReturnMap + ?Sized>(map: &M, st: &Structure, s: f64, path: &[usize]) -> Result<f64> {
    let mut x = s;
    for &i in path {
        x = map.branch_value_f64(&st.pieces[i].key, x)?;
    }
    Ok(x)
}

fn richardson_f64<F: Fn(f64) -> Result<f64>>(f: F, s: f64, delta: f64) -> Result<f64> {
    let d1 = (f(s + delta)? - f(s - delta)?) / (2.0 * delta);
    let h = delta / 2.0;
    let d2 = (f(s + h)? - f(s - h)?) / (2.0 * h);
    Ok((4.0 * d2 - d1) / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicPoint {
    pub s: Dd,
    pub period: usize,
    pub path: Vec<usize>,
    pub word: ItineraryWord,
    /// Derivative of `pi^m` at the point, as the product of the branch
    /// derivatives along the orbit.
    pub multiplier: f64,
    /// `|pi^m(s) - s|` by direct iteration of the return map.
    pub residual: f64,
    pub cylinder: (Dd, Dd),
}

/// Serializable view of a [`PeriodicPoint`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicRow {
    pub s: f64,
    pub s_lo_word: f64,
    pub period: usize,
    pub word: ItineraryWord,
    pub multiplier: f64,
    pub residual: f64,
    pub cylinder_width: f64,
}

impl From<&PeriodicPoint> for PeriodicRow {
    fn from(p: &PeriodicPoint) -> Self {
        PeriodicRow {
            s: p.s.hi(),
            s_lo_word: p.s.lo(),
            period: p.period,
            word: p.word.clone(),
            multiplier: p.multiplier,
            residual: p.residual,
            cylinder_width: (p.cylinder.1 - p.cylinder.0).to_f64(),
        }
    }
}

/// Points of period `m` (fixed points of `pi^m`), one per closed path of
/// pieces, each verified to `|pi^m(s) - s| < 1e-10 r`.
pub fn find_periodic<M: ReturnMap + ?Sized>(map: &M, st: &Structure, m: usize) -> Result<Vec<PeriodicPoint>> {
    if m == 0 {
        return Err(Error::InvalidArgument("period must be at least 1".into()));
    }
    let r = map.radius();
    let paths = closed_paths(st, m, 100_000);
    let found: Vec<Option<PeriodicPoint>> =
        paths.par_iter().map(|path| periodic_on_path(map, st, path, r).ok().flatten()).collect();
    let mut pts: Vec<PeriodicPoint> = found.into_iter().flatten().collect();
    pts.sort_by(|a, b| a.s.partial_cmp(&b.s).unwrap());
    pts.dedup_by(|a, b| (a.s - b.s).abs().to_f64() <= 1e-28 * r);
    Ok(pts)
}

fn periodic_on_path<M: ReturnMap + ?Sized>(
    map: &M,
    st: &Structure,
    path: &[usize],
    r: f64,
) -> Result<Option<PeriodicPoint>> {
    let m = path.len();
    let Some((lo, hi)) = cylinder_of_path(map, st, path)? else {
        return Ok(None);
    };
    let g = |s: Dd| Ok(along_path(map, st, s, path)? - s);
    let fast = |x: f64| Ok(along_path_f64(map, st, x, path)? - x);
    let s = solve_mixed(fast, g, lo, hi, None, 1e-14 * r)?;
    if s < lo || s > hi {
        return Ok(None);
    }
    let (end, recs) = super::iterate(map, s, m)?;
    let residual = (end - s).abs().to_f64();
    if residual >= 1e-10 * r {
        return Ok(None);
    }
    let mut multiplier = 1.0;
    for (rec, &i) in recs.iter().zip(path) {
        let piece = &st.pieces[i];
        let delta = (1e-7 * r).min(1e-3 * piece.width().to_f64());
        multiplier *= richardson_f64(|x| map.branch_value_f64(&piece.key, x), rec.s_in.to_f64(), delta)?;
    }
    let mut halves = vec![half_of(s)];
    halves.extend(recs.iter().map(|rec| rec.half_out));
    let word = ItineraryWord { halves, counts: recs.iter().map(|rec| rec.eta(rec.half_out)).collect() };
    Ok(Some(PeriodicPoint { s, period: m, path: path.to_vec(), word, multiplier, residual, cylinder: (lo, hi) }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub depth: usize,
    pub resolution: usize,
    pub pieces: usize,
    pub words: f64,
    pub saturated: bool,
    /// `(1/m) log(#words)`.
    pub entropy: f64,
    /// Largest η-count seen among the pieces.
    pub k: u32,
    /// `log(2k)`, the entropy of the full two-track shift on that alphabet.
    pub shift_entropy: f64,
    pub markov: bool,
}

pub fn entropy_estimate<M: ReturnMap + ?Sized>(map: &M, m: usize, resolution: usize) -> Result<EntropyEstimate> {
    if m == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    let st = build_structure(map, resolution)?;
    Ok(entropy_of(&st, m))
}

pub fn entropy_of(st: &Structure, m: usize) -> EntropyEstimate {
    let (words, saturated) = count_words(st, m);
    let k = st.pieces.iter().map(|p| p.key.eta0.max(p.key.eta1)).max().unwrap_or(0);
    let words = words as f64;
    EntropyEstimate {
        depth: m,
        resolution: st.resolution,
        pieces: st.pieces.len(),
        words,
        saturated,
        entropy: if words > 0.0 { words.ln() / m as f64 } else { f64::NEG_INFINITY },
        k,
        shift_entropy: crate::symbolic::shift_entropy(k.max(1) as u64),
        markov: st.markov,
    }
}

/// Pieces from runs of equal branch keys on a uniform grid of `n` points,
/// with run ends refined by bisection on key membership.
pub fn scan_pieces<M: ReturnMap + ?Sized>(map: &M, n: usize) -> Result<Vec<Piece>> {
    let r = map.radius();
    let n = n.max(2);
    let grid: Vec<Dd> =
        (0..n).map(|i| Dd::from(-r) + Dd::from(2.0 * r) * Dd::from(i as f64) / Dd::from((n - 1) as f64)).collect();
    let keys: Vec<Option<BranchKey>> =
        grid.par_iter().map(|&s| map.first_return(s).ok().map(|rec| rec.key())).collect();
    let same = |s: Dd, k: BranchKey| map.first_return(s).map(|rec| rec.key() == k).unwrap_or(false);
    let refine = |inside: Dd, outside: Dd, k: BranchKey| {
        let (mut a, mut b) = (inside, outside);
        for _ in 0..MAX_SOLVE_ITER {
            let scale = a.abs().max(b.abs()).to_f64().max(r * 1e-12);
            if (b - a).abs().to_f64() <= 16.0 * Dd::unit_roundoff() * scale {
                break;
            }
            let m = (a + b) / Dd::from(2.0);
            if same(m, k) {
                a = m;
            } else {
                b = m;
            }
        }
        a
    };
    let mut runs = Vec::new();
    let mut i = 0;
    while i < n {
        let Some(k) = keys[i] else {
            i += 1;
            continue;
        };
        let mut j = i;
        while j + 1 < n && keys[j + 1] == Some(k) {
            j += 1;
        }
        runs.push((i, j, k));
        i = j + 1;
    }
    runs.par_iter()
        .map(|&(i, j, k)| {
            let lo = if i == 0 { grid[0] } else { refine(grid[i], grid[i - 1], k) };
            let hi = if j == n - 1 { grid[n - 1] } else { refine(grid[j], grid[j + 1], k) };
            let (vl, vh) = (map.branch_value(&k, lo)?, map.branch_value(&k, hi)?);
            let increasing = vh >= vl;
            let (image_lo, image_hi) = if increasing { (vl, vh) } else { (vh, vl) };
            Ok(Piece { lo, hi, key: k, image_lo, image_hi, increasing })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Seed {
    s: f64,
}

/// Records where a backward sliding orbit crosses a polyline, and stops once
/// it is inside a given radius of the chart origin.
struct CrossingRecorder<'a> {
    pl: &'a Polyline,
    chart: &'a crate::sliding::TangentChart,
    stop_radius: f64,
    last: Option<[f64; 2]>,
    seeds: Vec<Seed>,
}

impl Observer<f64> for CrossingRecorder<'_> {
    fn on_step(&mut self, _mode: Mode, step: &Step<f64>, t_stop: f64) -> Control {
        let uv = |p| {
            let (u, v) = self.chart.project(&p);
            [u, v]
        };
        let th_end = (t_stop - step.t0) / step.h;
        let mut prev = self.last.unwrap_or_else(|| uv(step.y0));
        for k in 1..=4 {
            let cur = uv(step.at_theta(th_end * k as f64 / 4.0));
            for (_, s) in self.pl.crossings(prev, cur) {
                self.seeds.push(Seed { s });
            }
            prev = cur;
        }
        self.last = Some(prev);
        if prev[0].hypot(prev[1]) < self.stop_radius {
            Control::Stop
        } else {
            Control::Continue
        }
    }
}

/// Branch pieces of a Filippov return map, one pair per crossing of `J` by
/// the backward sliding orbit of `q0` at distance `> 2r/(n-1)` from `q0`.
///
/// Every single-excursion branch contains a point whose orbit runs into
/// `q0`, i.e. a crossing of that backward orbit with `J`; the branch is then
/// grown from it by solving for the first fold exit at `-r`, `0` and `r`.
pub(crate) fn seeded_pieces<S: Dynamics>(fm: &FilippovReturnMap<S>, resolution: usize) -> Result<Vec<Piece>> {
    let sec = &fm.section;
    let r = sec.radius;
    let n = resolution.max(3) | 1;
    let s_min = 2.0 * r / (n - 1) as f64;
    let pl = if n == sec.j.len() { sec.j.clone() } else { sample_j(&fm.sys, sec, n, &fm.opts)? };
    let mid = n / 2;
    let c = pl.points[mid];
    let near = |p: [f64; 2]| (p[0] - c[0]).hypot(p[1] - c[1]);
    let stop_radius = 0.5 * near(pl.points[mid - 1]).min(near(pl.points[mid + 1]));

    let mut rec = CrossingRecorder { pl: &pl, chart: &sec.chart, stop_radius, last: None, seeds: Vec::new() };
    let q0 = sec.embed(&fm.sys, 0.0f64);
    let mut o = fm.opts.integrator;
    o.record_samples = false;
    flow_slide_backward_observed(&fm.sys, &q0, 5000.0 * sec.t0, &o, &mut rec)?;
    let seeds: Vec<Seed> = rec.seeds.into_iter().filter(|sd| sd.s.abs() > s_min && sd.s.abs() < r).collect();

    let grown: Vec<Result<[Piece; 2]>> = seeds.par_iter().map(|sd| grow_branch(fm, sd.s)).collect();
    let mut out = Vec::new();
    for g in grown {
        match g {
            Ok(p) => out.extend(p),
            Err(Error::DegenerateSection(_)) => {}
            Err(e) => return Err(e),
        }
    }
    out.sort_by(|a, b| a.lo.partial_cmp(&b.lo).unwrap());
    out.dedup_by(|a, b| a.lo == b.lo && a.hi == b.hi);
    Ok(out)
}

/// Solve `E(s) = target` for the first-exit coordinate `E` near `s0`:
/// secant steps in double precision until the target is bracketed, Illinois,
/// then a full-precision polish. Also returns the local slope of `E`.
fn solve_exit<S: Dynamics>(fm: &FilippovReturnMap<S>, target: f64, s0: f64, slope: Option<f64>) -> Result<(Dd, f64)> {
    let r = fm.section.radius;
    let fail = || Error::DegenerateSection(format!("first-exit solve did not converge near s = {s0}"));
    let e = |s: f64| fm.first_exit_f64(s).map(|rec| rec.s_out.to_f64() - target);
    let mut a = s0;
    let mut fa = e(a)?;
    let scale = a.abs().max(r * 1e-9);
    let mut k = match slope {
        Some(k) => k,
        None => {
            let d = scale * 1e-7;
            (e(a + d)? - fa) / d
        }
    };
    let mut root = None;
    for _ in 0..80 {
        if fa == 0.0 {
            root = Some(a);
            break;
        }
        let mut step = -fa / k;
        let cap = scale * 0.05;
        if step.abs() > cap {
            step = cap.copysign(step);
        }
        let mut b = a + step;
        let mut fb = e(b);
        let mut tries = 0;
        while fb.is_err() && tries < 40 {
            step /= 2.0;
            b = a + step;
            fb = e(b);
            tries += 1;
        }
        let fb = fb?;
        if (fb > 0.0) != (fa > 0.0) {
            k = (fb - fa) / (b - a);
            root = Some(illinois(e, a, fa, b, fb, 0.0)?);
            break;
        }
        k = (fb - fa) / (b - a);
        a = b;
        fa = fb;
    }
    let x = root.ok_or_else(fail)?;
    let td = Dd::from(target);
    let f = |s: Dd| fm.first_exit(s).map(|rec| rec.s_out - td);
    let w = Dd::from(1e-6 * x.abs().max(r * 1e-9));
    let xd = Dd::from(x);
    let root = polish(&f, xd, xd - w, xd + w, 1e-14 * r)?.ok_or_else(fail)?;
    Ok((root, k))
}

fn grow_branch<S: Dynamics>(fm: &FilippovReturnMap<S>, seed: f64) -> Result<[Piece; 2]> {
    let r = fm.section.radius;
    let rd = Dd::from(r);
    let zero = Dd::from(0.0);
    let (c, k) = solve_exit(fm, 0.0, seed, None)?;
    let (e_neg, _) = solve_exit(fm, -r, c.to_f64(), Some(k))?;
    let (e_pos, _) = solve_exit(fm, r, c.to_f64(), Some(k))?;
    let inside = |s: Dd| s.abs().to_f64() < r;
    let h = half_of(c);
    if !inside(e_neg) || !inside(e_pos) || half_of(e_neg) != h || half_of(e_pos) != h {
        return Err(Error::DegenerateSection("branch leaves the section".into()));
    }
    let increasing = e_pos > e_neg;
    let mut pieces = Vec::with_capacity(2);
    for (end, half_out) in [(e_neg, 0u8), (e_pos, 1u8)] {
        let (lo, hi) = if end < c { (end, c) } else { (c, end) };
        let mid = (lo + hi) / Dd::from(2.0);
        let rec = fm.first_return(mid)?;
        if rec.half_out != half_out || rec.excursions != 1 {
            return Err(Error::DegenerateSection("inconsistent branch record".into()));
        }
        let (image_lo, image_hi) = if half_out == 0 { (-rd, zero) } else { (zero, rd) };
        let piece_increasing = (half_out == 1) == (end > c);
        debug_assert_eq!(piece_increasing, increasing);
        pieces.push(Piece { lo, hi, key: rec.key(), image_lo, image_hi, increasing: piece_increasing });
    }
    Ok([pieces[0], pieces[1]])
}

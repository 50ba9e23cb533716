//! Planar polylines with transversal segment-crossing counts.

/// Orientation values below this (relative to the segment lengths) count as
/// collinear and never produce a crossing.
pub const COLLINEAR_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    /// Parameter attached to each vertex (the section coordinate for `J`).
    pub params: Vec<f64>,
    lo: [f64; 2],
    hi: [f64; 2],
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Crossing of `ab` with `cd` as parameters `(t on ab, u on cd)`; `u` is
/// half-open `[0, 1)` so a path through a shared vertex counts once.
fn crossing(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> Option<(f64, f64)> {
    let scale = ((b[0] - a[0]).hypot(b[1] - a[1])) * ((d[0] - c[0]).hypot(d[1] - c[1]));
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    let den = d1 - d2;
    if den.abs() <= COLLINEAR_TOL * scale {
        return None;
    }
    if (d1 > 0.0) == (d2 > 0.0) && d1 != 0.0 && d2 != 0.0 {
        return None;
    }
    if (d3 > 0.0) == (d4 > 0.0) && d3 != 0.0 && d4 != 0.0 {
        return None;
    }
    let t = d1 / den;
    let u = d3 / (d3 - d4);
    if !(0.0..=1.0).contains(&t) || !(0.0..1.0).contains(&u) {
        return None;
    }
    Some((t, u))
}

impl Polyline {
    pub fn new(points: Vec<[f64; 2]>, params: Vec<f64>) -> Self {
        assert_eq!(points.len(), params.len());
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &points {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        Polyline { points, params, lo, hi }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn bbox_misses(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        (0..2).any(|i| a[i].max(b[i]) < self.lo[i] || a[i].min(b[i]) > self.hi[i])
    }

    /// All crossings of the segment `ab` with the polyline, as
    /// `(t on ab, interpolated vertex parameter)`.
    pub fn crossings(&self, a: [f64; 2], b: [f64; 2]) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        if self.points.len() < 2 || self.bbox_misses(a, b) {
            return out;
        }
        for i in 0..self.points.len() - 1 {
            let (c, d) = (self.points[i], self.points[i + 1]);
            if a[0].max(b[0]) < c[0].min(d[0])
                || a[0].min(b[0]) > c[0].max(d[0])
                || a[1].max(b[1]) < c[1].min(d[1])
                || a[1].min(b[1]) > c[1].max(d[1])
            {
                continue;
            }
            if let Some((t, u)) = crossing(a, b, c, d) {
                out.push((t, self.params[i] + u * (self.params[i + 1] - self.params[i])));
            }
        }
        out
    }

    /// Vertex index range `[from, to]` as its own polyline.
    pub fn slice(&self, from: usize, to: usize) -> Polyline {
        Polyline::new(self.points[from..=to].to_vec(), self.params[from..=to].to_vec())
    }
}
